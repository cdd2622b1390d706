"""Traffic-signal control lab: a point-queue grid simulator and a
graph-attention double-Q agent operating under fog-node partitions."""

__version__ = "0.1.0"
