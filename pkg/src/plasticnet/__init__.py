"""plasticnet: trains networks that grow and prune neurons to fight class imbalance."""

__version__ = "0.1.0"
