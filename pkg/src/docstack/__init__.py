"""DNS over CoAP stack with a constrained-network simulator."""

__version__ = "0.1.0"
