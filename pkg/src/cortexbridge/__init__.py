"""cortexbridge: conformal brain disks, bridge-based enhancement and pRF validation."""

__version__ = "0.1.0"
