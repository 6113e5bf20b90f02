"""Class-imbalance-aware nucleus detection with a per-mini-batch switching loss."""

__version__ = "0.1.0"
