"""Average-reward learning with potential-based shaping from safety advice."""

__version__ = "0.1.0"
