"""Safe active exploration of unknown dynamics with GP models and pessimistic planning."""

__version__ = "0.1.0"
