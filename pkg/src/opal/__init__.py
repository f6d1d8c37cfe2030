"""Per-instance operator-program synthesis for black-box optimisation."""

__version__ = "0.1.0"
