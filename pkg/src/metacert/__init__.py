"""metacert: meta-learned hypernetworks with numerically inverted
generalization-bound certificates."""

__version__ = "0.1.0"
