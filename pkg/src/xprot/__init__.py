"""Head-level integrated-gradients attribution for protein transformer encoders."""

__version__ = "0.1.0"
