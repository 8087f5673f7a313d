"""Reference remote guidance backend for the pixeldistill wire protocol."""

__version__ = "0.1.0"
