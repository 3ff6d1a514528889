"""Reference-assisted blind image quality assessment on a numpy autograd core."""

__version__ = "0.1.0"
