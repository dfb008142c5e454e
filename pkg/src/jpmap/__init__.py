"""Joint posterior maximization with a VAE prior for linear inverse problems."""

__version__ = "0.1.0"
