"""Two-step robust unsupervised domain adaptation on small numpy networks."""

__version__ = "0.1.0"
