"""Multi-domain text classification with shared-private adversarial training and
maximum batch Frobenius norm regularization."""

__version__ = "0.1.0"
