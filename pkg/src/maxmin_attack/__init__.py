"""Max-min transferable adversarial attacks with desk-scale numpy models."""

__version__ = "0.1.0"
