"""Online learning of Koopman embeddings with conformally triggered updates."""

__version__ = "0.1.0"
