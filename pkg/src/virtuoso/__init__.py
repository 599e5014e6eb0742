"""Joint speech-text model with transducer recognition and non-autoregressive synthesis."""

__version__ = "0.1.0"
