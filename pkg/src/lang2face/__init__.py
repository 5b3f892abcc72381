"""Language-conditioned facial expression synthesis on procedurally rendered faces."""
__version__ = "0.1.0"
