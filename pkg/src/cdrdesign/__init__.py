"""Contact-first antibody CDR sequence and structure design."""

__version__ = "0.1.0"
