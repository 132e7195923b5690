"""Tool library builder: turns fragmented question-specific tools into a
structured, retrievable library, and answers questions against it."""

__version__ = "0.1.0"
