"""Active imitation learning lab with persona-aware teacher modeling."""

__version__ = "0.1.0"
