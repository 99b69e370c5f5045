"""Model server and dataset converters for the visual prompting toolkit."""

__version__ = "0.1.0"
