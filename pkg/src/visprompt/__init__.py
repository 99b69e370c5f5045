"""Zero-shot visual prompting: render prompts, propose masks, score, evaluate."""

__version__ = "0.1.0"
