"""Chain-of-thought prompting and LoRA fine-tuning for query-category relevance."""

__version__ = "0.1.0"
