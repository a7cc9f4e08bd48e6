"""Multi-agent debate for LLM-as-a-judge with adaptive stopping."""

__version__ = "0.1.0"
