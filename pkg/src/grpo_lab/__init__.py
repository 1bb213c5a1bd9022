"""Toy-scale GRPO reasoning lab."""
