"""Grokking lab: a numpy transformer, AdamW and WanD training, and a
Wang-Landau molecular dynamics sampler of entropy landscapes."""

__version__ = "0.1.0"
