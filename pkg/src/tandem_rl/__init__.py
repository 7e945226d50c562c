"""Tandem ASV + spoofing-countermeasure optimization with REINFORCE."""

__version__ = "0.1.0"
