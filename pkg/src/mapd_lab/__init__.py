"""Desk-scale lab for meta-learned soft-prompt distillation."""

__version__ = "0.1.0"
