"""Federated distillation simulator with logit-poisoning attacks."""

__version__ = "0.1.0"
