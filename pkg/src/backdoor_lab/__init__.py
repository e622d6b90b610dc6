"""Backdoor attack / data-free erasing lab."""
__version__ = "0.1.0"
