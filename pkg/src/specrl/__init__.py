"""specrl: a modular deep RL framework driven by declarative spec files."""

__version__ = "0.1.0"
