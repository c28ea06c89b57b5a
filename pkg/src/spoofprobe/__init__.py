"""Fine-grained adversarial vulnerability probing for face anti-spoofing models."""

__version__ = "0.1.0"
