"""Desk-scale simulator of personalized federated fine-tuning with
multi-modal adapters over a frozen toy dual encoder."""

__version__ = "0.1.0"
