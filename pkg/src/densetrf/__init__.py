"""Slot-conditioned dense prediction with unsupervised dual-branch adaptation."""
