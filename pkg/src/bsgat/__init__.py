"""Behavior-similarity flow graphs and a behavior-weighted graph attention
network for NetFlow intrusion detection."""

__version__ = "0.1.0"
