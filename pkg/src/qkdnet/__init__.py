"""Seeded simulator for trusted-node QKD networks.

Physical channels feed detector-level Monte-Carlo engines, whose statistics
go through finite-key calculators. The resulting key is held by a key
management service with relay and combining routes, and encrypted
gateways consume it.
"""
__version__ = "0.1.0"
