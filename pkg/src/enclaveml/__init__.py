"""Attested provisioning, shielded storage and networking for distributed ML jobs."""

__version__ = "0.1.0"
