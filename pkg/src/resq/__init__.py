"""resq: desk-scale noise-disentangling discrete speech representation codec."""

__version__ = "0.1.0"
