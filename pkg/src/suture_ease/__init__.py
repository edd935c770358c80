"""Automated binary EASE suturing-skill scoring from video clips."""

__version__ = "0.1.0"
