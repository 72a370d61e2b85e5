"""Layered orchestration/escalation runtime with a deterministic trust-metric simulator."""

__version__ = "0.1.0"
