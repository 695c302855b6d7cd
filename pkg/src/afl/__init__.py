"""Agentic feedback loop for recommendation: a recommender agent and a user
agent exchange proposals and critiques over a bounded number of rounds, with
a trained scorer suggesting items and a reward model scoring them."""

from __future__ import annotations

__version__ = "0.1.0"
