"""Robust consumption-investment under Levy-triplet ambiguity: solver and verifier."""

__version__ = "0.1.0"
