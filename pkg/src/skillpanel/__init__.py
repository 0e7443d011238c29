"""Skill extraction from job postings, taxonomy benchmarking, and firm-panel estimation."""

__version__ = "0.1.0"
