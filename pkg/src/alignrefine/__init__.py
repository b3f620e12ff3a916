"""Align-Refine: iterative CTC alignment refinement."""
