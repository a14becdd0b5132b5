"""Quantum hidden Markov process analysis toolkit."""
