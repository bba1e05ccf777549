"""Multimodal VAEs with Markov-random-field priors and posteriors."""

__version__ = "0.1.0"
