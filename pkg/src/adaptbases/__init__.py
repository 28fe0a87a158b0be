"""Adaptive-basis spatial generalized linear mixed models fitted by reversible-jump MCMC."""

__version__ = "0.1.0"
