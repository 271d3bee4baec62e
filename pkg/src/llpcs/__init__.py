"""Learning from label proportions with a covariate-shifted, fully labelled source."""

__version__ = "0.1.0"
