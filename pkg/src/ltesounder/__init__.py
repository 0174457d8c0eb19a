"""Multi-cell LTE CRS channel sounding: simulation, interference cancellation
and maximum-likelihood multipath estimation with a switched antenna array."""

__version__ = "0.1.0"
