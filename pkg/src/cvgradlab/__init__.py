"""Actor-critic policy gradients as control-variate estimators on tabular MDPs."""

__version__ = "0.1.0"
