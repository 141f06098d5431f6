"""forgetlab: learning-rate distributions against forgetting, at desk scale.

Train a small transformer on an original task, then on a shifted one,
and search (Bayesian optimization under Hyperband) for per-layer-group
learning rates that keep the first task alive. Trial distributions are
merged with a rank-weighted geometric mean and evaluated against flat
and EWC baselines.
"""

__version__ = "0.1.0"
