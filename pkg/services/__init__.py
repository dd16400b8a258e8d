"""Service subpackage: training, checkpoints, evaluation, baselines, gradient checks."""
