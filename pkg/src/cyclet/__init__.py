"""Teacher-to-student training with pseudo-labels, a weak/strong augmentation policy and three-stage cycle training."""

__version__ = "0.1.0"
