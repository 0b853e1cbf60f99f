"""Two-stage test-time adaptation with aggregated predictions, complementary
self-training and stepwise semantic alignment, at desk scale in numpy."""

__version__ = "0.1.0"
