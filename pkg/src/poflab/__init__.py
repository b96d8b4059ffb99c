"""Feature-extractor post-training with line-searched classifier perturbations."""
__version__ = "0.1.0"
