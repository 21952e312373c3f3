"""Weakly-supervised whole-slide screening over patch embeddings.

Stage 1 trains a mean-pooling instance classifier and keeps the top-k patches
per slide; stage 2 fits a linear adapter with InfoNCE on that corpus; stage 3
trains a MIL head on adapted features. Metrics include sensitivity-constrained
specificity.
"""

__version__ = "0.1.0"
