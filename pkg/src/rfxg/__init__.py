"""Faithfulness evaluation for saliency-map explanations.

The package couples four ingredients: a perturbation protocol that masks the
most salient pixels of an image, saliency generators that answer pointwise or
contrastive questions about single classes or class groups, faithfulness
metrics that score how well a map's ranking predicts model behaviour under
masking, and a small trainable convnet plus synthetic dataset so everything
can be exercised end to end without external weights.
"""

__version__ = "0.1.0"
