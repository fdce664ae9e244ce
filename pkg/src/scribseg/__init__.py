"""Scribble-supervised segmentation with attentive similarity regularization."""
