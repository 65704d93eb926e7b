"""Monocular inter-vehicle distance and relative-velocity estimation from a
frame pair and vehicle boxes, with a synthetic data generator and a small
numpy autodiff core to train the fusion model."""

__version__ = "0.1.0"
