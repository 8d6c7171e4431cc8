"""Knowledge-adaptation distillation for semantic segmentation.

A small reverse-mode autodiff core (:mod:`kaseg.tensor`) drives a teacher
segmenter, a feature translator, a compact student and the losses that tie
them together.  Everything runs on NumPy at desk scale.
"""

__version__ = "0.1.0"
