"""aslab: class-activation maps vs. gradient saliency for weakly
supervised semantic segmentation, reproducible at desk scale.

The package trains small GAP-headed convnets from scratch, computes CAM
and input-gradient saliency attributions, studies their decision
geometry (signed distances to the thresholding hyperplanes), aggregates
perturbed saliency ensembles, resolves score maps into label masks, and
scores everything with segmentation metrics split over directly and
non-directly responsible ground-truth regions.
"""

__version__ = "0.1.0"
