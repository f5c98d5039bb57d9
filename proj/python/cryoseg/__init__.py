"""Nuclei instance segmentation core bindings."""

try:
    from ._cryoseg import (
        aji,
        dice,
        evaluate_pair,
        extract_hematoxylin,
        gaussian_smooth,
        mask_to_contours,
        optical_density,
        panoptic_quality,
        segment_instances,
    )
except ImportError:  # in-tree test runs find the module beside the package
    from _cryoseg import (
        aji,
        dice,
        evaluate_pair,
        extract_hematoxylin,
        gaussian_smooth,
        mask_to_contours,
        optical_density,
        panoptic_quality,
        segment_instances,
    )

__all__ = [
    "aji",
    "dice",
    "evaluate_pair",
    "extract_hematoxylin",
    "gaussian_smooth",
    "mask_to_contours",
    "optical_density",
    "panoptic_quality",
    "segment_instances",
]
