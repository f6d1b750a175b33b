"""Shared per-pixel label and role conventions.

Class labels occupy 0..K-1. The outlier "class" is encoded as K so that
open-set label maps fit in a single integer raster, and 255 marks pixels
excluded from every loss and metric.
"""

from enum import IntEnum

IGNORE_LABEL = 255


class PixelRole(IntEnum):
    INLIER = 0
    OUTLIER = 1
    IGNORE = 2


def outlier_label(num_classes: int) -> int:
    """Label value reserved for outlier pixels in open-set maps."""
    return num_classes
