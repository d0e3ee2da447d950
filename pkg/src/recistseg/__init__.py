"""Weakly supervised lesion segmentation from RECIST marks.

Trimaps built from the RECIST cross feed GrabCut on the annotated slice; a
small appearance model then propagates labels to neighbouring slices.
"""

__version__ = "0.1.0"
