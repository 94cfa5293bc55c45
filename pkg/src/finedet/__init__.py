"""Semi-supervised fine-grained detection on top of coarse box supervision.

Coarse classes carry bounding boxes, fine classes only image-level labels.
The package encodes coarse/fine correlations, re-ranks fine proposal scores
with attention taken from the coarse detector, regularizes both streams with
a two-level prototype memory, and ships a synthetic harness that trains
linear heads end to end.
"""

from finedet.correlation import CorrelationMatrix

__version__ = "0.1.0"

__all__ = ["CorrelationMatrix", "__version__"]
