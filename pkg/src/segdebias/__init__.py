"""segdebias: adversarial colour-bias unlearning for semantic segmentation.

Trains a multi-headed segmentation network whose auxiliary colour-bin head
sits behind a gradient-reversal layer, so the feature extractor is pushed to
drop colour cues. Ships the full evaluation stack needed to measure the
resulting robustness: corrupted validation sets (greyscale / invert / jitter),
confusion-matrix IoU metrics, and relative percent-change reporting.
"""

__version__ = "0.1.0"
