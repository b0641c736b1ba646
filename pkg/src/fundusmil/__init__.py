"""Multi-task multiple-instance network for referable diabetic retinopathy.

Preprocessing, patch-bag extraction, attention-pooled classification with a
coupled lesion segmentation decoder, joint training, and the evaluation
protocols used to report image-level and patch-level results.
"""

__version__ = "0.1.0"

LESION_CHANNELS = ("MA", "HE", "EX")
