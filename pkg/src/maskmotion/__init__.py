"""Instance-level motion prediction from binary mask sequences.

A motion predictor learns an object's dynamics from its previous masks and
forecasts the next-frame mask (position and shape). A learnable memory of
motion-pattern prototypes, addressed by cosine-softmax attention, refines the
pattern extracted from incomplete histories. The predicted masks plug into a
tracking-by-detection harness as an extra association score and are exposed
as an attention-map hook for segmentation decoders.
"""

from maskmotion.masks import (
    FrameMask,
    MaskSequence,
    ProbMask,
    binarize,
    decode_sequence,
    decode_sequences,
    encode_sequence,
    mask_iou,
    read_sequences,
    resize_with_padding,
    undo_resize,
    write_sequences,
)

__version__ = "0.1.0"

__all__ = [
    "FrameMask",
    "MaskSequence",
    "ProbMask",
    "binarize",
    "decode_sequence",
    "decode_sequences",
    "encode_sequence",
    "mask_iou",
    "read_sequences",
    "resize_with_padding",
    "undo_resize",
    "write_sequences",
    "__version__",
]
