"""Binary mask types, mask arithmetic, and the line-based sequence file format.

Everything downstream (data generation, training, tracking) shares these
types and the run-length text format defined here, so the format is kept
bit-exact and diff-friendly: one UTF-8 line per frame, runs in row-major
scan order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np


class MaskFormatError(ValueError):
    """Malformed mask-sequence record; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def _as_binary(bits) -> np.ndarray:
    arr = np.ascontiguousarray(bits, dtype=np.uint8)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"mask must be at least 1x1, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("mask cells must be exactly 0 or 1")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FrameMask:
    """Binary occupancy grid for one instance in one frame."""

    bits: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bits", _as_binary(self.bits))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def area(self) -> int:
        return int(self.bits.sum())

    def is_empty(self) -> bool:
        return not self.bits.any()

    def centroid(self) -> tuple[float, float] | None:
        """Mean (row, col) of foreground pixels, or None for an empty mask."""
        if self.is_empty():
            return None
        rows, cols = np.nonzero(self.bits)
        return float(rows.mean()), float(cols.mean())

    @staticmethod
    def zeros(height: int, width: int) -> "FrameMask":
        return FrameMask(np.zeros((height, width), dtype=np.uint8))


@dataclass(frozen=True)
class ProbMask:
    """Per-pixel foreground probabilities, the network output before binarization."""

    probs: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.probs, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"prob mask must be 2-D and nonempty, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("prob mask contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    @property
    def width(self) -> int:
        return self.probs.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape


@dataclass(frozen=True)
class MaskSequence:
    """Identity-carrying, time-ordered mask history of a single instance."""

    instance_id: str
    frames: tuple[FrameMask, ...]
    frame_indices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        object.__setattr__(self, "frame_indices", tuple(int(i) for i in self.frame_indices))
        if len(self.frames) < 2:
            raise ValueError("a mask sequence needs at least 2 frames")
        if len(self.frames) != len(self.frame_indices):
            raise ValueError("frames and frame_indices must have equal length")
        shapes = {f.shape for f in self.frames}
        if len(shapes) != 1:
            raise ValueError(f"all frames must share one shape, got {sorted(shapes)}")
        if any(cur >= nxt for cur, nxt in zip(self.frame_indices, self.frame_indices[1:])):
            raise ValueError(f"frame_indices must be strictly increasing, got {self.frame_indices}")
        if " " in self.instance_id or "\n" in self.instance_id or not self.instance_id:
            raise ValueError(f"instance_id must be nonempty and whitespace-free: {self.instance_id!r}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].height

    @property
    def width(self) -> int:
        return self.frames[0].width

    def window(self, start: int, stop: int) -> "MaskSequence":
        """Sub-sequence by positional slice (stop exclusive)."""
        return MaskSequence(self.instance_id, self.frames[start:stop], self.frame_indices[start:stop])


def mask_iou(a: FrameMask, b: FrameMask) -> float:
    """Intersection-over-union of two same-shape masks.

    Two empty masks agree perfectly by convention and score 1.0; this keeps
    occlusion scenes (both predictor and truth say "absent") well-defined.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    inter = int(np.logical_and(a.bits, b.bits).sum())
    union = int(np.logical_or(a.bits, b.bits).sum())
    if union == 0:
        return 1.0
    return inter / union


def binarize(p: ProbMask, threshold: float = 0.5) -> FrameMask:
    """Threshold probabilities into a binary mask; cells >= threshold become 1."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return FrameMask((p.probs >= threshold).astype(np.uint8))


def _boundary(bits: np.ndarray) -> np.ndarray:
    from scipy.ndimage import binary_erosion
    fg = bits.astype(bool)
    return fg & ~binary_erosion(fg, border_value=0)


def boundary_f_score(pred: FrameMask, target: FrameMask, tolerance: float = 2.0) -> float:
    """Contour agreement: F1 of boundary pixels matched within `tolerance` px.

    Precision is the fraction of predicted boundary within tolerance of the
    target boundary (recall symmetric). Two empty masks agree (1.0); one
    empty side scores 0.0.
    """
    from scipy.ndimage import distance_transform_edt
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    bp = _boundary(pred.bits)
    bt = _boundary(target.bits)
    if not bp.any() and not bt.any():
        return 1.0
    if not bp.any() or not bt.any():
        return 0.0
    dist_to_target = distance_transform_edt(~bt)
    dist_to_pred = distance_transform_edt(~bp)
    precision = float((dist_to_target[bp] <= tolerance).mean())
    recall = float((dist_to_pred[bt] <= tolerance).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class ResizeTransform:
    """Inverse-mapping metadata from resize_with_padding.

    Records the original geometry so a prediction made on the padded square
    can be mapped back onto the source frame.
    """

    orig_height: int
    orig_width: int
    side: int
    content_height: int
    content_width: int
    pad_top: int
    pad_left: int


def _nearest_index(n_out: int, n_in: int) -> np.ndarray:
    # pixel-center nearest-neighbor mapping; preserves binarity
    return np.clip(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), 0, n_in - 1)


def resize_with_padding(m: FrameMask, side: int) -> tuple[FrameMask, ResizeTransform]:
    """Isotropically scale a mask to fit a side x side square and center-pad with zeros."""
    if side < 1:
        raise ValueError(f"side must be >= 1, got {side}")
    h, w = m.shape
    scale = side / max(h, w)
    ch = max(1, round(h * scale))
    cw = max(1, round(w * scale))
    rows = _nearest_index(ch, h)
    cols = _nearest_index(cw, w)
    content = m.bits[np.ix_(rows, cols)]
    pad_top = (side - ch) // 2
    pad_left = (side - cw) // 2
    out = np.zeros((side, side), dtype=np.uint8)
    out[pad_top:pad_top + ch, pad_left:pad_left + cw] = content
    tf = ResizeTransform(h, w, side, ch, cw, pad_top, pad_left)
    return FrameMask(out), tf


def undo_resize_array(values: np.ndarray, tf: ResizeTransform) -> np.ndarray:
    """Inverse mapping for any padded-square 2-D grid (masks or probabilities)."""
    if values.shape != (tf.side, tf.side):
        raise ValueError(f"grid shape {values.shape} does not match transform side {tf.side}")
    content = values[tf.pad_top:tf.pad_top + tf.content_height,
                     tf.pad_left:tf.pad_left + tf.content_width]
    rows = _nearest_index(tf.orig_height, tf.content_height)
    cols = _nearest_index(tf.orig_width, tf.content_width)
    return content[np.ix_(rows, cols)]


def undo_resize(m: FrameMask, tf: ResizeTransform) -> FrameMask:
    """Map a padded-square mask back to the original frame geometry."""
    return FrameMask(undo_resize_array(m.bits, tf))


def resize_image_with_padding(image: np.ndarray, side: int) -> np.ndarray:
    """Same geometry as resize_with_padding, applied to an HxWx3 image."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    scale = side / max(h, w)
    ch = max(1, round(h * scale))
    cw = max(1, round(w * scale))
    rows = _nearest_index(ch, h)
    cols = _nearest_index(cw, w)
    out = np.zeros((side, side, 3), dtype=image.dtype)
    out[(side - ch) // 2:(side - ch) // 2 + ch, (side - cw) // 2:(side - cw) // 2 + cw] = \
        image[np.ix_(rows, cols)]
    return out


# --- run-length sequence format -------------------------------------------
#
# SEQ <instance_id> <height> <width>
# F <frame_index> <v0>:<len0>,<v1>:<len1>,...
# (blank line terminates the sequence)
#
# Runs cover exactly height*width cells in row-major order and adjacent runs
# alternate value, so every valid mask has exactly one encoding.


def encode_runs(bits: np.ndarray) -> str:
    """Row-major run-length encoding of a binary grid: 'v:len,v:len,...'."""
    flat = bits.reshape(-1)
    change = np.nonzero(np.diff(flat))[0] + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [flat.size]))
    return ",".join(f"{int(flat[s])}:{int(e - s)}" for s, e in zip(starts, ends))


def _decode_runs(text: str, height: int, width: int, line_no: int) -> np.ndarray:
    total = height * width
    flat = np.empty(total, dtype=np.uint8)
    pos = 0
    prev_val = -1
    for part in text.split(","):
        fields = part.split(":")
        if len(fields) != 2:
            raise MaskFormatError(line_no, f"malformed run {part!r}")
        try:
            val, length = int(fields[0]), int(fields[1])
        except ValueError:
            raise MaskFormatError(line_no, f"non-integer run {part!r}") from None
        if val not in (0, 1):
            raise MaskFormatError(line_no, f"run value must be 0 or 1, got {val}")
        if length < 1:
            raise MaskFormatError(line_no, f"run length must be >= 1, got {length}")
        if val == prev_val:
            raise MaskFormatError(line_no, "adjacent runs must alternate value")
        if pos + length > total:
            raise MaskFormatError(line_no, f"runs exceed {height}x{width} cells")
        flat[pos:pos + length] = val
        pos += length
        prev_val = val
    if pos != total:
        raise MaskFormatError(line_no, f"runs cover {pos} cells, expected {total}")
    return flat.reshape(height, width)


def encode_sequence(s: MaskSequence) -> str:
    """Serialize one sequence to the line-delimited text format (trailing blank line)."""
    lines = [f"SEQ {s.instance_id} {s.height} {s.width}"]
    for idx, frame in zip(s.frame_indices, s.frames):
        lines.append(f"F {idx} {encode_runs(frame.bits)}")
    lines.append("")
    return "\n".join(lines) + "\n"


def decode_sequence(text: str) -> MaskSequence:
    """Parse exactly one sequence from text; extra records are rejected."""
    seqs = decode_sequences(text)
    if len(seqs) != 1:
        raise MaskFormatError(1, f"expected exactly one sequence, found {len(seqs)}")
    return seqs[0]


def decode_sequences(text: str) -> list[MaskSequence]:
    """Parse all sequences from a text blob (blank line terminates each)."""
    sequences: list[MaskSequence] = []
    header: tuple[str, int, int] | None = None
    frames: list[FrameMask] = []
    indices: list[int] = []

    def flush(line_no: int):
        nonlocal header, frames, indices
        if header is None:
            return
        instance_id, h, w = header
        if len(frames) < 2:
            raise MaskFormatError(line_no, f"sequence {instance_id!r} has {len(frames)} frames, need >= 2")
        try:
            sequences.append(MaskSequence(instance_id, tuple(frames), tuple(indices)))
        except ValueError as exc:
            raise MaskFormatError(line_no, str(exc)) from None
        header, frames, indices = None, [], []

    line_no = 0
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            flush(line_no)
            continue
        tokens = line.split()
        if tokens[0] == "SEQ":
            if header is not None:
                raise MaskFormatError(line_no, "SEQ before previous sequence was terminated")
            if len(tokens) != 4:
                raise MaskFormatError(line_no, "SEQ header needs: SEQ <id> <height> <width>")
            try:
                h, w = int(tokens[2]), int(tokens[3])
            except ValueError:
                raise MaskFormatError(line_no, "non-integer mask dimensions") from None
            if h < 1 or w < 1:
                raise MaskFormatError(line_no, f"dimensions must be >= 1, got {h}x{w}")
            header = (tokens[1], h, w)
        elif tokens[0] == "F":
            if header is None:
                raise MaskFormatError(line_no, "frame record before SEQ header")
            if len(tokens) != 3:
                raise MaskFormatError(line_no, "frame record needs: F <frame_index> <runs>")
            try:
                idx = int(tokens[1])
            except ValueError:
                raise MaskFormatError(line_no, f"non-integer frame index {tokens[1]!r}") from None
            frames.append(FrameMask(_decode_runs(tokens[2], header[1], header[2], line_no)))
            indices.append(idx)
        else:
            raise MaskFormatError(line_no, f"unknown record type {tokens[0]!r}")
    flush(line_no + 1)
    return sequences


def write_sequences(path, sequences: Iterable[MaskSequence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            fh.write(encode_sequence(seq))


def read_sequences(path) -> list[MaskSequence]:
    with open(path, "r", encoding="utf-8") as fh:
        return decode_sequences(fh.read())
