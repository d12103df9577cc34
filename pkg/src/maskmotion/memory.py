"""Learnable store of motion-pattern prototypes.

The bank is a c x l parameter matrix addressed by a softmax over cosine
similarities and read out as the convex combination of its rows. It learns
purely by backpropagation; there is no slot-writing rule. A freeze switch
lets the trainer lock the rows while gradients keep flowing through the
readout to upstream encoders.
"""

from __future__ import annotations

import logging

import torch
from torch import nn

log = logging.getLogger(__name__)

ZERO_NORM_EPS = 1e-8


class MemoryBank(nn.Module):
    """Motion-pattern memory with cosine-softmax addressing.

    Rows are initialized on the unit sphere so cosines are non-degenerate at
    step 0. No row may become all-zero (cosine similarity would be
    undefined); `enforce_nonzero_rows` restores any row whose norm collapses
    during training.
    """

    def __init__(self, size_c: int = 100, length_l: int = 256, *,
                 dtype: torch.dtype = torch.float64,
                 generator: torch.Generator | None = None):
        super().__init__()
        if size_c < 1 or length_l < 1:
            raise ValueError(f"bank needs size_c >= 1 and length_l >= 1, got {size_c}x{length_l}")
        rows = torch.randn(size_c, length_l, dtype=dtype, generator=generator)
        rows = rows / rows.norm(dim=1, keepdim=True)
        self.entries = nn.Parameter(rows)
        self._frozen = False

    @property
    def size_c(self) -> int:
        return self.entries.shape[0]

    @property
    def length_l(self) -> int:
        return self.entries.shape[1]

    @property
    def frozen(self) -> bool:
        return self._frozen

    def set_frozen(self, flag: bool) -> None:
        """Lock or unlock the rows for optimizer updates.

        Freezing stops gradient accumulation on the entries themselves;
        gradients still flow through address/retrieve to whatever produced
        the query latent.
        """
        self._frozen = bool(flag)
        self.entries.requires_grad_(not self._frozen)
        if self._frozen:
            self.entries.grad = None

    def address(self, z: torch.Tensor) -> torch.Tensor:
        """Softmax of cosine similarities between z and every row.

        Accepts a single latent of shape (l,) or a batch (B, l); returns
        weights of shape (c,) or (B, c). Differentiable with respect to both
        z and the bank entries. A zero-norm latent is rejected outright, not
        silently regularized.
        """
        single = z.dim() == 1
        zb = z.unsqueeze(0) if single else z
        if zb.dim() != 2 or zb.shape[1] != self.length_l:
            raise ValueError(f"latent length {tuple(z.shape)} does not match bank length {self.length_l}")
        z_norm = zb.norm(dim=1)
        if bool((z_norm < ZERO_NORM_EPS).any()):
            raise ValueError("zero-norm latent: cosine similarity is undefined")
        row_norm = self.entries.norm(dim=1)
        cos = (zb / z_norm.unsqueeze(1)) @ (self.entries / row_norm.unsqueeze(1)).T
        weights = torch.softmax(cos, dim=1)
        return weights.squeeze(0) if single else weights

    def retrieve(self, w: torch.Tensor) -> torch.Tensor:
        """Weighted sum of rows; the readout lies in their convex hull."""
        single = w.dim() == 1
        wb = w.unsqueeze(0) if single else w
        if wb.dim() != 2 or wb.shape[1] != self.size_c:
            raise ValueError(f"weight length {tuple(w.shape)} does not match bank size {self.size_c}")
        out = wb @ self.entries
        return out.squeeze(0) if single else out

    def lookup(self, z: torch.Tensor) -> torch.Tensor:
        """Address-then-retrieve composite: the memory-refined latent."""
        return self.retrieve(self.address(z))

    @torch.no_grad()
    def enforce_nonzero_rows(self, eps: float = ZERO_NORM_EPS) -> int:
        """Re-normalize rows whose norm collapsed below eps; returns the count fixed."""
        norms = self.entries.norm(dim=1)
        bad = norms < eps
        n_bad = int(bad.sum())
        if n_bad:
            log.warning("memory bank: re-normalizing %d degenerate row(s)", n_bad)
            fresh = torch.randn(n_bad, self.length_l, dtype=self.entries.dtype)
            self.entries[bad] = fresh / fresh.norm(dim=1, keepdim=True) * eps * 10
        return n_bad
