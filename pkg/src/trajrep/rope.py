"""Multi-axis rotary position embeddings.

A head vector of dimension ``d_h`` is partitioned into per-axis blocks
(one block per positional coordinate); inside a block of size ``m`` the
adjacent pairs ``(x[2i], x[2i+1])`` are rotated by ``coord * base^(-2i/m)``
using the geometric frequency ladder. Rotations are orthogonal, so norms
are preserved exactly and query/key dot products depend only on coordinate
differences per block.

The geometric trajectory channel uses three axes (relative latitude,
relative longitude, relative time); the kinematic channel uses a single
temporal axis spanning the whole head.
"""

from __future__ import annotations

import torch


def block_frequencies(block_dim: int, base: float, dtype=torch.float64, device=None) -> torch.Tensor:
    """Frequency ladder base^(-2i/m) for pair indices i = 0..m/2-1."""
    if block_dim % 2 != 0:
        raise ValueError(f"rotary block dimension must be even, got {block_dim}")
    i = torch.arange(block_dim // 2, dtype=dtype, device=device)
    return base ** (-2.0 * i / block_dim)


def rotate_block(x: torch.Tensor, angles: torch.Tensor) -> torch.Tensor:
    """Rotate adjacent pairs of the last dimension by ``angles``.

    x: (..., m), angles: broadcastable to (..., m/2).
    """
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    cos = torch.cos(angles)
    sin = torch.sin(angles)
    even = x1 * cos - x2 * sin
    odd = x1 * sin + x2 * cos
    return torch.stack((even, odd), dim=-1).flatten(-2)


def rope_rotate(
    x: torch.Tensor,
    coords: torch.Tensor,
    split: tuple[int, ...],
    base: float,
) -> torch.Tensor:
    """Apply per-axis rotary rotations to ``x``.

    x: (..., L, d_h) with sum(split) == d_h; coords: (..., L, n_axes) with
    n_axes == len(split), broadcastable against x's leading dims.
    """
    if sum(split) != x.shape[-1]:
        raise ValueError(f"rope split {split} does not sum to head dim {x.shape[-1]}")
    if coords.shape[-1] != len(split):
        raise ValueError(f"{coords.shape[-1]} coordinate axes for split {split}")
    pieces = []
    offset = 0
    for axis, m in enumerate(split):
        freqs = block_frequencies(m, base, dtype=x.dtype, device=x.device)
        angles = coords[..., axis : axis + 1] * freqs  # (..., L, m/2)
        pieces.append(rotate_block(x[..., offset : offset + m], angles))
        offset += m
    return torch.cat(pieces, dim=-1)
