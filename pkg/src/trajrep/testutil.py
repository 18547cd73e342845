"""Shared toy fixtures for gradient checks and exercises of the encoder.

The toy configuration (d_model=32, 2 heads, 4 layers with 1 fusion,
50-token vocabulary, length-16 sequences) is small enough for
finite-difference validation in seconds while exercising every parameter
group of the full architecture.
"""

from __future__ import annotations

import numpy as np
import torch

from .encoder import DualStreamEncoder, EncoderConfig, apply_mask
from .training import Batch
from .vocab import FIRST_CELL_ID

TOY_CONFIG = dict(
    vocab_size=50,
    d_model=32,
    n_heads=2,
    n_layers_total=4,
    n_fusion=1,
    rope_split=(6, 6, 4),
    max_seq_len=32,
)


def toy_config(**overrides) -> EncoderConfig:
    return EncoderConfig(**{**TOY_CONFIG, **overrides})


def random_batch(
    cfg: EncoderConfig,
    batch_size: int = 2,
    length: int = 16,
    n_masked: int = 4,
    seed: int = 0,
    ragged: bool = False,
) -> Batch:
    """A synthetic co-masked batch with plausible coordinate scales.

    Relative lat/lon offsets stay within ~0.05 degrees and times within an
    hour, matching what real tokenized trajectories produce.
    """
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0x70F], dtype=np.uint64)))
    lengths = [length] * batch_size
    if ragged and batch_size > 1:
        lengths = [int(rng.integers(max(2, length // 2), length + 1)) for _ in range(batch_size)]
        lengths[0] = length
    ids = np.zeros((batch_size, length), dtype=np.int64)
    kin = np.zeros((batch_size, length, 3), dtype=np.float64)
    rel = np.zeros((batch_size, length, 3), dtype=np.float64)
    pad = np.ones((batch_size, length), dtype=bool)
    mask_b: list[int] = []
    mask_l: list[int] = []
    for row, n in enumerate(lengths):
        ids[row, :n] = rng.integers(FIRST_CELL_ID, cfg.vocab_size, size=n)
        kin[row, :n, 0] = rng.uniform(0.0, 1.0, size=n)
        theta = rng.uniform(0.0, 2 * np.pi, size=n)
        kin[row, :n, 1] = np.sin(theta)
        kin[row, :n, 2] = np.cos(theta)
        rel[row, 1:n, 0] = np.cumsum(rng.normal(0.0, 2e-3, size=n - 1))
        rel[row, 1:n, 1] = np.cumsum(rng.normal(0.0, 2e-3, size=n - 1))
        rel[row, :n, 2] = np.arange(n) * 15.0
        pad[row, :n] = False
        picks = rng.choice(n, size=min(n_masked, n), replace=False)
        mask_b.extend([row] * len(picks))
        mask_l.extend(int(p) for p in sorted(picks))

    token_ids = torch.from_numpy(ids)
    kin_t = torch.from_numpy(kin)
    mask_batch = torch.tensor(mask_b, dtype=torch.long)
    mask_pos = torch.tensor(mask_l, dtype=torch.long)
    masked_ids, masked_kin = apply_mask(token_ids, kin_t, mask_batch, mask_pos)
    return Batch(
        token_ids=token_ids,
        masked_ids=masked_ids,
        kin=kin_t,
        masked_kin=masked_kin,
        rel_coords=torch.from_numpy(rel),
        key_pad=torch.from_numpy(pad),
        mask_batch=mask_batch,
        mask_pos=mask_pos,
        target_ids=token_ids[mask_batch, mask_pos],
        target_kin=kin_t[mask_batch, mask_pos],
    )


def toy_model_and_batch(seed: int = 0, **batch_kwargs):
    cfg = toy_config()
    torch.manual_seed(seed)
    model = DualStreamEncoder(cfg)
    batch = random_batch(cfg, seed=seed, **batch_kwargs)
    return model, batch
