"""Dual-stream trajectory encoder.

Two channels process a token sequence in parallel: a geometric channel
embeds cell identities and attends with three-axis rotary positions
(relative latitude, longitude, time); a kinematic channel embeds
(v_norm, sin heading, cos heading) triples through a GeGLU MLP and attends
with temporal-only rotary positions. After a shared run of per-channel
self-attention blocks, fusion blocks let each channel self-attend and then
cross-attend to the other channel's pre-update state, with spatiotemporal
rotary positions on both sides.

All sublayers are pre-norm residual blocks followed by two-layer GeGLU
MLPs; every linear map is bias-free. The model runs in float64 so
finite-difference gradient checks are meaningful.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .rope import rope_rotate
from .vocab import MASK_ID


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 32
    n_heads: int = 2
    n_layers_total: int = 4
    n_fusion: int = 1
    rope_split: tuple[int, int, int] = (6, 6, 4)
    rope_base: float = 10000.0
    coord_scale: float = 1e4  # multiplies relative lat/lon degrees before rotary angles
    max_seq_len: int = 192
    d_ff: int = 0  # 0 -> 4 * d_model
    kin_hidden: int = 0  # 0 -> d_model

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError("vocab_size must cover PAD/UNK/MASK plus at least one cell")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if not 0 <= self.n_fusion <= self.n_layers_total:
            raise ValueError("n_fusion must be between 0 and n_layers_total")
        if sum(self.rope_split) != self.head_dim:
            raise ValueError(f"rope_split {self.rope_split} must sum to head dim {self.head_dim}")
        if any(m % 2 != 0 for m in self.rope_split) or self.head_dim % 2 != 0:
            raise ValueError("rotary blocks must all be even-sized")
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.kin_hidden == 0:
            object.__setattr__(self, "kin_hidden", self.d_model)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_self_layers(self) -> int:
        return self.n_layers_total - self.n_fusion

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rope_split"] = list(self.rope_split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["rope_split"] = tuple(d["rope_split"])
        return cls(**d)


@dataclass(frozen=True)
class LossWeights:
    beta_speed: float = 1.0
    beta_heading: float = 1.0
    lambda_kin: float = 1.0

    def __post_init__(self):
        if min(self.beta_speed, self.beta_heading, self.lambda_kin) < 0:
            raise ValueError("loss weights must be non-negative")


class GeGLU(nn.Module):
    """Two-layer gated MLP: w_out(gelu(w_gate(x)) * w_val(x))."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, dtype=torch.float64):
        super().__init__()
        self.w_gate = nn.Linear(d_in, d_hidden, bias=False, dtype=dtype)
        self.w_val = nn.Linear(d_in, d_hidden, bias=False, dtype=dtype)
        self.w_out = nn.Linear(d_hidden, d_out, bias=False, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.w_out(F.gelu(self.w_gate(x)) * self.w_val(x))


class RopeAttention(nn.Module):
    """Multi-head scaled dot-product attention with rotary Q/K rotation.

    Queries may come from one stream and keys/values from another; the
    rotary split is chosen per call so the same module serves the
    spatiotemporal and temporal-only channels.
    """

    def __init__(self, cfg: EncoderConfig, dtype=torch.float64):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.head_dim
        self.rope_base = cfg.rope_base
        self.wq = nn.Linear(cfg.d_model, cfg.d_model, bias=False, dtype=dtype)
        self.wk = nn.Linear(cfg.d_model, cfg.d_model, bias=False, dtype=dtype)
        self.wv = nn.Linear(cfg.d_model, cfg.d_model, bias=False, dtype=dtype)
        self.wo = nn.Linear(cfg.d_model, cfg.d_model, bias=False, dtype=dtype)

    def forward(
        self,
        x_q: torch.Tensor,  # (B, Lq, d)
        x_kv: torch.Tensor,  # (B, Lk, d)
        coords_q: torch.Tensor,  # (B, Lq, A)
        coords_k: torch.Tensor,  # (B, Lk, A)
        split: tuple[int, ...],
        key_pad: torch.Tensor | None = None,  # (B, Lk) bool, True = padding
        return_weights: bool = False,
    ):
        bsz, l_q, d = x_q.shape
        l_k = x_kv.shape[1]
        h, dh = self.n_heads, self.head_dim

        q = self.wq(x_q).view(bsz, l_q, h, dh).transpose(1, 2)  # (B, H, Lq, dh)
        k = self.wk(x_kv).view(bsz, l_k, h, dh).transpose(1, 2)
        v = self.wv(x_kv).view(bsz, l_k, h, dh).transpose(1, 2)

        q = rope_rotate(q, coords_q.unsqueeze(1), split, self.rope_base)
        k = rope_rotate(k, coords_k.unsqueeze(1), split, self.rope_base)

        logits = q @ k.transpose(-1, -2) / (dh**0.5)  # (B, H, Lq, Lk)
        if key_pad is not None:
            logits = logits.masked_fill(key_pad[:, None, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        out = weights @ v  # (B, H, Lq, dh)
        out = out.transpose(1, 2).reshape(bsz, l_q, d)
        out = self.wo(out)
        if return_weights:
            return out, weights
        return out


class SelfBlock(nn.Module):
    """Pre-norm self-attention sublayer followed by a pre-norm GeGLU MLP."""

    def __init__(self, cfg: EncoderConfig, dtype=torch.float64):
        super().__init__()
        self.norm_attn = nn.LayerNorm(cfg.d_model, bias=False, dtype=dtype)
        self.attn = RopeAttention(cfg, dtype=dtype)
        self.norm_mlp = nn.LayerNorm(cfg.d_model, bias=False, dtype=dtype)
        self.mlp = GeGLU(cfg.d_model, cfg.d_ff, cfg.d_model, dtype=dtype)

    def forward(self, x, coords, split, key_pad=None):
        h = self.norm_attn(x)
        x = x + self.attn(h, h, coords, coords, split, key_pad)
        x = x + self.mlp(self.norm_mlp(x))
        return x


class CrossBlock(nn.Module):
    """Pre-norm cross-attention sublayer (keys/values from the other
    stream) followed by a pre-norm GeGLU MLP."""

    def __init__(self, cfg: EncoderConfig, dtype=torch.float64):
        super().__init__()
        self.norm_q = nn.LayerNorm(cfg.d_model, bias=False, dtype=dtype)
        self.norm_ctx = nn.LayerNorm(cfg.d_model, bias=False, dtype=dtype)
        self.attn = RopeAttention(cfg, dtype=dtype)
        self.norm_mlp = nn.LayerNorm(cfg.d_model, bias=False, dtype=dtype)
        self.mlp = GeGLU(cfg.d_model, cfg.d_ff, cfg.d_model, dtype=dtype)

    def forward(self, x, ctx, coords, split, key_pad=None):
        x = x + self.attn(self.norm_q(x), self.norm_ctx(ctx), coords, coords, split, key_pad)
        x = x + self.mlp(self.norm_mlp(x))
        return x


class FusionBlock(nn.Module):
    """One paired fusion layer: each stream self-attends, then
    cross-attends to the other stream's pre-update state."""

    def __init__(self, cfg: EncoderConfig, dtype=torch.float64):
        super().__init__()
        self.geo_self = SelfBlock(cfg, dtype=dtype)
        self.kin_self = SelfBlock(cfg, dtype=dtype)
        self.geo_cross = CrossBlock(cfg, dtype=dtype)
        self.kin_cross = CrossBlock(cfg, dtype=dtype)

    def forward(self, g, k, st_coords, t_coords, st_split, key_pad=None):
        g_pre, k_pre = g, k
        g_tilde = self.geo_self(g, st_coords, st_split, key_pad)
        k_tilde = self.kin_self(k, t_coords, (sum(st_split),), key_pad)
        # Cross reads the other stream's pre-update state; fusion aligns
        # both streams in the spatiotemporal frame.
        g = self.geo_cross(g_tilde, k_pre, st_coords, st_split, key_pad)
        k = self.kin_cross(k_tilde, g_pre, st_coords, st_split, key_pad)
        return g, k


class DualStreamEncoder(nn.Module):
    """Geometric + kinematic channels with rotary self-attention and
    cross-attention fusion, plus the two masked-prediction heads."""

    def __init__(self, cfg: EncoderConfig, dtype=torch.float64):
        super().__init__()
        self.cfg = cfg
        self.cell_embedding = nn.Embedding(cfg.vocab_size, cfg.d_model, dtype=dtype)
        self.kin_embedding = GeGLU(3, cfg.kin_hidden, cfg.d_model, dtype=dtype)
        self.geo_self_blocks = nn.ModuleList(
            SelfBlock(cfg, dtype=dtype) for _ in range(cfg.n_self_layers)
        )
        self.kin_self_blocks = nn.ModuleList(
            SelfBlock(cfg, dtype=dtype) for _ in range(cfg.n_self_layers)
        )
        self.fusion_blocks = nn.ModuleList(
            FusionBlock(cfg, dtype=dtype) for _ in range(cfg.n_fusion)
        )
        self.geo_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False, dtype=dtype)
        self.kin_head = nn.Linear(cfg.d_model, 3, bias=False, dtype=dtype)

    def forward(
        self,
        token_ids: torch.Tensor,  # (B, L) long, already co-masked where needed
        kin_feats: torch.Tensor,  # (B, L, 3) float, zeroed at masked positions
        rel_coords: torch.Tensor,  # (B, L, 3): (dlat deg, dlon deg, dt s) from first token
        key_pad: torch.Tensor | None = None,  # (B, L) bool, True = padding
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Final hidden states (G, K), each (B, L, d_model)."""
        cfg = self.cfg
        scale = torch.tensor(
            [cfg.coord_scale, cfg.coord_scale, 1.0],
            dtype=rel_coords.dtype,
            device=rel_coords.device,
        )
        st_coords = rel_coords * scale
        t_coords = st_coords[..., 2:3]
        st_split = cfg.rope_split
        t_split = (cfg.head_dim,)

        g = self.cell_embedding(token_ids)
        k = self.kin_embedding(kin_feats)
        for blk in self.geo_self_blocks:
            g = blk(g, st_coords, st_split, key_pad)
        for blk in self.kin_self_blocks:
            k = blk(k, t_coords, t_split, key_pad)
        for blk in self.fusion_blocks:
            g, k = blk(g, k, st_coords, t_coords, st_split, key_pad)
        return g, k

    def predict_masked(
        self,
        g_final: torch.Tensor,
        k_final: torch.Tensor,
        mask_batch: torch.Tensor,  # (M,) long, batch index of each masked position
        mask_pos: torch.Tensor,  # (M,) long, sequence index of each masked position
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """(cell logits (M, vocab_size), kinematic predictions (M, 3))."""
        g_sel = g_final[mask_batch, mask_pos]
        k_sel = k_final[mask_batch, mask_pos]
        return self.geo_head(g_sel), self.kin_head(k_sel)


def apply_mask(
    token_ids: torch.Tensor, kin_feats: torch.Tensor, mask_batch, mask_pos
) -> tuple[torch.Tensor, torch.Tensor]:
    """Co-masked model inputs: MASK embedding id on the geometric channel,
    zeroed feature triple on the kinematic channel."""
    ids = token_ids.clone()
    kin = kin_feats.clone()
    ids[mask_batch, mask_pos] = MASK_ID
    kin[mask_batch, mask_pos] = 0.0
    return ids, kin


def masked_cell_nll(logits: torch.Tensor, target_ids: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of the original cell ids at masked
    positions. ``logits``: (M, vocab_size), ``target_ids``: (M,)."""
    if logits.shape[0] == 0:
        raise ValueError("geometric loss requires at least one masked position")
    return F.cross_entropy(logits, target_ids, reduction="mean")


def masked_kinematic_loss(
    preds: torch.Tensor, targets: torch.Tensor, weights: LossWeights
) -> torch.Tensor:
    """Weighted reconstruction of (v_norm, sin heading, cos heading) at
    masked positions: beta_speed * MSE(v) + beta_heading/2 * (MSE(sin) + MSE(cos))."""
    if preds.shape[0] == 0:
        raise ValueError("kinematic loss requires at least one masked position")
    mse = ((preds - targets) ** 2).mean(dim=0)  # per-component, averaged over positions
    return (
        weights.beta_speed * mse[0]
        + 0.5 * weights.beta_heading * mse[1]
        + 0.5 * weights.beta_heading * mse[2]
    )


def joint_loss(geom: torch.Tensor, kin: torch.Tensor, lambda_kin: float) -> torch.Tensor:
    return geom + lambda_kin * kin


def relative_coords(coords: "object") -> "object":
    """Offsets (lat, lon, t) from the first token; works on (L, 3) arrays
    and (B, L, 3) tensors alike (first token per row)."""
    return coords - coords[..., :1, :]
