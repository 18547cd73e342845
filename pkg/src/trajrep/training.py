"""Pretraining loop, gradient utilities, and checkpoint persistence.

Training is deterministic given the seed: parameter init comes from
``torch.manual_seed``, batch composition from a seeded numpy generator,
and per-item masks from the counter-based Philox scheme keyed by
(seed, trajectory index, step). Checkpoints are a versioned binary format:
a JSON header (config echo, step, seed, tensor inventory) followed by raw
little-endian float64 tensors and a SHA-256 integrity checksum.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .encoder import (
    DualStreamEncoder,
    EncoderConfig,
    LossWeights,
    apply_mask,
    joint_loss,
    masked_cell_nll,
    masked_kinematic_loss,
    relative_coords,
)
from .masking import MaskSpec, derive_stream, sample_mask
from .tokenizer import TokenSequence, kinematic_features

CHECKPOINT_MAGIC = b"TRAJREPC"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during optimization."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed, mis-versioned, or corrupt."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_frac: float = 0.2
    seed: int = 0
    accuracy_interval: int = 50  # steps between masked top-1 accuracy probes


@dataclass
class TraceRecord:
    step: int
    joint: float
    geom: float
    kin: float
    accuracy: float | None = None

    def to_line(self) -> str:
        acc = "" if self.accuracy is None else f"\t{self.accuracy!r}"
        return f"{self.step}\t{self.joint!r}\t{self.geom!r}\t{self.kin!r}{acc}"


class TokenDataset:
    """Token sequences pre-converted to arrays for batching."""

    def __init__(self, seqs: list[TokenSequence], v_max: float):
        if not seqs:
            raise ValueError("dataset is empty")
        self.v_max = v_max
        self.ids = [seq.token_ids() for seq in seqs]
        self.kin = [kinematic_features(seq, v_max) for seq in seqs]
        self.rel = [relative_coords(seq.coords()) for seq in seqs]
        self.traj_ids = [seq.traj_id for seq in seqs]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Batch:
    token_ids: torch.Tensor  # (B, L) original ids
    masked_ids: torch.Tensor  # (B, L) with MASK at masked positions
    kin: torch.Tensor  # (B, L, 3) original features
    masked_kin: torch.Tensor  # (B, L, 3) zeroed at masked positions
    rel_coords: torch.Tensor  # (B, L, 3)
    key_pad: torch.Tensor  # (B, L) bool
    mask_batch: torch.Tensor  # (M,)
    mask_pos: torch.Tensor  # (M,)
    target_ids: torch.Tensor  # (M,)
    target_kin: torch.Tensor  # (M, 3)


def make_batch(
    dataset: TokenDataset,
    indices,
    mask_spec: MaskSpec,
    step: int = 0,
    dtype=torch.float64,
) -> Batch:
    """Pad, co-mask, and tensorize the selected dataset items.

    Masks are sampled per item from stream (trajectory index, step), so the
    batch is reproducible independent of worker scheduling.
    """
    indices = list(indices)
    lengths = [len(dataset.ids[i]) for i in indices]
    l_max = max(lengths)
    bsz = len(indices)

    ids = np.zeros((bsz, l_max), dtype=np.int64)  # PAD = 0
    kin = np.zeros((bsz, l_max, 3), dtype=np.float64)
    rel = np.zeros((bsz, l_max, 3), dtype=np.float64)
    pad = np.ones((bsz, l_max), dtype=bool)
    mask_b: list[int] = []
    mask_l: list[int] = []
    for row, i in enumerate(indices):
        n = lengths[row]
        ids[row, :n] = dataset.ids[i]
        kin[row, :n] = dataset.kin[i]
        rel[row, :n] = dataset.rel[i]
        pad[row, :n] = False
        positions = sample_mask(dataset.ids[i], mask_spec, derive_stream(i, step))
        mask_b.extend([row] * len(positions))
        mask_l.extend(int(p) for p in positions)

    token_ids = torch.from_numpy(ids)
    kin_t = torch.from_numpy(kin).to(dtype)
    mask_batch = torch.tensor(mask_b, dtype=torch.long)
    mask_pos = torch.tensor(mask_l, dtype=torch.long)
    masked_ids, masked_kin = apply_mask(token_ids, kin_t, mask_batch, mask_pos)
    return Batch(
        token_ids=token_ids,
        masked_ids=masked_ids,
        kin=kin_t,
        masked_kin=masked_kin,
        rel_coords=torch.from_numpy(rel).to(dtype),
        key_pad=torch.from_numpy(pad),
        mask_batch=mask_batch,
        mask_pos=mask_pos,
        target_ids=token_ids[mask_batch, mask_pos],
        target_kin=kin_t[mask_batch, mask_pos],
    )


def batch_losses(
    model: DualStreamEncoder, batch: Batch, weights: LossWeights
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(joint, geometric, kinematic) losses for one co-masked batch.

    Masked positions are pooled across the batch before averaging."""
    g, k = model(batch.masked_ids, batch.masked_kin, batch.rel_coords, batch.key_pad)
    logits, preds = model.predict_masked(g, k, batch.mask_batch, batch.mask_pos)
    geom = masked_cell_nll(logits, batch.target_ids)
    kin = masked_kinematic_loss(preds, batch.target_kin, weights)
    return joint_loss(geom, kin, weights.lambda_kin), geom, kin


def masked_accuracy(model: DualStreamEncoder, batch: Batch) -> float:
    """Top-1 accuracy of masked cell-id prediction on one batch."""
    with torch.no_grad():
        g, k = model(batch.masked_ids, batch.masked_kin, batch.rel_coords, batch.key_pad)
        logits, _ = model.predict_masked(g, k, batch.mask_batch, batch.mask_pos)
        hits = (logits.argmax(dim=-1) == batch.target_ids).sum().item()
    return hits / max(1, len(batch.target_ids))


def gradients(
    model: DualStreamEncoder, batch: Batch, weights: LossWeights
) -> tuple[dict[str, float], dict[str, np.ndarray]]:
    """Analytic gradients of the joint loss for every trainable tensor."""
    model.zero_grad(set_to_none=True)
    total, geom, kin = batch_losses(model, batch, weights)
    if not torch.isfinite(total):
        raise TrainingDivergedError(f"non-finite loss {total.item()}")
    total.backward()
    grads = {
        name: p.grad.detach().clone().numpy()
        for name, p in model.named_parameters()
        if p.grad is not None
    }
    metrics = {"joint": total.item(), "geom": geom.item(), "kin": kin.item()}
    model.zero_grad(set_to_none=True)
    return metrics, grads


def finite_difference_check(
    model: DualStreamEncoder,
    batch: Batch,
    weights: LossWeights,
    n_coords: int = 20,
    eps: float = 1e-5,
    seed: int = 0,
) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients,
    per named parameter tensor, probing ``n_coords`` random coordinates each.

    Relative error uses |analytic - numeric| / max(1, |numeric|).
    """
    _, grads = gradients(model, batch, weights)
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
    report: dict[str, float] = {}

    def loss_value() -> float:
        with torch.no_grad():
            total, _, _ = batch_losses(model, batch, weights)
        return total.item()

    for name, param in model.named_parameters():
        flat = param.data.view(-1)
        n = flat.numel()
        picks = rng.choice(n, size=min(n_coords, n), replace=False)
        worst = 0.0
        for idx in picks:
            idx = int(idx)
            orig = flat[idx].item()
            flat[idx] = orig + eps
            up = loss_value()
            flat[idx] = orig - eps
            down = loss_value()
            flat[idx] = orig
            numeric = (up - down) / (2.0 * eps)
            analytic = float(grads[name].reshape(-1)[idx])
            worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
        report[name] = worst
    return report


def cosine_warmup_lr(step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at total_steps."""
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step < warmup:
        return base_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = (step - warmup) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def train(
    model: DualStreamEncoder,
    dataset: TokenDataset,
    mask_spec: MaskSpec,
    weights: LossWeights,
    train_cfg: TrainConfig,
    checkpoint_path: str | Path | None = None,
    trace_path: str | Path | None = None,
    eval_hook=None,  # callable(step, model) invoked after accuracy probes
) -> list[TraceRecord]:
    """Run the masked pretraining loop; returns the per-step loss trace.

    Math runs single-threaded: at toy sizes the thread-pool overhead
    dominates, and a fixed thread count keeps runs bit-reproducible.
    """
    order_rng = np.random.Generator(
        np.random.Philox(key=np.array([train_cfg.seed, 0x0B47C4], dtype=np.uint64))
    )
    opt = torch.optim.AdamW(
        model.parameters(), lr=train_cfg.lr, weight_decay=train_cfg.weight_decay
    )
    trace: list[TraceRecord] = []
    n_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    for step in range(train_cfg.steps):
        indices = order_rng.integers(0, len(dataset), size=min(train_cfg.batch_size, len(dataset)))
        batch = make_batch(dataset, indices, mask_spec, step=step)
        lr = cosine_warmup_lr(step, train_cfg.steps, train_cfg.lr, train_cfg.warmup_frac)
        for group in opt.param_groups:
            group["lr"] = lr

        opt.zero_grad(set_to_none=True)
        total, geom, kin = batch_losses(model, batch, weights)
        if not torch.isfinite(total):
            raise TrainingDivergedError(
                f"training diverged at step {step}: joint={total.item()}, "
                f"geom={geom.item()}, kin={kin.item()}"
            )
        total.backward()
        opt.step()

        record = TraceRecord(step=step, joint=total.item(), geom=geom.item(), kin=kin.item())
        probe = (step + 1) % train_cfg.accuracy_interval == 0 or step + 1 == train_cfg.steps
        if probe:
            record.accuracy = masked_accuracy(model, batch)
            if eval_hook is not None:
                eval_hook(step + 1, model)
        trace.append(record)
    torch.set_num_threads(n_threads)

    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, step=train_cfg.steps, seed=train_cfg.seed)
    if trace_path is not None:
        write_trace(trace, trace_path)
    return trace


def write_trace(trace: list[TraceRecord], path: str | Path) -> None:
    lines = ["step\tjoint\tgeom\tkin\taccuracy"]
    lines += [rec.to_line() for rec in trace]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_checkpoint(
    model: DualStreamEncoder, path: str | Path, step: int = 0, seed: int = 0
) -> None:
    state = model.state_dict()
    names = list(state.keys())
    header = {
        "config": model.cfg.to_dict(),
        "step": step,
        "seed": seed,
        "tensors": [[name, list(state[name].shape)] for name in names],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(header_bytes))
    blob += header_bytes
    for name in names:
        blob += state[name].to(torch.float64).numpy().astype("<f8").tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path) -> tuple[DualStreamEncoder, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 + 32 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    off = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<I", body, off)
    off += 4
    try:
        header = json.loads(body[off : off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header") from exc
    off += header_len

    cfg = EncoderConfig.from_dict(header["config"])
    model = DualStreamEncoder(cfg)
    state = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated tensor data for {name}")
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
        off += nbytes
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor data")
    model.load_state_dict(state)
    return model, header
