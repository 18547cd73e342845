"""End-to-end experiment pipeline with content-addressed stages.

Each stage hashes (stage name, the config subset it depends on, digests of
its input files); the digest and the full config echo are stored in a
manifest next to the stage outputs. Re-running with an unchanged digest
skips the stage, so edits rebuild only the affected suffix of the
pipeline (for example, changing the seed leaves ingest/split/vocab/
tokenize artifacts untouched).

All artifacts are deterministic functions of the config: no timestamps,
no environment-dependent content. Two runs with the same config produce
byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from . import porto
from .encoder import DualStreamEncoder, EncoderConfig, LossWeights
from .grid import GridConfig
from .masking import (
    MaskSpec,
    derive_stream,
    runs,
    sample_mask_with_diagnostics,
)
from .retrieval import (
    build_bank,
    embed_sequences,
    evaluate,
    load_bank,
    save_bank,
)
from .tokenizer import (
    TokenSequence,
    read_token_sequences,
    suggest_v_max,
    tokenize,
    write_token_sequences,
)
from .training import (
    TokenDataset,
    TrainConfig,
    batch_losses,
    load_checkpoint,
    make_batch,
    train,
)
from .vocab import build_vocabulary, load_vocabulary, save_vocabulary

STAGES = ("ingest", "split", "vocab", "tokenize", "mask_stats", "pretrain", "bank", "evaluate")


@dataclass(frozen=True)
class RunConfig:
    """Everything a reproducible run needs; mirrors the CLI flags and the
    YAML config file schema (see README)."""

    csv_path: str = ""
    out_dir: str = "runs/default"
    # data
    bbox: tuple[float, float, float, float] = porto.PORTO_BBOX
    interval_s: int = porto.PORTO_INTERVAL_S
    # grid / vocabulary
    backend: str = "QUAD"
    r_min: int = 4
    r_max: int = 7
    capacity: int = 64
    # tokenizer
    dedup: bool = False
    max_seq_len: int = 192
    v_max: float | None = None  # None -> percentile of training segment speeds
    v_max_percentile: float = 99.5
    # masking
    mask_ratio: float = 0.3
    mask_span: int = 6
    mask_strategy: str = "RUN_AWARE"
    # encoder
    d_model: int = 32
    n_heads: int = 2
    n_layers_total: int = 4
    n_fusion: int = 1
    rope_split: tuple[int, int, int] = (6, 6, 4)
    rope_base: float = 10000.0
    coord_scale: float = 1e4
    d_ff: int = 0
    kin_hidden: int = 0
    # training
    steps: int = 500
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_frac: float = 0.2
    accuracy_interval: int = 50
    # loss
    beta_speed: float = 1.0
    beta_heading: float = 1.0
    lambda_kin: float = 1.0
    # retrieval evaluation
    n_queries: int = 20
    n_corpus: int = 100
    pooling: str = "SUM"
    ndcg_ks: tuple[int, ...] = (5, 10, 50)
    # loss-vs-transfer trace
    trace_interval: int = 100
    trace_queries: int = 10
    trace_corpus: int = 50
    # global
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bbox"] = list(self.bbox)
        d["rope_split"] = list(self.rope_split)
        d["ndcg_ks"] = list(self.ndcg_ks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        for key in ("bbox", "rope_split", "ndcg_ks"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config file must be a mapping")
        return cls.from_dict(data)

    def echo(self) -> str:
        """Canonical one-line config echo embedded into artifacts."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def grid_config(self) -> GridConfig:
        return GridConfig(backend=self.backend, bbox=self.bbox, r_min=self.r_min, r_max=self.r_max)

    def mask_spec(self) -> MaskSpec:
        return MaskSpec(
            ratio=self.mask_ratio,
            avg_span=self.mask_span,
            strategy=self.mask_strategy,
            seed=self.seed,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            beta_speed=self.beta_speed,
            beta_heading=self.beta_heading,
            lambda_kin=self.lambda_kin,
        )

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_layers_total=self.n_layers_total,
            n_fusion=self.n_fusion,
            rope_split=self.rope_split,
            rope_base=self.rope_base,
            coord_scale=self.coord_scale,
            max_seq_len=self.max_seq_len,
            d_ff=self.d_ff,
            kin_hidden=self.kin_hidden,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            warmup_frac=self.warmup_frac,
            seed=self.seed,
            accuracy_interval=self.accuracy_interval,
        )


class PipelineError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _subset(cfg: RunConfig, keys: tuple[str, ...]) -> dict:
    d = cfg.to_dict()
    return {k: d[k] for k in keys}


_STAGE_CONFIG_KEYS: dict[str, tuple[str, ...]] = {
    "ingest": ("csv_path", "bbox", "interval_s"),
    "split": (),
    "vocab": ("backend", "bbox", "r_min", "r_max", "capacity"),
    "tokenize": ("dedup", "max_seq_len", "v_max", "v_max_percentile"),
    "mask_stats": ("mask_ratio", "mask_span", "mask_strategy", "seed"),
    "pretrain": (
        "mask_ratio", "mask_span", "mask_strategy",
        "d_model", "n_heads", "n_layers_total", "n_fusion", "rope_split",
        "rope_base", "coord_scale", "d_ff", "kin_hidden", "max_seq_len",
        "steps", "batch_size", "lr", "weight_decay", "warmup_frac",
        "accuracy_interval", "beta_speed", "beta_heading", "lambda_kin", "seed",
    ),
    "bank": ("n_queries", "n_corpus", "seed"),
    "evaluate": ("pooling", "ndcg_ks", "dedup", "max_seq_len"),
}

_STAGE_INPUTS: dict[str, tuple[str, ...]] = {
    "ingest": (),
    "split": ("trajectories.txt",),
    "vocab": ("traj_train.txt",),
    "tokenize": ("traj_train.txt", "traj_val.txt", "traj_test.txt", "vocab.txt"),
    "mask_stats": ("tokens_train.txt",),
    "pretrain": ("tokens_train.txt", "vmax.txt"),
    "bank": ("traj_test.txt",),
    "evaluate": ("bank.txt", "checkpoint.bin", "vocab.txt", "traj_test.txt", "vmax.txt"),
}

_STAGE_OUTPUTS: dict[str, tuple[str, ...]] = {
    "ingest": ("trajectories.txt", "ingest_stats.txt"),
    "split": ("traj_train.txt", "traj_val.txt", "traj_test.txt", "split_stats.txt"),
    "vocab": ("vocab.txt",),
    "tokenize": ("tokens_train.txt", "tokens_val.txt", "tokens_test.txt", "vmax.txt"),
    "mask_stats": ("mask_stats.txt",),
    "pretrain": ("checkpoint.bin", "loss_trace.txt"),
    "bank": ("bank.txt",),
    "evaluate": ("metrics.txt", "metrics.json"),
}


def _stage_digest(cfg: RunConfig, stage: str, out: Path) -> str:
    payload = {
        "stage": stage,
        "config": _subset(cfg, _STAGE_CONFIG_KEYS[stage]),
        "inputs": {},
    }
    for name in _STAGE_INPUTS[stage]:
        payload["inputs"][name] = _file_digest(out / name)
    if stage == "ingest" and cfg.csv_path:
        payload["inputs"]["<csv>"] = _file_digest(Path(cfg.csv_path))
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def run_pipeline(
    cfg: RunConfig, until: str = "evaluate", force: bool = False, log=None
) -> dict[str, str]:
    """Run stages in order through ``until``; returns stage -> status
    ("built" or "up-to-date"). Idempotent: unchanged configs skip stages."""
    if until not in STAGES:
        raise ValueError(f"unknown stage {until!r}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    status: dict[str, str] = {}
    impl = {
        "ingest": _stage_ingest,
        "split": _stage_split,
        "vocab": _stage_vocab,
        "tokenize": _stage_tokenize,
        "mask_stats": _stage_mask_stats,
        "pretrain": _stage_pretrain,
        "bank": _stage_bank,
        "evaluate": _stage_evaluate,
    }
    for stage in STAGES:
        try:
            digest = _stage_digest(cfg, stage, out)
        except OSError as exc:
            raise PipelineError(f"stage {stage!r} failed: missing input: {exc}") from exc
        manifest_path = out / f"{stage}.stage.json"
        outputs = [out / name for name in _STAGE_OUTPUTS[stage]]
        fresh = (
            not force
            and manifest_path.exists()
            and json.loads(manifest_path.read_text())["digest"] == digest
            and all(p.exists() for p in outputs)
        )
        if fresh:
            status[stage] = "up-to-date"
        else:
            try:
                impl[stage](cfg, out)
            except Exception as exc:
                raise PipelineError(f"stage {stage!r} failed: {exc}") from exc
            manifest = {
                "digest": digest,
                "config": json.loads(cfg.echo()),
                "outputs": _STAGE_OUTPUTS[stage],
            }
            manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
            status[stage] = "built"
        if log is not None:
            log(f"[{stage}] {status[stage]}")
        if stage == until:
            break
    return status


def _stage_ingest(cfg: RunConfig, out: Path) -> None:
    if not cfg.csv_path:
        raise ValueError("config has no csv_path")
    trajs, stats = porto.ingest(cfg.csv_path, bbox=cfg.bbox, interval_s=cfg.interval_s)
    porto.write_trajectories(trajs, out / "trajectories.txt")
    lines = [
        f"config={cfg.echo()}",
        f"rows={stats.rows}",
        f"parsed={stats.parsed}",
        f"skipped_missing={stats.skipped_missing}",
        f"skipped_empty={stats.skipped_empty}",
        f"skipped_filtered={stats.skipped_filtered}",
        f"malformed={stats.malformed}",
        f"dropped_points={stats.dropped_points}",
    ]
    lines += [f"diag={d}" for d in stats.diagnostics]
    (out / "ingest_stats.txt").write_text("\n".join(lines) + "\n")


def _stage_split(cfg: RunConfig, out: Path) -> None:
    trajs = porto.read_trajectories(out / "trajectories.txt")
    buckets = porto.split_trajectories(trajs)
    porto.write_trajectories(buckets[porto.TRAIN], out / "traj_train.txt")
    porto.write_trajectories(buckets[porto.VAL], out / "traj_val.txt")
    porto.write_trajectories(buckets[porto.TEST], out / "traj_test.txt")
    total = max(1, len(trajs))
    lines = [f"config={cfg.echo()}"]
    for name in (porto.TRAIN, porto.VAL, porto.TEST):
        lines.append(f"{name.lower()}={len(buckets[name])}")
        lines.append(f"{name.lower()}_frac={len(buckets[name]) / total!r}")
    (out / "split_stats.txt").write_text("\n".join(lines) + "\n")


def _stage_vocab(cfg: RunConfig, out: Path) -> None:
    trajs = porto.read_trajectories(out / "traj_train.txt")
    points = (p for traj in trajs for p in traj.points)
    vocabulary = build_vocabulary(points, cfg.grid_config(), cfg.capacity)
    save_vocabulary(vocabulary, out / "vocab.txt")


def _stage_tokenize(cfg: RunConfig, out: Path) -> None:
    vocabulary = load_vocabulary(out / "vocab.txt")
    train_trajs = porto.read_trajectories(out / "traj_train.txt")
    v_max = cfg.v_max if cfg.v_max is not None else suggest_v_max(
        train_trajs, cfg.v_max_percentile
    )
    (out / "vmax.txt").write_text(f"v_max={v_max!r}\nconfig={cfg.echo()}\n")
    for split_name, trajs in (
        ("train", train_trajs),
        ("val", porto.read_trajectories(out / "traj_val.txt")),
        ("test", porto.read_trajectories(out / "traj_test.txt")),
    ):
        seqs = [
            tokenize(vocabulary, t, dedup=cfg.dedup, max_len=cfg.max_seq_len)
            for t in trajs
        ]
        write_token_sequences(seqs, out / f"tokens_{split_name}.txt", config_echo=cfg.echo())


def read_v_max(out_dir: str | Path) -> float:
    first = Path(out_dir, "vmax.txt").read_text().splitlines()[0]
    return float(first.split("=", 1)[1])


def _stage_mask_stats(cfg: RunConfig, out: Path) -> None:
    seqs = read_token_sequences(out / "tokens_train.txt", backend=cfg.backend)
    spec = cfg.mask_spec()
    n_satisfied = 0
    violations = 0
    total_spans = 0
    run_hist: dict[int, int] = {}
    for i, seq in enumerate(seqs):
        ids = seq.token_ids()
        run_list = runs(ids)
        for start, end, _ in run_list:
            length = end - start + 1
            run_hist[length] = run_hist.get(length, 0) + 1
        positions, diag = sample_mask_with_diagnostics(ids, spec, derive_stream(i))
        budget = int(spec.ratio * len(ids))
        n_satisfied += len(positions) == budget
        total_spans += len(diag.accepted_spans)
        run_of = np.empty(len(ids), dtype=int)
        starts = np.empty(len(ids), dtype=int)
        ends = np.empty(len(ids), dtype=int)
        for k, (s, e, _) in enumerate(run_list):
            run_of[s : e + 1] = k
            starts[s : e + 1] = s
            ends[s : e + 1] = e
        for s, e in diag.accepted_spans:
            if run_of[s] == run_of[e] and s > starts[s] and e < ends[e]:
                violations += 1
    lines = [
        f"config={cfg.echo()}",
        f"sequences={len(seqs)}",
        f"budget_satisfaction_rate={n_satisfied / max(1, len(seqs))!r}",
        f"interior_span_violations={violations}",
        f"accepted_spans={total_spans}",
    ]
    lines += [f"run_length_{k}={run_hist[k]}" for k in sorted(run_hist)]
    (out / "mask_stats.txt").write_text("\n".join(lines) + "\n")


def _stage_pretrain(cfg: RunConfig, out: Path) -> None:
    seqs = read_token_sequences(out / "tokens_train.txt", backend=cfg.backend)
    v_max = read_v_max(out)
    vocabulary = load_vocabulary(out / "vocab.txt")
    dataset = TokenDataset(seqs, v_max)
    torch.manual_seed(cfg.seed)
    model = DualStreamEncoder(cfg.encoder_config(vocabulary.num_tokens))
    train(
        model,
        dataset,
        cfg.mask_spec(),
        cfg.loss_weights(),
        cfg.train_config(),
        checkpoint_path=out / "checkpoint.bin",
        trace_path=out / "loss_trace.txt",
    )


def _stage_bank(cfg: RunConfig, out: Path) -> None:
    trajs = porto.read_trajectories(out / "traj_test.txt")
    bank = build_bank(trajs, cfg.n_queries, cfg.n_corpus, cfg.seed, config_echo=cfg.echo())
    save_bank(bank, out / "bank.txt")


def _stage_evaluate(cfg: RunConfig, out: Path) -> None:
    bank = load_bank(out / "bank.txt")
    model, _ = load_checkpoint(out / "checkpoint.bin")
    vocabulary = load_vocabulary(out / "vocab.txt")
    v_max = read_v_max(out)
    by_id = {t.id: t for t in porto.read_trajectories(out / "traj_test.txt")}

    def seqs_for(ids: list[str]) -> list[TokenSequence]:
        return [
            tokenize(vocabulary, by_id[i], dedup=cfg.dedup, max_len=cfg.max_seq_len)
            for i in ids
        ]

    q_emb = embed_sequences(model, seqs_for(bank.query_ids), v_max, pooling=cfg.pooling)
    c_emb = embed_sequences(model, seqs_for(bank.corpus_ids), v_max, pooling=cfg.pooling)
    report = evaluate(bank, q_emb, c_emb, ndcg_ks=cfg.ndcg_ks)
    (out / "metrics.txt").write_text(f"config={cfg.echo()}\n" + report.to_text())
    record = {
        "hr_at_1": report.hr_at_1,
        "hr_at_10": report.hr_at_10,
        "r5_at_20": report.r5_at_20,
        "mrr": report.mrr,
        "ndcg": {str(k): v for k, v in report.ndcg.items()},
        "spearman": report.spearman,
        "n_q": report.n_q,
        "n_c": report.n_c,
        "seed": report.seed,
        "config": json.loads(cfg.echo()),
    }
    (out / "metrics.json").write_text(json.dumps(record, sort_keys=True, indent=1) + "\n")


def loss_transfer_trace(cfg: RunConfig, out_path: str | Path | None = None) -> list[tuple[int, float, float]]:
    """Joint trace of held-out masked loss and zero-shot HR@10 at every
    ``trace_interval`` pretraining steps. Returns [(step, val_loss, hr10)].
    """
    out = Path(cfg.out_dir)
    run_pipeline(cfg, until="tokenize")
    v_max = read_v_max(out)
    vocabulary = load_vocabulary(out / "vocab.txt")
    train_seqs = read_token_sequences(out / "tokens_train.txt", backend=cfg.backend)
    val_seqs = read_token_sequences(out / "tokens_val.txt", backend=cfg.backend)
    if not val_seqs:
        raise PipelineError("stage 'trace' failed: validation split is empty")
    dataset = TokenDataset(train_seqs, v_max)
    val_dataset = TokenDataset(val_seqs, v_max)
    val_indices = range(min(len(val_dataset), 4 * cfg.batch_size))
    val_batch = make_batch(val_dataset, val_indices, cfg.mask_spec(), step=0)

    val_trajs = porto.read_trajectories(out / "traj_val.txt")
    bank = build_bank(
        val_trajs, cfg.trace_queries, cfg.trace_corpus, cfg.seed, config_echo=cfg.echo()
    )
    by_id = {t.id: t for t in val_trajs}
    q_seqs = [
        tokenize(vocabulary, by_id[i], dedup=cfg.dedup, max_len=cfg.max_seq_len)
        for i in bank.query_ids
    ]
    c_seqs = [
        tokenize(vocabulary, by_id[i], dedup=cfg.dedup, max_len=cfg.max_seq_len)
        for i in bank.corpus_ids
    ]

    rows: list[tuple[int, float, float]] = []
    weights = cfg.loss_weights()

    def hook(step: int, model: DualStreamEncoder) -> None:
        if step % cfg.trace_interval != 0:
            return
        with torch.no_grad():
            val_loss, _, _ = batch_losses(model, val_batch, weights)
        q_emb = embed_sequences(model, q_seqs, v_max, pooling=cfg.pooling)
        c_emb = embed_sequences(model, c_seqs, v_max, pooling=cfg.pooling)
        report = evaluate(bank, q_emb, c_emb, ndcg_ks=())
        rows.append((step, float(val_loss.item()), report.hr_at_10))
        model.train()

    torch.manual_seed(cfg.seed)
    model = DualStreamEncoder(cfg.encoder_config(vocabulary.num_tokens))
    train_cfg = replace(cfg.train_config(), accuracy_interval=cfg.trace_interval)
    train(model, dataset, cfg.mask_spec(), weights, train_cfg, eval_hook=hook)

    if out_path is not None:
        lines = [f"config={cfg.echo()}", "step\tval_loss\thr_at_10"]
        lines += [f"{s}\t{v!r}\t{h!r}" for s, v, h in rows]
        Path(out_path).write_text("\n".join(lines) + "\n")
    return rows
