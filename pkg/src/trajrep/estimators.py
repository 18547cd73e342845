"""Scikit-learn style estimators wrapping the functional core.

``AdaptiveCellTokenizer`` (trajectories -> token sequences) and
``TrajectoryEmbedder`` (token sequences -> unit-norm embedding matrix)
follow the fit/transform contract, expose ``get_params``/``set_params``
via ``BaseEstimator``, and compose in a ``sklearn.pipeline.Pipeline``::

    pipe = Pipeline([
        ("tokens", AdaptiveCellTokenizer(capacity=64)),
        ("embed", TrajectoryEmbedder(steps=300)),
    ])
    emb = pipe.fit_transform(trajectories)
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .encoder import DualStreamEncoder, EncoderConfig, LossWeights
from .geo import Trajectory
from .grid import GridConfig
from .masking import MaskSpec
from .porto import PORTO_BBOX
from .retrieval import embed_sequences
from .tokenizer import TokenSequence, suggest_v_max, tokenize
from .training import TokenDataset, TrainConfig, train
from .vocab import FIRST_CELL_ID, build_vocabulary


def _check_trajectories(X) -> list[Trajectory]:
    if not isinstance(X, (list, tuple)) or not all(isinstance(t, Trajectory) for t in X):
        raise TypeError("X must be a list of Trajectory objects")
    if len(X) == 0:
        raise ValueError("X is empty")
    return list(X)


def _check_sequences(X) -> list[TokenSequence]:
    if not isinstance(X, (list, tuple)) or not all(isinstance(s, TokenSequence) for s in X):
        raise TypeError("X must be a list of TokenSequence objects")
    if len(X) == 0:
        raise ValueError("X is empty")
    return list(X)


class AdaptiveCellTokenizer(BaseEstimator, TransformerMixin):
    """Fits a density-adaptive cell vocabulary on training trajectories and
    transforms trajectories into token sequences.

    After ``fit`` the learned state lives in ``vocabulary_`` and ``v_max_``.
    """

    def __init__(
        self,
        backend: str = "QUAD",
        bbox: tuple[float, float, float, float] = PORTO_BBOX,
        r_min: int = 4,
        r_max: int = 7,
        capacity: int = 64,
        dedup: bool = False,
        max_seq_len: int = 192,
        v_max: float | None = None,
        v_max_percentile: float = 99.5,
    ):
        self.backend = backend
        self.bbox = bbox
        self.r_min = r_min
        self.r_max = r_max
        self.capacity = capacity
        self.dedup = dedup
        self.max_seq_len = max_seq_len
        self.v_max = v_max
        self.v_max_percentile = v_max_percentile

    def fit(self, X, y=None):
        trajs = _check_trajectories(X)
        cfg = GridConfig(
            backend=self.backend, bbox=tuple(self.bbox), r_min=self.r_min, r_max=self.r_max
        )
        points = (p for t in trajs for p in t.points)
        self.vocabulary_ = build_vocabulary(points, cfg, self.capacity)
        self.v_max_ = (
            self.v_max if self.v_max is not None else suggest_v_max(trajs, self.v_max_percentile)
        )
        return self

    def transform(self, X) -> list[TokenSequence]:
        if not hasattr(self, "vocabulary_"):
            raise NotFittedError("AdaptiveCellTokenizer is not fitted yet")
        trajs = _check_trajectories(X)
        return [
            tokenize(self.vocabulary_, t, dedup=self.dedup, max_len=self.max_seq_len)
            for t in trajs
        ]


class TrajectoryEmbedder(BaseEstimator, TransformerMixin):
    """Pretrains the dual-stream encoder with the co-masked objective and
    transforms token sequences into unit-norm embeddings.

    ``vocab_size``/``v_max`` may be left at None to be inferred from the
    fit data (pass the tokenizer's values explicitly for exactness).
    """

    def __init__(
        self,
        vocab_size: int | None = None,
        v_max: float | None = None,
        d_model: int = 32,
        n_heads: int = 2,
        n_layers_total: int = 4,
        n_fusion: int = 1,
        rope_split: tuple[int, int, int] = (6, 6, 4),
        rope_base: float = 10000.0,
        coord_scale: float = 1e4,
        max_seq_len: int = 192,
        mask_ratio: float = 0.3,
        mask_span: int = 6,
        mask_strategy: str = "RUN_AWARE",
        beta_speed: float = 1.0,
        beta_heading: float = 1.0,
        lambda_kin: float = 1.0,
        steps: int = 300,
        batch_size: int = 32,
        lr: float = 1e-3,
        weight_decay: float = 0.01,
        warmup_frac: float = 0.2,
        pooling: str = "SUM",
        seed: int = 0,
    ):
        self.vocab_size = vocab_size
        self.v_max = v_max
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers_total = n_layers_total
        self.n_fusion = n_fusion
        self.rope_split = rope_split
        self.rope_base = rope_base
        self.coord_scale = coord_scale
        self.max_seq_len = max_seq_len
        self.mask_ratio = mask_ratio
        self.mask_span = mask_span
        self.mask_strategy = mask_strategy
        self.beta_speed = beta_speed
        self.beta_heading = beta_heading
        self.lambda_kin = lambda_kin
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_frac = warmup_frac
        self.pooling = pooling
        self.seed = seed

    def fit(self, X, y=None):
        seqs = _check_sequences(X)
        self.v_max_ = (
            self.v_max
            if self.v_max is not None
            else max(1e-9, float(np.percentile([tok.v for s in seqs for tok in s.tokens], 99.5)))
        )
        self.vocab_size_ = (
            self.vocab_size
            if self.vocab_size is not None
            else max(FIRST_CELL_ID + 1, max(int(s.token_ids().max()) for s in seqs) + 1)
        )
        cfg = EncoderConfig(
            vocab_size=self.vocab_size_,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_layers_total=self.n_layers_total,
            n_fusion=self.n_fusion,
            rope_split=tuple(self.rope_split),
            rope_base=self.rope_base,
            coord_scale=self.coord_scale,
            max_seq_len=self.max_seq_len,
        )
        torch.manual_seed(self.seed)
        self.model_ = DualStreamEncoder(cfg)
        dataset = TokenDataset(seqs, self.v_max_)
        spec = MaskSpec(
            ratio=self.mask_ratio,
            avg_span=self.mask_span,
            strategy=self.mask_strategy,
            seed=self.seed,
        )
        weights = LossWeights(
            beta_speed=self.beta_speed,
            beta_heading=self.beta_heading,
            lambda_kin=self.lambda_kin,
        )
        train_cfg = TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            warmup_frac=self.warmup_frac,
            seed=self.seed,
        )
        self.trace_ = train(self.model_, dataset, spec, weights, train_cfg)
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("TrajectoryEmbedder is not fitted yet")
        seqs = _check_sequences(X)
        return embed_sequences(self.model_, seqs, self.v_max_, pooling=self.pooling)
