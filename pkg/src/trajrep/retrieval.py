"""Zero-shot similarity retrieval: embedding, DTW-grounded banks, and
ranking metrics.

A retrieval bank pairs a query set with a disjoint corpus and stores the
exact DTW distance matrix as ground truth. Embedding-based rankings (by
cosine of L2-normalized vectors) are scored with HR@k, R_m@k, MRR, NDCG@k
(binary relevance on the k DTW-nearest, log2 discount), and mean per-query
Spearman correlation between DTW distance and cosine distance.

Bank file format (version 1, line oriented)::

    version=1
    seed=<int>
    n_q=<int>
    n_c=<int>
    config=<opaque echo string, may be empty>
    query_ids=<tab-joined ids>
    corpus_ids=<tab-joined ids>
    <repr floats, tab-joined>          (one DTW row per query)
    checksum=sha256:<hex of everything above>
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.stats import spearmanr

from .dtw import dtw_matrix
from .encoder import DualStreamEncoder
from .geo import Trajectory
from .tokenizer import TokenSequence
from .training import TokenDataset, make_batch
from .masking import MaskSpec

GEO, KIN, SUM = "GEO", "KIN", "SUM"


class BankFormatError(ValueError):
    """Retrieval bank file malformed, mis-versioned, or corrupt."""


@dataclass
class RetrievalBank:
    query_ids: list[str]
    corpus_ids: list[str]
    dtw: np.ndarray  # (n_q, n_c) meters
    seed: int
    config_echo: str = ""

    def __post_init__(self):
        if set(self.query_ids) & set(self.corpus_ids):
            raise ValueError("queries and corpus share trajectory ids")
        if self.dtw.shape != (len(self.query_ids), len(self.corpus_ids)):
            raise ValueError("DTW matrix shape does not match id lists")


@dataclass
class MetricsReport:
    hr_at_1: float
    hr_at_10: float
    r5_at_20: float
    mrr: float
    ndcg: dict[int, float]  # k -> NDCG@k
    spearman: float
    n_q: int
    n_c: int
    seed: int

    def to_text(self) -> str:
        lines = [
            f"hr_at_1={self.hr_at_1!r}",
            f"hr_at_10={self.hr_at_10!r}",
            f"r5_at_20={self.r5_at_20!r}",
            f"mrr={self.mrr!r}",
        ]
        lines += [f"ndcg_at_{k}={self.ndcg[k]!r}" for k in sorted(self.ndcg)]
        lines += [
            f"spearman={self.spearman!r}",
            f"n_q={self.n_q}",
            f"n_c={self.n_c}",
            f"seed={self.seed}",
        ]
        return "\n".join(lines) + "\n"


def embed_sequences(
    model: DualStreamEncoder,
    seqs: list[TokenSequence],
    v_max: float,
    pooling: str = SUM,
    batch_size: int = 64,
) -> np.ndarray:
    """Unit-norm trajectory embeddings, shape (n, d_model).

    Mean-pools the frozen encoder's final states over non-padding
    positions; the pooled stream is GEO, KIN, or their elementwise SUM.
    """
    if pooling not in (GEO, KIN, SUM):
        raise ValueError(f"unknown pooling stream {pooling!r}")
    dataset = TokenDataset(seqs, v_max)
    # Ratio is irrelevant here: mask sampling is bypassed by masking nothing.
    out = np.empty((len(seqs), model.cfg.d_model), dtype=np.float64)
    model.eval()
    with torch.no_grad():
        for lo in range(0, len(seqs), batch_size):
            idx = range(lo, min(lo + batch_size, len(seqs)))
            batch = _unmasked_batch(dataset, idx)
            g, k = model(batch["ids"], batch["kin"], batch["rel"], batch["pad"])
            pooled = {GEO: g, KIN: k, SUM: g + k}[pooling]
            valid = (~batch["pad"]).to(pooled.dtype).unsqueeze(-1)
            mean = (pooled * valid).sum(dim=1) / valid.sum(dim=1)
            out[lo : lo + len(mean)] = mean.numpy()
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.maximum(norms, 1e-300)


def _unmasked_batch(dataset: TokenDataset, indices) -> dict:
    # make_batch always samples masks; reuse its padding logic with a
    # sacrificial spec, then feed the *unmasked* tensors to the model.
    batch = make_batch(dataset, indices, MaskSpec(ratio=0.5, avg_span=2, seed=0), step=0)
    return {
        "ids": batch.token_ids,
        "kin": batch.kin,
        "rel": batch.rel_coords,
        "pad": batch.key_pad,
    }


def build_bank(
    trajectories: list[Trajectory], n_q: int, n_c: int, seed: int, config_echo: str = ""
) -> RetrievalBank:
    """Sample disjoint query/corpus sets and compute exact DTW ground truth."""
    if len(trajectories) < n_q + n_c:
        raise ValueError(
            f"need at least {n_q + n_c} trajectories, have {len(trajectories)}"
        )
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0xBA17], dtype=np.uint64)))
    order = rng.permutation(len(trajectories))
    queries = [trajectories[i] for i in order[:n_q]]
    corpus = [trajectories[i] for i in order[n_q : n_q + n_c]]
    return RetrievalBank(
        query_ids=[t.id for t in queries],
        corpus_ids=[t.id for t in corpus],
        dtw=dtw_matrix(queries, corpus),
        seed=seed,
        config_echo=config_echo,
    )


def save_bank(bank: RetrievalBank, path: str | Path) -> None:
    lines = [
        "version=1",
        f"seed={bank.seed}",
        f"n_q={len(bank.query_ids)}",
        f"n_c={len(bank.corpus_ids)}",
        f"config={bank.config_echo}",
        "query_ids=" + "\t".join(bank.query_ids),
        "corpus_ids=" + "\t".join(bank.corpus_ids),
    ]
    for row in bank.dtw:
        lines.append("\t".join(repr(float(x)) for x in row))
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    Path(path).write_text(body + f"checksum=sha256:{digest}\n", encoding="utf-8")


def load_bank(path: str | Path) -> RetrievalBank:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 8 or lines[0] != "version=1":
        raise BankFormatError(f"{path}: not a version-1 bank file")
    if not lines[-1].startswith("checksum=sha256:"):
        raise BankFormatError(f"{path}: missing checksum line")
    body = "\n".join(lines[:-1]) + "\n"
    if lines[-1] != "checksum=sha256:" + hashlib.sha256(body.encode("utf-8")).hexdigest():
        raise BankFormatError(f"{path}: checksum mismatch")
    seed = int(lines[1].split("=", 1)[1])
    n_q = int(lines[2].split("=", 1)[1])
    n_c = int(lines[3].split("=", 1)[1])
    config_echo = lines[4].split("=", 1)[1]
    query_ids = lines[5].split("=", 1)[1].split("\t")
    corpus_ids = lines[6].split("=", 1)[1].split("\t")
    rows = lines[7 : 7 + n_q]
    if len(rows) != n_q or len(query_ids) != n_q or len(corpus_ids) != n_c:
        raise BankFormatError(f"{path}: row/id counts disagree with header")
    mat = np.array([[float(x) for x in row.split("\t")] for row in rows], dtype=np.float64)
    if mat.shape != (n_q, n_c):
        raise BankFormatError(f"{path}: DTW matrix shape {mat.shape} != ({n_q}, {n_c})")
    return RetrievalBank(query_ids, corpus_ids, mat, seed, config_echo)


def _ranked_corpus(sims: np.ndarray, corpus_ids: list[str]) -> np.ndarray:
    """Corpus indices by descending similarity, ties broken by corpus id."""
    return np.lexsort((np.asarray(corpus_ids), -sims))


def _dtw_nearest(row: np.ndarray, corpus_ids: list[str], m: int) -> np.ndarray:
    """Indices of the m DTW-nearest corpus items, ties broken by corpus id."""
    return np.lexsort((np.asarray(corpus_ids), row))[:m]


def evaluate(
    bank: RetrievalBank,
    query_emb: np.ndarray,
    corpus_emb: np.ndarray,
    ndcg_ks: tuple[int, ...] = (5, 10, 50),
) -> MetricsReport:
    """Score an embedding ranking against the bank's DTW ground truth."""
    n_q, n_c = bank.dtw.shape
    if query_emb.shape[0] != n_q or corpus_emb.shape[0] != n_c:
        raise ValueError("embedding counts do not match the bank")
    if query_emb.shape[1] != corpus_emb.shape[1]:
        raise ValueError("query/corpus embedding dimensions differ")
    ndcg_ks = tuple(k for k in ndcg_ks if k <= n_c)

    sims = query_emb @ corpus_emb.T  # cosine: rows are unit vectors
    hr1 = hr10 = r5 = mrr = rho_sum = 0.0
    ndcg_sums = {k: 0.0 for k in ndcg_ks}
    discounts = 1.0 / np.log2(np.arange(2, n_c + 2))
    for i in range(n_q):
        order = _ranked_corpus(sims[i], bank.corpus_ids)
        nearest = _dtw_nearest(bank.dtw[i], bank.corpus_ids, 1)[0]
        rank = int(np.flatnonzero(order == nearest)[0]) + 1  # 1-based
        hr1 += rank <= 1
        hr10 += rank <= 10
        mrr += 1.0 / rank
        top5 = set(_dtw_nearest(bank.dtw[i], bank.corpus_ids, 5).tolist())
        r5 += len(top5 & set(order[:20].tolist())) / min(5, n_c)
        for k in ndcg_ks:
            relevant = set(_dtw_nearest(bank.dtw[i], bank.corpus_ids, k).tolist())
            gains = np.fromiter((1.0 if j in relevant else 0.0 for j in order[:k]), float, k)
            # same accumulation for DCG and IDCG so a perfect ranking is exactly 1
            ideal = float(np.ones(k) @ discounts[:k])
            ndcg_sums[k] += float(gains @ discounts[:k]) / ideal
        rho = spearmanr(bank.dtw[i], 1.0 - sims[i]).statistic
        rho_sum += 0.0 if np.isnan(rho) else float(rho)

    return MetricsReport(
        hr_at_1=hr1 / n_q,
        hr_at_10=hr10 / n_q,
        r5_at_20=r5 / n_q,
        mrr=mrr / n_q,
        ndcg={k: ndcg_sums[k] / n_q for k in ndcg_ks},
        spearman=rho_sum / n_q,
        n_q=n_q,
        n_c=n_c,
        seed=bank.seed,
    )
