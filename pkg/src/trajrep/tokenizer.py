"""Trajectory-to-token conversion.

Each GPS point becomes a token carrying the id of the highest-resolution
vocabulary cell containing it plus per-segment kinematics (speed between
consecutive tokens, initial bearing of the segment). Optional dedup
collapses runs of consecutive equal cells, keeping the first point of each
run; sequences longer than ``max_len`` keep their prefix.

Token store format (version 1, line oriented)::

    version=1
    config=<opaque echo string, may be empty>
    count=<records>
    <traj_id>\\t<L>\\t<tok>;<tok>;...    (one record per trajectory)

with ``tok = token_id,res,index,lat,lon,t,v,heading,degenerate`` where
res/index are -1 for UNK tokens, floats are ``repr``-formatted (bit-exact
round trip) and degenerate is 0/1.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geo import GpsPoint, Trajectory, bearing_deg, speed_mps
from .grid import CellKey
from .vocab import UNK_ID, Vocabulary


@dataclass(slots=True)
class Token:
    """One trajectory position: vocabulary cell id plus raw coordinates and motion."""

    token_id: int
    cell: CellKey | None  # None for UNK
    lat: float
    lon: float
    t: int
    v: float  # m/s over the segment ending at this token (0 for the first)
    heading: float  # degrees in [0, 360), forward-filled where degenerate
    heading_degenerate: bool  # True when this token's own segment had no bearing


@dataclass(slots=True)
class TokenSequence:
    traj_id: str
    tokens: list[Token]

    def __len__(self) -> int:
        return len(self.tokens)

    def token_ids(self) -> np.ndarray:
        return np.array([tok.token_id for tok in self.tokens], dtype=np.int64)

    def coords(self) -> np.ndarray:
        """Per-token (lat, lon, t) as float64, shape (L, 3)."""
        return np.array(
            [(tok.lat, tok.lon, float(tok.t)) for tok in self.tokens], dtype=np.float64
        )


def map_point(vocab: Vocabulary, p: GpsPoint) -> int:
    """Highest-resolution vocabulary hit for a point; UNK when uncovered."""
    return vocab.lookup(p)


def tokenize(
    vocab: Vocabulary,
    traj: Trajectory,
    *,
    dedup: bool = False,
    max_len: int = 192,
) -> TokenSequence:
    """Convert a trajectory into its token sequence.

    Kinematics are computed between consecutive *tokens* (after dedup and
    truncation): the first token gets v=0 and a heading forward-filled
    from the first non-degenerate segment.
    """
    if len(traj.points) == 0:
        raise ValueError(f"trajectory {traj.id!r} is empty")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")

    ids = [vocab.lookup(p) for p in traj.points]
    kept: list[tuple[int, GpsPoint]] = []
    for tid, p in zip(ids, traj.points):
        if dedup and kept and kept[-1][0] == tid:
            continue  # run continues; the run keeps its first point
        kept.append((tid, p))
    kept = kept[:max_len]

    tokens = [
        Token(
            token_id=tid,
            cell=None if tid == UNK_ID else vocab.cell_of_token(tid),
            lat=p.lat,
            lon=p.lon,
            t=p.t,
            v=0.0,
            heading=0.0,
            heading_degenerate=True,
        )
        for tid, p in kept
    ]
    _attach_kinematics(tokens, [p for _, p in kept])
    return TokenSequence(traj_id=traj.id, tokens=tokens)


def _attach_kinematics(tokens: list[Token], points: list[GpsPoint]) -> None:
    for j in range(1, len(tokens)):
        tokens[j].v = speed_mps(points[j - 1], points[j])
        deg, degenerate = bearing_deg(points[j - 1], points[j])
        tokens[j].heading = deg
        tokens[j].heading_degenerate = degenerate

    # Forward-fill degenerate headings; leading tokens take the first valid
    # heading. All-degenerate sequences keep heading 0 (sin=0, cos=1).
    last: float | None = None
    first_valid: float | None = next(
        (tok.heading for tok in tokens if not tok.heading_degenerate), None
    )
    for tok in tokens:
        if not tok.heading_degenerate:
            last = tok.heading
        else:
            fill = last if last is not None else first_valid
            tok.heading = fill if fill is not None else 0.0


def kinematic_features(seq: TokenSequence, v_max: float) -> np.ndarray:
    """Per-token (v_norm, sin heading, cos heading), shape (L, 3) float64.

    v_norm is clamped to [0, 1]; heading enters through sine and cosine to
    respect its circular structure.
    """
    if v_max <= 0:
        raise ValueError(f"v_max must be > 0, got {v_max}")
    out = np.empty((len(seq.tokens), 3), dtype=np.float64)
    for j, tok in enumerate(seq.tokens):
        theta = np.radians(tok.heading)
        out[j, 0] = min(tok.v / v_max, 1.0)
        out[j, 1] = np.sin(theta)
        out[j, 2] = np.cos(theta)
    return out


def segment_speeds(traj: Trajectory) -> list[float]:
    """Raw consecutive-point speeds of a trajectory (m/s)."""
    return [
        speed_mps(a, b) for a, b in zip(traj.points, traj.points[1:])
    ]


def suggest_v_max(trajectories, percentile: float = 99.5) -> float:
    """Dataset-level speed normalizer: a high percentile of training
    segment speeds, robust to GPS spikes."""
    speeds: list[float] = []
    for traj in trajectories:
        speeds.extend(segment_speeds(traj))
    if not speeds:
        return 1.0
    v = float(np.percentile(np.asarray(speeds, dtype=np.float64), percentile))
    return v if v > 0 else 1.0


def write_token_sequences(
    seqs: list[TokenSequence], path: str | Path, config_echo: str = ""
) -> None:
    lines = [f"version=1", f"config={config_echo}", f"count={len(seqs)}"]
    for seq in seqs:
        if any(c in seq.traj_id for c in "\t\n;"):
            raise ValueError(f"trajectory id {seq.traj_id!r} contains reserved characters")
        toks = ";".join(
            f"{tok.token_id},{tok.cell.resolution if tok.cell else -1},"
            f"{tok.cell.index if tok.cell else -1},{tok.lat!r},{tok.lon!r},"
            f"{tok.t},{tok.v!r},{tok.heading!r},{1 if tok.heading_degenerate else 0}"
            for tok in seq.tokens
        )
        lines.append(f"{seq.traj_id}\t{len(seq.tokens)}\t{toks}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_token_sequences(path: str | Path, backend: str = "QUAD") -> list[TokenSequence]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 3 or lines[0] != "version=1":
        raise ValueError(f"{path}: not a version-1 token store")
    count = int(lines[2].split("=", 1)[1])
    seqs: list[TokenSequence] = []
    for line in lines[3 : 3 + count]:
        traj_id, n, blob = line.split("\t")
        tokens = []
        for part in blob.split(";"):
            f = part.split(",")
            tid, res, idx = int(f[0]), int(f[1]), int(f[2])
            tokens.append(
                Token(
                    token_id=tid,
                    cell=None if res < 0 else CellKey(backend, idx, res),
                    lat=float(f[3]),
                    lon=float(f[4]),
                    t=int(f[5]),
                    v=float(f[6]),
                    heading=float(f[7]),
                    heading_degenerate=f[8] == "1",
                )
            )
        if len(tokens) != int(n):
            raise ValueError(f"{path}: record {traj_id} declares {n} tokens, found {len(tokens)}")
        seqs.append(TokenSequence(traj_id=traj_id, tokens=tokens))
    if len(seqs) != count:
        raise ValueError(f"{path}: header declares {count} records, found {len(seqs)}")
    return seqs
