"""trajrep: density-adaptive spatial tokenization and masked pretraining
for GPS trajectory embeddings, with a DTW-grounded retrieval evaluation."""

from .geo import EARTH_RADIUS_M, GpsPoint, Trajectory, bearing_deg, haversine_m, speed_mps
from .grid import HEX, QUAD, CellKey, GridConfig, cell_of, children, is_ancestor, parent
from .vocab import (
    FIRST_CELL_ID,
    MASK_ID,
    PAD_ID,
    UNK_ID,
    Vocabulary,
    build_vocabulary,
    count_base,
    load_vocabulary,
    save_vocabulary,
)
from .tokenizer import Token, TokenSequence, kinematic_features, map_point, tokenize
from .masking import (
    NAIVE,
    RUN_AWARE,
    MaskSpec,
    runs,
    sample_mask,
    sample_mask_naive,
    sample_mask_run_aware,
)
from .encoder import DualStreamEncoder, EncoderConfig, LossWeights
from .training import TokenDataset, TrainConfig, load_checkpoint, save_checkpoint, train
from .dtw import dtw, dtw_matrix
from .retrieval import MetricsReport, RetrievalBank, build_bank, embed_sequences, evaluate
from .porto import PORTO_BBOX, ingest, split_of
from .synth import synthetic_city, write_porto_csv
from .pipeline import RunConfig, loss_transfer_trace, run_pipeline
from .estimators import AdaptiveCellTokenizer, TrajectoryEmbedder

__version__ = "0.1.0"

__all__ = [
    "EARTH_RADIUS_M", "GpsPoint", "Trajectory", "bearing_deg", "haversine_m", "speed_mps",
    "QUAD", "HEX", "CellKey", "GridConfig", "cell_of", "children", "parent", "is_ancestor",
    "PAD_ID", "UNK_ID", "MASK_ID", "FIRST_CELL_ID", "Vocabulary",
    "build_vocabulary", "count_base", "save_vocabulary", "load_vocabulary",
    "Token", "TokenSequence", "map_point", "tokenize", "kinematic_features",
    "RUN_AWARE", "NAIVE", "MaskSpec", "runs",
    "sample_mask", "sample_mask_run_aware", "sample_mask_naive",
    "EncoderConfig", "LossWeights", "DualStreamEncoder",
    "TokenDataset", "TrainConfig", "train", "save_checkpoint", "load_checkpoint",
    "dtw", "dtw_matrix",
    "RetrievalBank", "MetricsReport", "build_bank", "embed_sequences", "evaluate",
    "PORTO_BBOX", "ingest", "split_of",
    "synthetic_city", "write_porto_csv",
    "RunConfig", "run_pipeline", "loss_transfer_trace",
    "AdaptiveCellTokenizer", "TrajectoryEmbedder",
]
