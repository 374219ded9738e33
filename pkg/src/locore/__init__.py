"""List-wise image re-ranking over local descriptors with a long-context sparse transformer."""

__version__ = "0.1.0"

from .attention import AttentionLayerParams, AttentionPattern, build_pattern, dense_reference_attention, flop_count, sparse_attention
from .inference import AggregatorMode, RerankResult, aggregate, rerank_once, sliding_rerank, window_schedule
from .metrics import EvalReport, Protocol, average_precision, evaluate, map_at_R, recall_at_k
from .model import ModelConfig, RerankerModel, forward, init_model, load_checkpoint, make_config, param_count, save_checkpoint
from .sequence import TokenMeta, TokenSequence, assemble, shuffle_gallery
from .store import DescriptorBank, LocalDescriptorSet, Manifest, ShortList, global_topk, read_bank, select_top_L, write_bank
from .synth import WorldConfig, WorldTruth, generate_world, split_world
from .trainer import TrainConfig, TrainSample, sample_training_list, train, train_step

__all__ = [
    "AggregatorMode",
    "AttentionLayerParams",
    "AttentionPattern",
    "DescriptorBank",
    "EvalReport",
    "LocalDescriptorSet",
    "Manifest",
    "ModelConfig",
    "Protocol",
    "RerankResult",
    "RerankerModel",
    "ShortList",
    "TokenMeta",
    "TokenSequence",
    "TrainConfig",
    "TrainSample",
    "WorldConfig",
    "WorldTruth",
    "aggregate",
    "assemble",
    "average_precision",
    "build_pattern",
    "dense_reference_attention",
    "evaluate",
    "flop_count",
    "forward",
    "generate_world",
    "global_topk",
    "init_model",
    "load_checkpoint",
    "make_config",
    "map_at_R",
    "param_count",
    "read_bank",
    "recall_at_k",
    "rerank_once",
    "sample_training_list",
    "save_checkpoint",
    "select_top_L",
    "shuffle_gallery",
    "sliding_rerank",
    "sparse_attention",
    "split_world",
    "train",
    "train_step",
    "window_schedule",
    "write_bank",
]
