"""Instruction-aware universal multimodal retrieval with modality-aware hard negatives."""
from .core import Item, Metric, Modality, Qrels, Query, TaskSpec
from .featurizer import FeaturizerConfig
from .fusion import EncodeOptions, FusionParams, encode_candidate, encode_query, init_params
from .index import SearchHit, VectorIndex
from .miner import MinedNegatives, MinerConfig, mine, remine_continual, sample_negative
from .pipeline import PipelineConfig, cmd_pipeline
from .reranker import RerankConfig, rerank
from .trainer import Stage, TrainConfig, infonce_grad, infonce_loss, train

__version__ = "0.1.0"
