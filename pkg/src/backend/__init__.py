from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    DataManifest,
    RunManifest,
    apply_overrides,
    load_data_manifest,
    load_manifest,
    manifest_from_dict,
    save_manifest,
)
from .corpus_io import read_corpus, read_split, write_corpus, write_split
from .decode_eval import DecodeConfig, decode_utterance, evaluate, hybrid_beam_search, wer
from .device_utils import resolve_config, seed_everything
from .errors import (
    ConfigError,
    ContractError,
    EmptyInputError,
    NumericError,
    ShapeError,
    TokenizationError,
    TrainingError,
    USRError,
)
from .experiments import run_experiment
from .metrics import MetricsWriter, write_curve_report
from .model import ALL_MODALITIES, Modality, ModelConfig, USRModel
from .synth_data import AugmentConfig, CorpusConfig, generate_corpus
from .tokenizer import Tokenizer
from .training import TrainResult, run_pretrain, run_stage, train_semi, train_supervised

__all__ = [
    "load_checkpoint",
    "save_checkpoint",
    "DataManifest",
    "RunManifest",
    "apply_overrides",
    "load_data_manifest",
    "load_manifest",
    "manifest_from_dict",
    "save_manifest",
    "read_corpus",
    "read_split",
    "write_corpus",
    "write_split",
    "DecodeConfig",
    "decode_utterance",
    "evaluate",
    "hybrid_beam_search",
    "wer",
    "resolve_config",
    "seed_everything",
    "ConfigError",
    "ContractError",
    "EmptyInputError",
    "NumericError",
    "ShapeError",
    "TokenizationError",
    "TrainingError",
    "USRError",
    "run_experiment",
    "MetricsWriter",
    "write_curve_report",
    "ALL_MODALITIES",
    "Modality",
    "ModelConfig",
    "USRModel",
    "AugmentConfig",
    "CorpusConfig",
    "generate_corpus",
    "Tokenizer",
    "TrainResult",
    "run_pretrain",
    "run_stage",
    "train_semi",
    "train_supervised",
]
