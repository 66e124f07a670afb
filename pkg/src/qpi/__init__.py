"""Transformer-encoder + CNN question paraphrase identification on a small numpy autodiff engine."""

from .config import EncoderConfig, ModelConfig, PipelineConfig, TrainSettings, base_config, tiny_config
from .pipelines import ParaphraseModel, QuestionPair, predict
from .tokenizer import Vocab, build_vocab, tokenize

__all__ = [
    "EncoderConfig", "ModelConfig", "PipelineConfig", "TrainSettings", "base_config", "tiny_config",
    "ParaphraseModel", "QuestionPair", "predict", "Vocab", "build_vocab", "tokenize",
]
__version__ = "0.1.0"
