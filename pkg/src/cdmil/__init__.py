"""Cognitive distortion detection with LLM-mined instances and multi-view
gated attention multiple-instance learning."""

from .bags import build_bag, build_bags, normalize_salience
from .embedding import BagBatch, BagEmbedder, HashEmbeddingBackend, assemble
from .exceptions import CdmilError, PipelineError, UserError
from .llm import LLMGateway, ProviderConfig, extract_json_payload
from .metrics import evaluate, summarize_runs
from .mil import ModelParams, MultiViewGatedMIL, TrainConfig, backward, forward, lr_at, train
from .schema import Bag, DistortionInstance, ELBComponents, Utterance, get_schema

__version__ = "0.1.0"

__all__ = [
    "Bag",
    "BagBatch",
    "BagEmbedder",
    "CdmilError",
    "DistortionInstance",
    "ELBComponents",
    "HashEmbeddingBackend",
    "LLMGateway",
    "ModelParams",
    "MultiViewGatedMIL",
    "PipelineError",
    "ProviderConfig",
    "TrainConfig",
    "UserError",
    "Utterance",
    "assemble",
    "backward",
    "build_bag",
    "build_bags",
    "evaluate",
    "extract_json_payload",
    "forward",
    "get_schema",
    "lr_at",
    "normalize_salience",
    "summarize_runs",
    "train",
]
