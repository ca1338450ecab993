"""Layout-aware document encoder with gated fusion and masked graph attention."""

from .autodiff import ParameterRegistry, Tensor, grad_check, no_grad
from .data import DocumentRecord, RegionRecord, gen_synthetic, load_corpus, save_corpus
from .encoder import EncoderConfig, encode_document, init_encoder_params
from .geometry import BoundingBox, NormalizedBox, normalize_box
from .graph import AttentionGraph, build_attention_mask, knn_neighbors
from .heads import EntityLabelSet, entity_f1
from .pipeline import encode_state, prepare_document
from .pretrain import MsmConfig, train_step
from .providers import PrecomputedProvider, StubProvider, stub_embedding

__all__ = [
    "AttentionGraph",
    "BoundingBox",
    "DocumentRecord",
    "EncoderConfig",
    "EntityLabelSet",
    "MsmConfig",
    "NormalizedBox",
    "ParameterRegistry",
    "PrecomputedProvider",
    "RegionRecord",
    "StubProvider",
    "Tensor",
    "build_attention_mask",
    "encode_document",
    "encode_state",
    "entity_f1",
    "gen_synthetic",
    "grad_check",
    "init_encoder_params",
    "knn_neighbors",
    "load_corpus",
    "no_grad",
    "normalize_box",
    "prepare_document",
    "save_corpus",
    "stub_embedding",
    "train_step",
]

__version__ = "0.1.0"
