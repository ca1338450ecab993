"""Document-to-tensors assembly shared by training, evaluation, and the CLI."""

from __future__ import annotations

from dataclasses import dataclass

from . import geometry, providers
from .autodiff import ParameterRegistry, Tensor
from .data import DocumentRecord
from .encoder import EncoderConfig, EncoderState, PairData, encode_document
from .graph import AttentionGraph, build_document_graph, dense_graph


@dataclass
class DocumentState:
    """Everything the encoder needs for one document."""

    doc: DocumentRecord
    boxes: list[geometry.NormalizedBox]  # index 0 is the whole-page box
    layout: Tensor  # L, (n+1, d)
    sent: Tensor  # S, (n+1, d)
    sent_pre: Tensor  # S - L
    vis: Tensor  # V, (n+1, d)
    graph: AttentionGraph
    pairs: PairData


def prepare_document(
    doc: DocumentRecord, provider, registry: ParameterRegistry, cfg: EncoderConfig
) -> DocumentState:
    """Normalize geometry, assemble embeddings, and build the attention graph."""
    size = (doc.width, doc.height)
    boxes = [geometry.full_page_box()]
    boxes.extend(geometry.normalize_box(r.box, size) for r in doc.regions)
    layout = geometry.layout_embed_rows(
        [b.features() for b in boxes], registry["layout/emb_x"], registry["layout/emb_y"]
    )
    sent, sent_pre = providers.sentence_embeddings(doc, provider, layout, registry)
    vis = providers.visual_embeddings(doc, provider, layout, registry)
    if cfg.use_gat:
        graph = build_document_graph(boxes[1:], cfg.top_k)
    else:
        graph = dense_graph(doc.n_regions)
    pairs = PairData.from_graph(graph, boxes, cfg)
    return DocumentState(
        doc=doc,
        boxes=boxes,
        layout=layout,
        sent=sent,
        sent_pre=sent_pre,
        vis=vis,
        graph=graph,
        pairs=pairs,
    )


def encode_state(
    state: DocumentState,
    registry: ParameterRegistry,
    cfg: EncoderConfig,
    sent_override: Tensor | None = None,
    capture_attention: bool = False,
) -> EncoderState:
    """Encode a prepared document, optionally replacing S (masked pretraining)."""
    sent = state.sent if sent_override is None else sent_override
    return encode_document(
        sent, state.vis, state.graph, state.pairs, registry, cfg, capture_attention
    )
