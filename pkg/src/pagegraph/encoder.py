"""The encoder stack: gated visual fusion followed by masked graph attention.

Each of the N blocks first folds the (static) visual embeddings into the
running hidden state through a scalar gate, then contextualizes nodes over
the top-k neighborhood graph.  Attention scores carry an optional 2D
relative-position bias; scores and the bias are only computed for pairs
the mask admits, so the per-layer cost is O(n * k).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry
from .autodiff import ParameterRegistry, Tensor
from .errors import ConfigError, NumericError
from .graph import AttentionGraph

FUSION_MODES = ("gate", "add", "concat")


@dataclass
class EncoderConfig:
    layers: int = 12
    dim: int = 768
    heads: int = 12
    top_k: int = 36
    fusion: str = "gate"
    residual_gate_layers: int | None = None  # None = every block fuses V
    use_rpe: bool = True
    use_gat: bool = True
    scale_scores: bool = True
    standard_block: bool = False
    ln_eps: float = 1e-5
    ffn_mult: int = 4

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.dim % 6 != 0:
            raise ConfigError(f"dim must be divisible by 6 (layout features), got {self.dim}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion!r}; pick from {FUSION_MODES}")
        if self.residual_gate_layers is None:
            self.residual_gate_layers = self.layers
        if not 0 <= self.residual_gate_layers <= self.layers:
            raise ConfigError(
                f"residual_gate_layers must lie in [0, {self.layers}], "
                f"got {self.residual_gate_layers}"
            )

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def sinusoid_dim(self) -> int:
        # per-axis sinusoid length; the per-corner pair feature then has length dim
        return self.dim // 2


@dataclass
class PairData:
    """Masked node pairs of one document plus their cached corner sinusoids."""

    rows: np.ndarray
    cols: np.ndarray
    feats: dict[str, np.ndarray] | None  # corner name -> (pairs, dim); None if RPE off

    @classmethod
    def from_graph(cls, graph: AttentionGraph, boxes, cfg: "EncoderConfig") -> "PairData":
        feats = None
        if cfg.use_rpe:
            feats = geometry.corner_pair_features(
                boxes, graph.pair_rows, graph.pair_cols, cfg.sinusoid_dim
            )
        return cls(rows=graph.pair_rows, cols=graph.pair_cols, feats=feats)


@dataclass
class EncoderState:
    """Per-layer fused inputs, gate activations, and hidden outputs."""

    hidden: list[Tensor] = field(default_factory=list)  # H^0 .. H^N
    fused: list[Tensor] = field(default_factory=list)  # M^1 .. M^N
    gates: list[Tensor | None] = field(default_factory=list)  # z^1 .. z^N (gate mode only)
    attention: list[list[np.ndarray]] = field(default_factory=list)  # [layer][head] matrices

    @property
    def output(self) -> Tensor:
        return self.hidden[-1]


def init_encoder_params(
    cfg: EncoderConfig,
    text_dim: int,
    vis_dim: int,
    seed: int = 0,
    entity_labels: int | None = None,
    doc_classes: int | None = None,
) -> ParameterRegistry:
    """Build the full trainable registry for one model configuration.

    Creation order is fixed, so a given seed always produces the same
    initialization.  Weight matrices draw from N(0, 0.02); biases start at
    zero, layer-norm gains at one.
    """
    rng = np.random.default_rng(seed)
    reg = ParameterRegistry()
    d = cfg.dim

    def norm(name: str, *shape: int):
        reg.register(name, Tensor(rng.normal(0.0, 0.02, size=shape)))

    def zeros(name: str, *shape: int):
        reg.register(name, Tensor(np.zeros(shape)))

    def ones(name: str, *shape: int):
        reg.register(name, Tensor(np.ones(shape)))

    norm("layout/emb_x", geometry.GRID + 1, d // 6)
    norm("layout/emb_y", geometry.GRID + 1, d // 6)
    norm("text/proj_w", text_dim, d)
    zeros("text/proj_b", d)
    norm("text/cls", d)
    norm("vis/proj_w", vis_dim, d)
    zeros("vis/proj_b", d)
    for layer in range(cfg.layers):
        p = f"enc/l{layer:02d}"
        if layer < cfg.residual_gate_layers:
            if cfg.fusion == "gate":
                norm(f"{p}/gate/w1", 2 * d, d)
                zeros(f"{p}/gate/b1", d)
                norm(f"{p}/gate/w2", d, 1)
                zeros(f"{p}/gate/b2", 1)
            elif cfg.fusion == "concat":
                norm(f"{p}/fuse/w", 2 * d, d)
        for h in range(cfg.heads):
            norm(f"{p}/attn/h{h:02d}/wq", d, cfg.head_dim)
            norm(f"{p}/attn/h{h:02d}/wk", d, cfg.head_dim)
            norm(f"{p}/attn/h{h:02d}/wv", d, cfg.head_dim)
        norm(f"{p}/attn/wo", d, d)
        if cfg.use_rpe:
            for corner in geometry.CORNERS:
                norm(f"{p}/rpe/w_{corner}", 2 * cfg.sinusoid_dim, d)
        norm(f"{p}/ffn/w1", d, cfg.ffn_mult * d)
        zeros(f"{p}/ffn/b1", cfg.ffn_mult * d)
        norm(f"{p}/ffn/w2", cfg.ffn_mult * d, d)
        zeros(f"{p}/ffn/b2", d)
        ones(f"{p}/ln/g", d)
        zeros(f"{p}/ln/b", d)
        if cfg.standard_block:
            ones(f"{p}/ln2/g", d)
            zeros(f"{p}/ln2/b", d)
    norm("msm/mask_embed", d)
    norm("msm/head_w", d, d)
    if entity_labels is not None:
        norm("heads/entity_w", d, entity_labels)
        zeros("heads/entity_b", entity_labels)
    if doc_classes is not None:
        norm("heads/doc_w", d, doc_classes)
        zeros("heads/doc_b", doc_classes)
    return reg


def gate_fusion(
    h_prev: Tensor, vis: Tensor, registry: ParameterRegistry, prefix: str
) -> tuple[Tensor, Tensor]:
    """Scalar-gated interpolation between the hidden state and the visuals.

    z = sigmoid(w2 . gelu(w1 [v; h] + b1) + b2) per node; m = (1-z) h + z v.
    """
    x = ad.concat([vis, h_prev], axis=1)
    inner = ad.gelu(ad.add(ad.matmul(x, registry[f"{prefix}/gate/w1"]), registry[f"{prefix}/gate/b1"]))
    z = ad.sigmoid(ad.add(ad.matmul(inner, registry[f"{prefix}/gate/w2"]), registry[f"{prefix}/gate/b2"]))
    fused = ad.add(ad.mul(ad.sub(1.0, z), h_prev), ad.mul(z, vis))
    return fused, z


def fuse_alternatives(
    h_prev: Tensor, vis: Tensor, mode: str, registry: ParameterRegistry, prefix: str
) -> Tensor:
    """Ablation fusion strategies: plain addition or projected concatenation."""
    if mode == "add":
        return ad.add(h_prev, vis)
    if mode == "concat":
        return ad.matmul(ad.concat([h_prev, vis], axis=1), registry[f"{prefix}/fuse/w"])
    raise ConfigError(f"unknown fusion mode {mode!r}")


def graph_attention_layer(
    m: Tensor,
    graph: AttentionGraph,
    pairs: PairData,
    registry: ParameterRegistry,
    prefix: str,
    cfg: EncoderConfig,
    layer_index: int = 0,
    capture: list[np.ndarray] | None = None,
) -> Tensor:
    """One masked multi-head attention block over the document graph.

    Scores exist only for masked-in pairs; each head adds its slice of the
    shared relative-position bias, softmax-normalizes within the
    neighborhood, and aggregates values.  The block output is
    LN(attn + FFN(attn)), as configured.
    """
    n = graph.node_count
    rows, cols = pairs.rows, pairs.cols
    bias_all = None
    if cfg.use_rpe:
        corner_weights = {c: registry[f"{prefix}/rpe/w_{c}"] for c in geometry.CORNERS}
        bias_all = geometry.project_pair_bias(pairs.feats, corner_weights)
    scale = 1.0 / math.sqrt(cfg.head_dim) if cfg.scale_scores else 1.0
    head_outs = []
    for h in range(cfg.heads):
        hp = f"{prefix}/attn/h{h:02d}"
        q = ad.matmul(m, registry[f"{hp}/wq"])
        k = ad.matmul(m, registry[f"{hp}/wk"])
        v = ad.matmul(m, registry[f"{hp}/wv"])
        q_pairs = ad.embedding_lookup(q, rows)
        k_pairs = ad.embedding_lookup(k, cols)
        scores = ad.sum_(ad.mul(q_pairs, k_pairs), axis=1)
        if cfg.scale_scores:
            scores = ad.mul(scores, scale)
        if bias_all is not None:
            bias_h = bias_all[:, h * cfg.head_dim : (h + 1) * cfg.head_dim]
            scores = ad.add(scores, ad.sum_(ad.mul(q_pairs, bias_h), axis=1))
        if not np.isfinite(scores.data).all():
            raise NumericError(f"non-finite attention scores in layer {layer_index}")
        attn = ad.masked_softmax(ad.scatter_pairs(scores, rows, cols, n), graph.mask)
        if capture is not None:
            capture.append(attn.data.copy())
        head_outs.append(ad.matmul(attn, v))
    merged = ad.matmul(ad.concat(head_outs, axis=1), registry[f"{prefix}/attn/wo"])
    if cfg.standard_block:
        # conventional post-LN block: residual from the attention input
        merged = ad.layer_norm(
            ad.add(m, merged), registry[f"{prefix}/ln/g"], registry[f"{prefix}/ln/b"], cfg.ln_eps
        )
        out = ad.layer_norm(
            ad.add(merged, _ffn(merged, registry, prefix)),
            registry[f"{prefix}/ln2/g"],
            registry[f"{prefix}/ln2/b"],
            cfg.ln_eps,
        )
        return out
    return ad.layer_norm(
        ad.add(merged, _ffn(merged, registry, prefix)),
        registry[f"{prefix}/ln/g"],
        registry[f"{prefix}/ln/b"],
        cfg.ln_eps,
    )


def _ffn(x: Tensor, registry: ParameterRegistry, prefix: str) -> Tensor:
    inner = ad.gelu(ad.add(ad.matmul(x, registry[f"{prefix}/ffn/w1"]), registry[f"{prefix}/ffn/b1"]))
    return ad.add(ad.matmul(inner, registry[f"{prefix}/ffn/w2"]), registry[f"{prefix}/ffn/b2"])


def encode_document(
    sent: Tensor,
    vis: Tensor,
    graph: AttentionGraph,
    pairs: PairData,
    registry: ParameterRegistry,
    cfg: EncoderConfig,
    capture_attention: bool = False,
) -> EncoderState:
    """Run the full stack; H^0 is the sentence embedding matrix."""
    state = EncoderState(hidden=[sent])
    h = sent
    for layer in range(cfg.layers):
        prefix = f"enc/l{layer:02d}"
        z = None
        if layer < cfg.residual_gate_layers:
            if cfg.fusion == "gate":
                m, z = gate_fusion(h, vis, registry, prefix)
            else:
                m = fuse_alternatives(h, vis, cfg.fusion, registry, prefix)
        else:
            m = h
        capture: list[np.ndarray] | None = [] if capture_attention else None
        h = graph_attention_layer(m, graph, pairs, registry, prefix, cfg, layer, capture)
        state.fused.append(m)
        state.gates.append(z)
        state.hidden.append(h)
        if capture_attention:
            state.attention.append(capture)
    return state
