"""Masked-sentence pretraining: masking policy, regression loss, train step.

Regions are selected i.i.d. (15% by default); a selected region's sentence
embedding is replaced by the learned mask vector (80%), by another
region's sentence content (10%), or kept (10%).  Layout is always
preserved.  The objective regresses the original sentence embedding of
every selected region under smooth-L1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterRegistry, Tensor
from .data import DocumentRecord
from .encoder import EncoderConfig
from .errors import ConfigError, NumericError
from .optim import Adam
from .pipeline import DocumentState, encode_state, prepare_document

MASK_SYMBOL = "mask_symbol"
RANDOM_REPLACE = "random_replace"
UNCHANGED_SELECTED = "unchanged_selected"
KEEP = "keep"


@dataclass
class MsmConfig:
    mask_rate: float = 0.15
    mask_symbol_frac: float = 0.8
    random_frac: float = 0.1
    keep_frac: float = 0.1
    layout_free_target: bool = False  # regress S - L instead of S

    def __post_init__(self):
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigError(f"mask_rate must lie in (0, 1), got {self.mask_rate}")
        total = self.mask_symbol_frac + self.random_frac + self.keep_frac
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"action fractions must sum to 1, got {total}")


@dataclass
class DocMask:
    """Per-region actions for one document; donors index (doc, region) in the batch."""

    actions: list[str]
    donors: list[tuple[int, int] | None]

    def selected(self) -> list[int]:
        return [i for i, a in enumerate(self.actions) if a != KEEP]


@dataclass
class MaskAssignment:
    docs: list[DocMask] = field(default_factory=list)

    @property
    def total_selected(self) -> int:
        return sum(len(d.selected()) for d in self.docs)


def sample_msm_mask(
    batch: list[DocumentRecord], rng: np.random.Generator, cfg: MsmConfig
) -> MaskAssignment:
    """Draw the per-region masking decisions for a batch.

    The global node is never a candidate.  Replacement donors come from
    other documents in the batch; a single-document batch falls back to the
    document's other regions, and a lone single-region document downgrades
    the action to unchanged-selected.
    """
    assignment = MaskAssignment()
    for di, doc in enumerate(batch):
        actions: list[str] = []
        donors: list[tuple[int, int] | None] = []
        for ri in range(doc.n_regions):
            donor = None
            if rng.random() < cfg.mask_rate:
                u = rng.random()
                if u < cfg.mask_symbol_frac:
                    action = MASK_SYMBOL
                elif u < cfg.mask_symbol_frac + cfg.random_frac:
                    action = RANDOM_REPLACE
                    pool = [
                        (dj, rj)
                        for dj, other in enumerate(batch)
                        for rj in range(other.n_regions)
                        if (dj != di if len(batch) > 1 else rj != ri)
                    ]
                    if pool:
                        donor = pool[int(rng.integers(len(pool)))]
                    else:
                        action = UNCHANGED_SELECTED
                else:
                    action = UNCHANGED_SELECTED
            else:
                action = KEEP
            actions.append(action)
            donors.append(donor)
        assignment.docs.append(DocMask(actions, donors))
    return assignment


@dataclass
class MsmTarget:
    """Detached regression targets for one document's selected regions."""

    nodes: np.ndarray  # node indices (region index + 1)
    values: np.ndarray  # (num_selected, d), copies of the original embeddings


def build_masked_sentences(
    state: DocumentState,
    mask: DocMask,
    batch_states: list[DocumentState],
    registry: ParameterRegistry,
    cfg: MsmConfig,
) -> tuple[Tensor, MsmTarget]:
    """Assemble the corrupted sentence matrix and the detached targets.

    Masked rows keep their layout component: the learned mask vector (or a
    donor's pre-layout sentence content) is added to the original node's
    layout embedding.
    """
    selected = mask.selected()
    d = state.sent.data.shape[1]
    source = state.sent_pre if cfg.layout_free_target else state.sent
    nodes = np.array([i + 1 for i in selected], dtype=np.int64)
    values = source.data[nodes].copy() if selected else np.zeros((0, d))
    target = MsmTarget(nodes=nodes, values=values)
    if not selected:
        return state.sent, target
    rows: list[Tensor] = [state.sent[0:1]]
    mask_vec = ad.reshape(registry["msm/mask_embed"], (1, d))
    for ri, action in enumerate(mask.actions):
        node = ri + 1
        if action == MASK_SYMBOL:
            rows.append(ad.add(mask_vec, state.layout[node : node + 1]))
        elif action == RANDOM_REPLACE:
            dj, rj = mask.donors[ri]
            donor_pre = batch_states[dj].sent_pre[rj + 1 : rj + 2]
            rows.append(ad.add(donor_pre, state.layout[node : node + 1]))
        else:  # keep and unchanged_selected both leave the row intact
            rows.append(state.sent[node : node + 1])
    return ad.concat(rows, axis=0), target


def msm_prediction(h_final: Tensor, target: MsmTarget, registry: ParameterRegistry) -> Tensor:
    """Regression-head difference rows (targets - predictions) for selected nodes."""
    pred = ad.matmul(h_final, registry["msm/head_w"])
    return ad.sub(Tensor(target.values), ad.embedding_lookup(pred, target.nodes))


def msm_loss(h_final: Tensor, target: MsmTarget, registry: ParameterRegistry) -> Tensor:
    """Smooth-L1 over the selected regions of one document."""
    return ad.smooth_l1(msm_prediction(h_final, target, registry))


@dataclass
class StepResult:
    loss: float | None
    masked_count: int
    lr: float
    skipped: bool = False


def train_step(
    batch: list[DocumentRecord],
    provider,
    registry: ParameterRegistry,
    optimizer: Adam,
    enc_cfg: EncoderConfig,
    msm_cfg: MsmConfig,
    rng: np.random.Generator,
) -> StepResult:
    """One masked-pretraining update over a document batch.

    A batch in which the sampler selected nothing is skipped (no update);
    the caller counts skips.  Losses are pooled over every selected region
    in the batch before the mean.
    """
    assignment = sample_msm_mask(batch, rng, msm_cfg)
    if assignment.total_selected == 0:
        return StepResult(loss=None, masked_count=0, lr=optimizer.schedule(optimizer.step_count), skipped=True)
    states = [prepare_document(doc, provider, registry, enc_cfg) for doc in batch]
    diffs = []
    for state, mask in zip(states, assignment.docs):
        masked_sent, target = build_masked_sentences(state, mask, states, registry, msm_cfg)
        if target.nodes.size == 0:
            continue
        encoded = encode_state(state, registry, enc_cfg, sent_override=masked_sent)
        diffs.append(msm_prediction(encoded.output, target, registry))
    loss = ad.smooth_l1(ad.concat(diffs, axis=0)) if len(diffs) > 1 else ad.smooth_l1(diffs[0])
    if not np.isfinite(loss.data).all():
        raise NumericError(f"pretraining loss is not finite at step {optimizer.step_count}")
    registry.zero_grad()
    loss.backward()
    lr = optimizer.step()
    return StepResult(loss=float(loss.data), masked_count=assignment.total_selected, lr=lr)


def batches(corpus: list[DocumentRecord], batch_size: int, steps: int):
    """Deterministic wrap-around batching in corpus order."""
    n = len(corpus)
    pos = 0
    for _ in range(steps):
        batch = [corpus[(pos + i) % n] for i in range(min(batch_size, n))]
        pos = (pos + batch_size) % n
        yield batch
