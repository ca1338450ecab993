"""Fine-tuning loops and evaluation for the entity and document-class tasks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterRegistry, Tensor
from .data import DocumentRecord
from .encoder import EncoderConfig
from .errors import DataError, NumericError
from .heads import EntityLabelSet, Prediction, PrfScores, doc_logits, entity_f1, entity_logits
from .optim import Adam
from .pipeline import encode_state, prepare_document
from .pretrain import batches


def entity_batch_loss(
    batch: list[DocumentRecord],
    provider,
    registry: ParameterRegistry,
    enc_cfg: EncoderConfig,
    label_set: EntityLabelSet,
) -> Tensor:
    """Mean cross-entropy over every region in the batch."""
    logit_blocks = []
    labels: list[int] = []
    for doc in batch:
        state = prepare_document(doc, provider, registry, enc_cfg)
        encoded = encode_state(state, registry, enc_cfg)
        logit_blocks.append(entity_logits(encoded.output, registry))
        for region in doc.regions:
            if region.label is None:
                raise DataError(f"document {doc.doc_id!r} region {region.region_id!r} has no label")
            labels.append(label_set.index(region.label))
    return ad.cross_entropy(ad.concat(logit_blocks, axis=0), labels)


def docclass_batch_loss(
    batch: list[DocumentRecord],
    provider,
    registry: ParameterRegistry,
    enc_cfg: EncoderConfig,
    num_classes: int,
) -> Tensor:
    """Mean cross-entropy on the global-node logits of each document."""
    rows = []
    labels = []
    for doc in batch:
        if doc.doc_class is None:
            raise DataError(f"document {doc.doc_id!r} has no doc_class")
        if not 0 <= doc.doc_class < num_classes:
            raise DataError(
                f"document {doc.doc_id!r} class {doc.doc_class} outside [0, {num_classes})"
            )
        state = prepare_document(doc, provider, registry, enc_cfg)
        encoded = encode_state(state, registry, enc_cfg)
        logits = doc_logits(encoded.output, registry)
        rows.append(ad.reshape(logits, (1, num_classes)))
        labels.append(doc.doc_class)
    return ad.cross_entropy(ad.concat(rows, axis=0), labels)


def finetune_step(
    batch,
    provider,
    registry: ParameterRegistry,
    optimizer: Adam,
    enc_cfg: EncoderConfig,
    task: str,
    label_set: EntityLabelSet | None = None,
    num_classes: int | None = None,
) -> float:
    if task == "entity":
        loss = entity_batch_loss(batch, provider, registry, enc_cfg, label_set)
    elif task == "docclass":
        loss = docclass_batch_loss(batch, provider, registry, enc_cfg, num_classes)
    else:
        raise DataError(f"unknown fine-tune task {task!r}")
    if not np.isfinite(loss.data).all():
        raise NumericError(f"fine-tune loss is not finite at step {optimizer.step_count}")
    registry.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.data)


@dataclass
class EntityMetrics:
    micro: PrfScores
    per_label: dict[str, PrfScores]
    accuracy: float

    def as_dict(self) -> dict:
        return {
            "micro": vars(self.micro),
            "per_label": {k: vars(v) for k, v in self.per_label.items()},
            "accuracy": self.accuracy,
        }


def predict_entities(
    doc: DocumentRecord, provider, registry: ParameterRegistry, enc_cfg: EncoderConfig
) -> list[Prediction]:
    with ad.no_grad():
        state = prepare_document(doc, provider, registry, enc_cfg)
        encoded = encode_state(state, registry, enc_cfg)
        scores = entity_logits(encoded.output, registry).data
    return [Prediction(int(np.argmax(row)), row.copy()) for row in scores]


def predict_docclass(
    doc: DocumentRecord, provider, registry: ParameterRegistry, enc_cfg: EncoderConfig
) -> Prediction:
    with ad.no_grad():
        state = prepare_document(doc, provider, registry, enc_cfg)
        encoded = encode_state(state, registry, enc_cfg)
        scores = doc_logits(encoded.output, registry).data
    return Prediction(int(np.argmax(scores)), scores.copy())


def evaluate_entity(
    corpus, provider, registry: ParameterRegistry, enc_cfg: EncoderConfig, label_set: EntityLabelSet
) -> EntityMetrics:
    pred: list[int] = []
    gold: list[int] = []
    for doc in corpus:
        for region, p in zip(doc.regions, predict_entities(doc, provider, registry, enc_cfg)):
            if region.label is None:
                raise DataError(f"document {doc.doc_id!r} region {region.region_id!r} has no label")
            pred.append(p.label)
            gold.append(label_set.index(region.label))
    micro, per_label = entity_f1(pred, gold, label_set)
    accuracy = float(np.mean(np.asarray(pred) == np.asarray(gold)))
    return EntityMetrics(micro=micro, per_label=per_label, accuracy=accuracy)


def evaluate_docclass(corpus, provider, registry: ParameterRegistry, enc_cfg: EncoderConfig) -> float:
    correct = 0
    for doc in corpus:
        if doc.doc_class is None:
            raise DataError(f"document {doc.doc_id!r} has no doc_class")
        correct += predict_docclass(doc, provider, registry, enc_cfg).label == doc.doc_class
    return correct / len(corpus)


@dataclass
class FinetuneHistory:
    losses: list[float] = field(default_factory=list)
    steps_to_perfect: int | None = None


def run_finetune(
    corpus,
    provider,
    registry: ParameterRegistry,
    optimizer: Adam,
    enc_cfg: EncoderConfig,
    task: str,
    steps: int,
    batch_size: int,
    label_set: EntityLabelSet | None = None,
    num_classes: int | None = None,
    eval_every: int | None = None,
    stop_when_perfect: bool = False,
) -> FinetuneHistory:
    """Train the head + encoder; optionally track when the train set is solved."""
    history = FinetuneHistory()
    for step, batch in enumerate(batches(corpus, batch_size, steps)):
        loss = finetune_step(
            batch, provider, registry, optimizer, enc_cfg, task,
            label_set=label_set, num_classes=num_classes,
        )
        history.losses.append(loss)
        if eval_every and (step + 1) % eval_every == 0 and history.steps_to_perfect is None:
            if task == "entity":
                solved = evaluate_entity(corpus, provider, registry, enc_cfg, label_set).micro.f1 == 1.0
            else:
                solved = evaluate_docclass(corpus, provider, registry, enc_cfg) == 1.0
            if solved:
                history.steps_to_perfect = step + 1
                if stop_when_perfect:
                    break
    return history
