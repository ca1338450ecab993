"""Operator entry points: pretrain, finetune, eval, inspect-graph.

Configuration is a JSON file; any key can be overridden on the command
line with a flag mirroring its path (``--encoder.layers 2``).  Artifacts
go to the output directory, logs to standard error.  Exit codes: 0
success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ParameterRegistry
from .data import (
    gen_synthetic,
    load_corpus,
    restore_into,
    save_checkpoint,
    save_corpus,
    save_tensors,
)
from .encoder import EncoderConfig, init_encoder_params
from .errors import ConfigError, DataError, NumericError
from .finetune import (
    evaluate_docclass,
    evaluate_entity,
    finetune_step,
    run_finetune,
)
from .heads import EntityLabelSet
from .optim import Adam, ConstantSchedule, LinearWarmupSchedule
from .pipeline import encode_state, prepare_document
from .pretrain import MsmConfig, batches, train_step
from .providers import PrecomputedProvider, StubProvider

log = logging.getLogger("pagegraph")


@dataclass
class ProviderConfig:
    kind: str = "stub"
    text_dim: int = 384
    vis_dim: int = 256
    path: str | None = None

    def __post_init__(self):
        if self.kind not in ("stub", "precomputed"):
            raise ConfigError(f"provider.kind must be stub or precomputed, got {self.kind!r}")
        if self.kind == "precomputed" and not self.path:
            raise ConfigError("provider.kind=precomputed requires provider.path")


@dataclass
class OptimConfig:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    schedule: str = "warmup_linear"
    warmup_fraction: float = 0.1

    def __post_init__(self):
        if self.schedule not in ("warmup_linear", "constant"):
            raise ConfigError(f"optim.schedule must be warmup_linear or constant, got {self.schedule!r}")
        if self.lr <= 0:
            raise ConfigError(f"optim.lr must be positive, got {self.lr}")


@dataclass
class TrainSection:
    steps: int = 300
    batch_size: int = 4

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"train.steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "out"
    corpus: str | None = None
    background_label: str = "other"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainSection = field(default_factory=TrainSection)
    msm: MsmConfig = field(default_factory=MsmConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        sections = {
            "encoder": EncoderConfig,
            "provider": ProviderConfig,
            "optim": OptimConfig,
            "train": TrainSection,
            "msm": MsmConfig,
        }
        top_fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - top_fields
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in raw.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ConfigError(f"config section {key!r} must be an object")
                cls_ = sections[key]
                names = {f.name for f in dataclasses.fields(cls_)}
                bad = set(value) - names
                if bad:
                    raise ConfigError(f"unknown config keys in {key!r}: {sorted(bad)}")
                try:
                    kwargs[key] = cls_(**value)
                except TypeError as exc:
                    raise ConfigError(f"bad config section {key!r}: {exc}") from exc
            else:
                kwargs[key] = value
        return cls(**kwargs)


def _flag_entries():
    """Flat (path, type) pairs for every overridable config key."""
    entries = [("seed", int), ("out_dir", str), ("corpus", str), ("background_label", str)]
    for section, cls_ in (
        ("encoder", EncoderConfig),
        ("provider", ProviderConfig),
        ("optim", OptimConfig),
        ("train", TrainSection),
        ("msm", MsmConfig),
    ):
        for f in dataclasses.fields(cls_):
            entries.append((f"{section}.{f.name}", f.type))
    return entries


def _parse_flag_value(text: str, type_hint) -> object:
    hint = str(type_hint)
    if "bool" in hint:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if text.lower() in ("null", "none"):
        return None
    if "int" in hint:
        return int(text)
    if "float" in hint:
        return float(text)
    return text


def load_run_config(config_path: str | None, overrides: dict[str, str]) -> RunConfig:
    raw: dict = {}
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {config_path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_path} is not valid JSON: {exc}") from exc
    types = dict(_flag_entries())
    for path, text in overrides.items():
        if path not in types:
            raise ConfigError(f"unknown config key {path!r}")
        value = _parse_flag_value(text, types[path])
        node = raw
        parts = path.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"config key {path!r} collides with a scalar")
        node[parts[-1]] = value
    return RunConfig.from_dict(raw)


def build_provider(cfg: RunConfig):
    if cfg.provider.kind == "stub":
        return StubProvider(cfg.provider.text_dim, cfg.provider.vis_dim, seed=cfg.seed)
    return PrecomputedProvider(cfg.provider.path)


def build_schedule(cfg: OptimConfig, total_steps: int):
    if cfg.schedule == "constant":
        return ConstantSchedule(cfg.lr)
    return LinearWarmupSchedule(cfg.lr, max(total_steps, 1), cfg.warmup_fraction)


def _load_labeled_corpus(cfg: RunConfig):
    if not cfg.corpus:
        raise ConfigError("a corpus path is required (config key 'corpus')")
    return load_corpus(cfg.corpus)


def _init_model(cfg: RunConfig, provider, entity_labels: int | None, doc_classes: int | None):
    return init_encoder_params(
        cfg.encoder,
        text_dim=provider.text_dim,
        vis_dim=provider.vis_dim,
        seed=cfg.seed,
        entity_labels=entity_labels,
        doc_classes=doc_classes,
    )


def cmd_pretrain(cfg: RunConfig, out_dir: Path) -> int:
    corpus = _load_labeled_corpus(cfg)
    provider = build_provider(cfg)
    registry = _init_model(cfg, provider, None, None)
    optimizer = Adam(
        registry,
        build_schedule(cfg.optim, cfg.train.steps),
        beta1=cfg.optim.beta1,
        beta2=cfg.optim.beta2,
        eps=cfg.optim.eps,
        clip_norm=cfg.optim.clip_norm,
    )
    rng = np.random.default_rng(cfg.seed)
    skipped = 0
    log_path = out_dir / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as log_fh:
        for step, batch in enumerate(batches(corpus, cfg.train.batch_size, cfg.train.steps)):
            try:
                result = train_step(
                    batch, provider, registry, optimizer, cfg.encoder, cfg.msm, rng
                )
            except NumericError as exc:
                diag = {"step": step, "error": str(exc)}
                (out_dir / "diagnostics.json").write_text(json.dumps(diag, indent=2))
                raise
            skipped += result.skipped
            record = {
                "step": step,
                "lr": result.lr,
                "loss": result.loss,
                "masked_count": result.masked_count,
            }
            log_fh.write(json.dumps(record) + "\n")
            if step % 25 == 0 or step == cfg.train.steps - 1:
                log.info("step %d lr %.3g loss %s", step, result.lr, result.loss)
    save_checkpoint(registry, out_dir / "model.ckpt", meta={"kind": "pretrain"})
    log.info("wrote %s and %s (%d skipped steps)", out_dir / "model.ckpt", log_path, skipped)
    return 0


def cmd_finetune(cfg: RunConfig, out_dir: Path, task: str, checkpoint: str | None) -> int:
    corpus = _load_labeled_corpus(cfg)
    provider = build_provider(cfg)
    label_set = None
    num_classes = None
    if task == "entity":
        label_set = EntityLabelSet.from_corpus(corpus, cfg.background_label)
        registry = _init_model(cfg, provider, label_set.size, None)
    elif task == "docclass":
        classes = [doc.doc_class for doc in corpus]
        if any(c is None for c in classes):
            raise DataError("docclass fine-tuning needs a doc_class on every document")
        num_classes = max(classes) + 1
        registry = _init_model(cfg, provider, None, num_classes)
    else:
        raise ConfigError(f"unknown task {task!r}; pick entity or docclass")
    if checkpoint:
        restore_into(registry, checkpoint, allow_absent=("heads/",))
    optimizer = Adam(
        registry,
        build_schedule(cfg.optim, cfg.train.steps),
        beta1=cfg.optim.beta1,
        beta2=cfg.optim.beta2,
        eps=cfg.optim.eps,
        clip_norm=cfg.optim.clip_norm,
    )
    run_finetune(
        corpus, provider, registry, optimizer, cfg.encoder, task,
        steps=cfg.train.steps, batch_size=cfg.train.batch_size,
        label_set=label_set, num_classes=num_classes,
    )
    save_checkpoint(registry, out_dir / "model.ckpt", meta={"kind": f"finetune-{task}"})
    metrics = _evaluate(cfg, corpus, provider, registry, task, label_set)
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    log.info("wrote %s and %s", out_dir / "model.ckpt", out_dir / "metrics.json")
    return 0


def _evaluate(cfg: RunConfig, corpus, provider, registry, task: str, label_set) -> dict:
    if task == "entity":
        metrics = evaluate_entity(corpus, provider, registry, cfg.encoder, label_set).as_dict()
        metrics["labels"] = list(label_set.names)
        return metrics
    return {"accuracy": evaluate_docclass(corpus, provider, registry, cfg.encoder)}


def cmd_eval(cfg: RunConfig, out_dir: Path, task: str, checkpoint: str) -> int:
    corpus = _load_labeled_corpus(cfg)
    provider = build_provider(cfg)
    label_set = None
    if task == "entity":
        label_set = EntityLabelSet.from_corpus(corpus, cfg.background_label)
        registry = _init_model(cfg, provider, label_set.size, None)
    elif task == "docclass":
        classes = [doc.doc_class for doc in corpus]
        if any(c is None for c in classes):
            raise DataError("docclass evaluation needs a doc_class on every document")
        registry = _init_model(cfg, provider, None, max(classes) + 1)
    else:
        raise ConfigError(f"unknown task {task!r}; pick entity or docclass")
    restore_into(registry, checkpoint)
    metrics = _evaluate(cfg, corpus, provider, registry, task, label_set)
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    log.info("wrote %s", out_dir / "metrics.json")
    return 0


def cmd_inspect_graph(cfg: RunConfig, out_dir: Path, doc_id: str, checkpoint: str | None) -> int:
    corpus = _load_labeled_corpus(cfg)
    matches = [d for d in corpus if d.doc_id == doc_id]
    if not matches:
        raise DataError(f"unknown document id {doc_id!r}")
    doc = matches[0]
    provider = build_provider(cfg)
    registry = _init_model(cfg, provider, None, None)
    if checkpoint:
        restore_into(registry, checkpoint, allow_absent=("heads/",))
    import pagegraph.autodiff as ad

    with ad.no_grad():
        state = prepare_document(doc, provider, registry, cfg.encoder)
        report = {
            "doc_id": doc.doc_id,
            "k": state.graph.k,
            "node_count": state.graph.node_count,
            "neighbors": {str(i + 1): list(n) for i, n in enumerate(state.graph.neighbors)},
            "mask": state.graph.mask.astype(int).tolist(),
        }
        (out_dir / "graph.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        if checkpoint:
            encoded = encode_state(state, registry, cfg.encoder, capture_attention=True)
            dump = {
                f"attn/layer{layer}/head{head}": matrix
                for layer, heads in enumerate(encoded.attention)
                for head, matrix in enumerate(heads)
            }
            save_tensors(dump, out_dir / "attention.ckpt", meta={"doc_id": doc.doc_id})
    log.info("wrote %s", out_dir / "graph.json")
    return 0


def cmd_gen_synthetic(out_path: str, docs: int, regions: int, classes: int, seed: int) -> int:
    save_corpus(gen_synthetic(docs, regions, classes, seed), out_path)
    log.info("wrote %s", out_path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pagegraph", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", help="output directory (artifacts)")
        for path, _ in _flag_entries():
            p.add_argument(f"--{path}", dest=f"cfg::{path}", metavar="V", help=argparse.SUPPRESS)

    p = sub.add_parser("pretrain", help="masked-sentence pretraining")
    add_common(p)

    p = sub.add_parser("finetune", help="train a task head (plus encoder)")
    add_common(p)
    p.add_argument("--task", choices=("entity", "docclass"), required=True)
    p.add_argument("--checkpoint", help="initialize from this checkpoint")

    p = sub.add_parser("eval", help="evaluate a checkpoint, no updates")
    add_common(p)
    p.add_argument("--task", choices=("entity", "docclass"), required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("inspect-graph", help="dump neighbor sets, mask, attention")
    add_common(p)
    p.add_argument("--doc-id", required=True)
    p.add_argument("--checkpoint", help="also dump per-layer attention under this model")

    p = sub.add_parser("gen-synthetic", help="write a synthetic labeled corpus")
    p.add_argument("--out-path", required=True)
    p.add_argument("--docs", type=int, default=20)
    p.add_argument("--regions", type=int, default=12)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen-synthetic":
            return cmd_gen_synthetic(args.out_path, args.docs, args.regions, args.classes, args.seed)
        overrides = {
            key.split("::", 1)[1]: value
            for key, value in vars(args).items()
            if key.startswith("cfg::") and value is not None
        }
        cfg = load_run_config(args.config, overrides)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out:
            cfg.out_dir = args.out
        out_dir = Path(cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, out_dir)
        if args.command == "finetune":
            return cmd_finetune(cfg, out_dir, args.task, args.checkpoint)
        if args.command == "eval":
            return cmd_eval(cfg, out_dir, args.task, args.checkpoint)
        if args.command == "inspect-graph":
            return cmd_inspect_graph(cfg, out_dir, args.doc_id, args.checkpoint)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except DataError as exc:
        log.error("data error: %s", exc)
        return 3
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return 4


if __name__ == "__main__":
    sys.exit(main())
