"""Corpus records, JSON-lines ingestion, synthetic corpora, and checkpoints.

Corpus format: UTF-8 JSON-lines, one document per line,
``{"id", "width", "height", "regions": [{"id", "text", "quad" | "box",
"label"?}], "doc_class"?}``.  ``quad`` is eight numbers (four vertices
clockwise from the upper left); axis-aligned inputs may give
``box": [x0, y0, x2, y2]`` instead.

Checkpoint container: an 8-byte little-endian length, a UTF-8 JSON
manifest, then all tensor payloads concatenated in manifest order as
little-endian IEEE-754 32-bit floats.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ParameterRegistry, Tensor
from .errors import CheckpointError, DataError, NumericError
from .geometry import BoundingBox

ENTITY_LABELS = ("answer", "header", "other", "question")


@dataclass(frozen=True)
class RegionRecord:
    """One OCR region: id, text sentence, and its pixel bounding box."""

    region_id: str
    text: str
    box: BoundingBox
    label: str | None = None


@dataclass(frozen=True)
class DocumentRecord:
    """A document image's size, regions, and optional task labels."""

    doc_id: str
    width: float
    height: float
    regions: tuple[RegionRecord, ...]
    doc_class: int | None = None

    @property
    def n_regions(self) -> int:
        return len(self.regions)


def _clamped_box(doc_id: str, region_id: str, verts, width: float, height: float) -> BoundingBox:
    fixed = []
    clamped = False
    for x, y in verts:
        cx = min(max(x, 0.0), float(width))
        cy = min(max(y, 0.0), float(height))
        clamped = clamped or cx != x or cy != y
        fixed.append((cx, cy))
    if clamped:
        warnings.warn(
            f"document {doc_id!r} region {region_id!r}: box clamped into the image",
            stacklevel=3,
        )
    return BoundingBox(tuple(fixed))


def _parse_region(doc_id: str, width: float, height: float, raw: dict, seen: set[str]) -> RegionRecord:
    if not isinstance(raw, dict):
        raise DataError(f"document {doc_id!r}: region entry is not an object")
    rid = raw.get("id")
    if not isinstance(rid, str) or not rid:
        raise DataError(f"document {doc_id!r}: regions[].id must be a non-empty string")
    if rid in seen:
        raise DataError(f"document {doc_id!r}: duplicate region id {rid!r}")
    seen.add(rid)
    text = raw.get("text")
    if not isinstance(text, str):
        raise DataError(f"document {doc_id!r} region {rid!r}: text must be a string")
    if "quad" in raw:
        quad = raw["quad"]
        if not isinstance(quad, list) or len(quad) != 8:
            raise DataError(f"document {doc_id!r} region {rid!r}: quad must hold 8 numbers")
        verts = [(float(quad[2 * i]), float(quad[2 * i + 1])) for i in range(4)]
    elif "box" in raw:
        b = raw["box"]
        if not isinstance(b, list) or len(b) != 4:
            raise DataError(f"document {doc_id!r} region {rid!r}: box must hold 4 numbers")
        x0, y0, x2, y2 = (float(v) for v in b)
        verts = [(x0, y0), (x2, y0), (x2, y2), (x0, y2)]
    else:
        raise DataError(f"document {doc_id!r} region {rid!r}: needs a quad or box field")
    label = raw.get("label")
    if label is not None and not isinstance(label, str):
        raise DataError(f"document {doc_id!r} region {rid!r}: label must be a string")
    known = {"id", "text", "quad", "box", "label"}
    extra = set(raw) - known
    if extra:
        raise DataError(f"document {doc_id!r} region {rid!r}: unknown fields {sorted(extra)}")
    return RegionRecord(rid, text, _clamped_box(doc_id, rid, verts, width, height), label)


def _parse_document(raw: dict, line_no: int) -> DocumentRecord:
    if not isinstance(raw, dict):
        raise DataError(f"line {line_no}: document entry is not an object")
    doc_id = raw.get("id")
    if not isinstance(doc_id, str) or not doc_id:
        raise DataError(f"line {line_no}: id must be a non-empty string")
    width = raw.get("width")
    height = raw.get("height")
    if not isinstance(width, (int, float)) or not isinstance(height, (int, float)) or width <= 0 or height <= 0:
        raise DataError(f"document {doc_id!r}: width/height must be positive numbers")
    regions_raw = raw.get("regions")
    if not isinstance(regions_raw, list) or not regions_raw:
        raise DataError(f"document {doc_id!r}: empty document (no regions)")
    doc_class = raw.get("doc_class")
    if doc_class is not None and (not isinstance(doc_class, int) or doc_class < 0):
        raise DataError(f"document {doc_id!r}: doc_class must be a non-negative integer")
    known = {"id", "width", "height", "regions", "doc_class"}
    extra = set(raw) - known
    if extra:
        raise DataError(f"document {doc_id!r}: unknown fields {sorted(extra)}")
    seen: set[str] = set()
    regions = tuple(_parse_region(doc_id, width, height, r, seen) for r in regions_raw)
    return DocumentRecord(doc_id, float(width), float(height), regions, doc_class)


def load_corpus(path) -> list[DocumentRecord]:
    """Parse a JSON-lines corpus, validating every record."""
    docs = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {line_no}: invalid JSON: {exc}") from exc
            docs.append(_parse_document(raw, line_no))
    if not docs:
        raise DataError(f"corpus {path} holds no documents")
    return docs


def _region_to_json(region: RegionRecord) -> dict:
    quad = [coord for vertex in region.box.vertices for coord in vertex]
    out: dict = {"id": region.region_id, "text": region.text, "quad": quad}
    if region.label is not None:
        out["label"] = region.label
    return out


def save_corpus(docs, path) -> None:
    """Write documents as canonical JSON-lines (deterministic bytes)."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            entry: dict = {
                "id": doc.doc_id,
                "width": doc.width,
                "height": doc.height,
                "regions": [_region_to_json(r) for r in doc.regions],
            }
            if doc.doc_class is not None:
                entry["doc_class"] = doc.doc_class
            fh.write(json.dumps(entry, separators=(",", ":")) + "\n")


def synthetic_entity_label(cx: float, cy: float, width: float, height: float) -> str:
    """Label rule for synthetic corpora: pure function of the box center."""
    if cx < width / 3.0:
        return "question"
    if cx >= 2.0 * width / 3.0:
        return "answer"
    return "header" if cy < height / 2.0 else "other"


def gen_synthetic(docs: int, regions_per_doc: int, classes: int, seed: int) -> list[DocumentRecord]:
    """Deterministic synthetic corpus for desk-scale training runs.

    Entity labels follow ``synthetic_entity_label`` (position only), so a
    layout-aware model can reach perfect training accuracy.  The document
    class is readable from every region's text suffix.
    """
    if docs < 1 or regions_per_doc < 1 or classes < 1:
        raise DataError("synthetic corpus needs docs, regions_per_doc, classes >= 1")
    rng = np.random.default_rng(seed)
    width, height = 1200.0, 900.0
    vocab = ("total", "invoice", "date", "name", "amount", "address", "phone", "memo")
    out = []
    for d in range(docs):
        doc_class = d % classes
        regions = []
        for r in range(regions_per_doc):
            zone = r % 4  # cycle zones so every label appears
            if zone == 0:  # left third
                x0 = rng.uniform(10, width / 3 - 210)
                y0 = rng.uniform(10, height - 90)
            elif zone == 1:  # right third
                x0 = rng.uniform(2 * width / 3 + 10, width - 210)
                y0 = rng.uniform(10, height - 90)
            elif zone == 2:  # middle third, upper half
                x0 = rng.uniform(width / 3 + 10, 2 * width / 3 - 210)
                y0 = rng.uniform(10, height / 2 - 90)
            else:  # middle third, lower half
                x0 = rng.uniform(width / 3 + 10, 2 * width / 3 - 210)
                y0 = rng.uniform(height / 2 + 10, height - 90)
            w = rng.uniform(120, 200)
            h = rng.uniform(36, 78)
            x0, y0, w, h = (round(v, 1) for v in (x0, y0, w, h))
            box = BoundingBox.from_corners(x0, y0, x0 + w, y0 + h)
            cx, cy = x0 + w / 2.0, y0 + h / 2.0
            word = vocab[int(rng.integers(len(vocab)))]
            regions.append(
                RegionRecord(
                    region_id=f"r{r:03d}",
                    text=f"{word} c{doc_class}",
                    box=box,
                    label=synthetic_entity_label(cx, cy, width, height),
                )
            )
        out.append(
            DocumentRecord(
                doc_id=f"doc{d:04d}",
                width=width,
                height=height,
                regions=tuple(regions),
                doc_class=doc_class,
            )
        )
    return out


# --- checkpoint container ---------------------------------------------------

_LEN_PREFIX = struct.Struct("<Q")


def save_tensors(named: dict[str, np.ndarray], path, meta: dict | None = None) -> None:
    """Write arrays into the length-prefixed manifest + float32 payload format."""
    names = sorted(named)
    manifest = {
        "tensors": [
            {"name": name, "shape": list(named[name].shape), "dtype": "f4"}
            for name in names
        ],
        "meta": meta or {},
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_LEN_PREFIX.pack(len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(named[name], dtype="<f4").tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container; returns (name -> float64 array, metadata)."""
    with open(path, "rb") as fh:
        head = fh.read(_LEN_PREFIX.size)
        if len(head) != _LEN_PREFIX.size:
            raise CheckpointError(f"{path}: truncated manifest length prefix")
        (blob_len,) = _LEN_PREFIX.unpack(head)
        blob = fh.read(blob_len)
        if len(blob) != blob_len:
            raise CheckpointError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: manifest is not valid JSON: {exc}") from exc
        payload = fh.read()
    entries = manifest.get("tensors")
    if not isinstance(entries, list):
        raise CheckpointError(f"{path}: manifest lacks a tensor list")
    expected = sum(int(np.prod(e["shape"], dtype=np.int64)) * 4 for e in entries)
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, manifest implies {expected}"
        )
    out = {}
    offset = 0
    for entry in entries:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        raw = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        out[entry["name"]] = raw.astype(np.float64).reshape(shape)
        offset += count * 4
    return out, manifest.get("meta", {})


def save_checkpoint(registry: ParameterRegistry, path, meta: dict | None = None) -> None:
    """Serialize a parameter registry (float32 payload)."""
    named = {}
    for name, tensor in registry.items():
        if not np.isfinite(tensor.data).all():
            raise NumericError(f"parameter {name!r} holds non-finite values")
        named[name] = tensor.data
    save_tensors(named, path, meta=meta)


def load_checkpoint(path) -> ParameterRegistry:
    """Load a checkpoint into a fresh registry (values upcast to float64)."""
    arrays, _ = load_tensors(path)
    registry = ParameterRegistry()
    for name in sorted(arrays):
        registry.register(name, Tensor(arrays[name], requires_grad=True))
    return registry


def restore_into(registry: ParameterRegistry, path, allow_absent: tuple[str, ...] = ()) -> None:
    """Overwrite an existing registry's values from a checkpoint.

    Names and shapes must match the registry exactly.  ``allow_absent``
    lists name prefixes the checkpoint may omit (fresh task heads when
    fine-tuning from a pretraining checkpoint); those parameters keep their
    initialization.
    """
    arrays, _ = load_tensors(path)
    have = registry.names()
    got = sorted(arrays)
    if have != got:
        offending = sorted(
            name
            for name in set(have) ^ set(got)
            if name in arrays or not name.startswith(allow_absent)
        )
        if offending:
            raise CheckpointError(
                f"checkpoint/registry name mismatch, first offender: {offending[0]!r}"
            )
    for name, tensor in registry.items():
        if name not in arrays:
            continue
        if arrays[name].shape != tensor.data.shape:
            raise CheckpointError(
                f"checkpoint tensor {name!r} has shape {arrays[name].shape}, "
                f"registry expects {tensor.data.shape}"
            )
        tensor.data = np.ascontiguousarray(arrays[name])
