"""Raw sentence/visual feature providers and node-embedding assembly.

Real text and vision backbones are out of scope; their outputs enter
through a provider interface.  Providers are pure: the same document and
region always yield the same raw vector, and raw vectors never carry
gradients.  The learned pieces are the two projections, their biases, and
the global node's [CLS]-style embedding.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterRegistry, Tensor
from .data import DocumentRecord, RegionRecord, load_tensors
from .errors import ConfigError, DataError

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & _MASK64
    return h


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    z ^= z >> 31
    return z, state


def stub_embedding(key: str, d_raw: int, seed: int = 0) -> np.ndarray:
    """Deterministic unit-norm pseudo-random vector for a string key.

    Generator, exactly: state = fnv1a64(utf8(key)) XOR (uint64(seed) *
    0x9E3779B97F4A7C15 mod 2^64); each component draws one splitmix64 step
    from that state, maps the top 53 bits to [0, 1), rescales to [-1, 1);
    the vector is then L2-normalized.
    """
    if d_raw <= 0:
        raise ConfigError(f"stub embedding dimension must be positive, got {d_raw}")
    state = _fnv1a64(key.encode("utf-8")) ^ ((seed & _MASK64) * _GOLDEN & _MASK64)
    vals = np.empty(d_raw, dtype=np.float64)
    for i in range(d_raw):
        z, state = _splitmix64(state)
        vals[i] = (z >> 11) * 2.0**-53 * 2.0 - 1.0
    return vals / np.linalg.norm(vals)


class StubProvider:
    """Hash-seeded stand-in for the text and vision backbones."""

    def __init__(self, text_dim: int = 384, vis_dim: int = 256, seed: int = 0):
        self.text_dim = text_dim
        self.vis_dim = vis_dim
        self.seed = seed
        self._cache: dict[tuple[str, int], np.ndarray] = {}

    def _vector(self, key: str, dim: int) -> np.ndarray:
        hit = self._cache.get((key, dim))
        if hit is None:
            hit = stub_embedding(key, dim, self.seed)
            self._cache[(key, dim)] = hit
        return hit

    def text_raw(self, doc: DocumentRecord, region: RegionRecord) -> np.ndarray:
        return self._vector(region.text, self.text_dim)

    def vis_raw(self, doc: DocumentRecord, region: RegionRecord) -> np.ndarray:
        return self._vector(f"{doc.doc_id}/{region.region_id}", self.vis_dim)

    def vis_global(self, doc: DocumentRecord) -> np.ndarray | None:
        return None  # caller averages the per-region features


class PrecomputedProvider:
    """Raw features read from checkpoint-container files.

    ``path`` may be a single container (tensor names ``text_raw/<region_id>``,
    ``vis_raw/<region_id>``, optional ``vis_raw/__global__``) or a directory
    of per-document containers named ``<doc_id>.emb`` with the same names
    inside.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._tables: dict[str, dict[str, np.ndarray]] = {}
        if not self.path.exists():
            raise DataError(f"precomputed embedding path {self.path} does not exist")
        if self.path.is_file():
            self._tables["__single__"] = load_tensors(self.path)[0]
        text_dims = set()
        vis_dims = set()
        for table in self._iter_tables():
            for name, arr in table.items():
                if name.startswith("text_raw/"):
                    text_dims.add(arr.shape[-1])
                elif name.startswith("vis_raw/"):
                    vis_dims.add(arr.shape[-1])
        if len(text_dims) > 1 or len(vis_dims) > 1:
            raise DataError(f"inconsistent raw dimensions in {self.path}")
        if not text_dims or not vis_dims:
            raise DataError(f"{self.path} holds no text_raw/vis_raw tensors")
        self.text_dim = text_dims.pop()
        self.vis_dim = vis_dims.pop()

    def _iter_tables(self):
        if self.path.is_file():
            yield self._tables["__single__"]
        else:
            for file in sorted(self.path.glob("*.emb")):
                yield self._table_for(file.stem)

    def _table_for(self, doc_id: str) -> dict[str, np.ndarray]:
        if self.path.is_file():
            return self._tables["__single__"]
        if doc_id not in self._tables:
            file = self.path / f"{doc_id}.emb"
            if not file.exists():
                raise DataError(f"no precomputed embeddings for document {doc_id!r}")
            self._tables[doc_id] = load_tensors(file)[0]
        return self._tables[doc_id]

    def _fetch(self, doc: DocumentRecord, kind: str, region_id: str) -> np.ndarray:
        table = self._table_for(doc.doc_id)
        arr = table.get(f"{kind}/{region_id}")
        if arr is None:
            raise DataError(
                f"document {doc.doc_id!r}: missing {kind} feature for region {region_id!r}"
            )
        return arr

    def text_raw(self, doc: DocumentRecord, region: RegionRecord) -> np.ndarray:
        return self._fetch(doc, "text_raw", region.region_id)

    def vis_raw(self, doc: DocumentRecord, region: RegionRecord) -> np.ndarray:
        return self._fetch(doc, "vis_raw", region.region_id)

    def vis_global(self, doc: DocumentRecord) -> np.ndarray | None:
        table = self._table_for(doc.doc_id)
        return table.get("vis_raw/__global__")


@dataclass
class NodeEmbeddings:
    """Per-document embedding matrices, all (n+1, d) with the global node at 0."""

    sent: Tensor  # S = projected text + layout
    sent_pre: Tensor  # S - L: projection output only (row 0 is the [CLS] vector)
    vis: Tensor  # V = projected region visuals + layout
    layout: Tensor  # L


def _raw_matrix(doc: DocumentRecord, fetch, dim: int, kind: str) -> np.ndarray:
    rows = np.empty((doc.n_regions, dim), dtype=np.float64)
    for i, region in enumerate(doc.regions):
        try:
            vec = fetch(doc, region)
        except DataError:
            raise
        except Exception as exc:
            raise DataError(
                f"document {doc.doc_id!r}: {kind} provider failed for region "
                f"{region.region_id!r}: {exc}"
            ) from exc
        if vec.shape != (dim,):
            raise DataError(
                f"document {doc.doc_id!r} region {region.region_id!r}: {kind} feature "
                f"has shape {vec.shape}, expected ({dim},)"
            )
        rows[i] = vec
    return rows


def sentence_embeddings(
    doc: DocumentRecord, provider, layout: Tensor, registry: ParameterRegistry
) -> tuple[Tensor, Tensor]:
    """Project raw text features and add layout; returns (S, pre-layout part).

    Row 0 of the pre-layout part is the learnable global [CLS] vector.  Raw
    provider outputs enter as constants; only the projection and the [CLS]
    vector train.
    """
    raw = _raw_matrix(doc, provider.text_raw, provider.text_dim, "text")
    d = registry["text/proj_w"].data.shape[1]
    projected = ad.add(ad.matmul(Tensor(raw), registry["text/proj_w"]), registry["text/proj_b"])
    pre = ad.concat([ad.reshape(registry["text/cls"], (1, d)), projected], axis=0)
    return ad.add(pre, layout), pre


def visual_embeddings(
    doc: DocumentRecord, provider, layout: Tensor, registry: ParameterRegistry
) -> Tensor:
    """Project raw region visuals and add layout.

    The global row pools the whole image: an explicit provider feature when
    available, otherwise the mean of the per-region raw features.
    """
    raw = _raw_matrix(doc, provider.vis_raw, provider.vis_dim, "visual")
    pooled = provider.vis_global(doc)
    if pooled is None:
        pooled = raw.mean(axis=0)
    elif pooled.shape != (provider.vis_dim,):
        raise DataError(
            f"document {doc.doc_id!r}: global visual feature has shape {pooled.shape}, "
            f"expected ({provider.vis_dim},)"
        )
    stacked = np.concatenate([pooled[None, :], raw], axis=0)
    projected = ad.add(ad.matmul(Tensor(stacked), registry["vis/proj_w"]), registry["vis/proj_b"])
    return ad.add(projected, layout)
