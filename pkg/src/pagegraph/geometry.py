"""Box normalization, layout-feature embedding, and 2D relative position bias.

Coordinates are normalized to integers in [0, 512].  A region's layout
vector concatenates six coordinate-feature lookups: the three x-features
(x0, x2, w) through the x-table and the three y-features (y0, y2, h)
through the y-table, x-block first.  Relative position between two boxes
is encoded per corner as sinusoids of the coordinate differences, then
projected by four learned corner matrices and summed.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

GRID = 512  # normalized coordinate range is the inclusive integer grid [0, GRID]

# corner order is clockwise from the upper left: 0=tl, 1=tr, 2=br, 3=bl
CORNERS = ("tl", "tr", "br", "bl")


@dataclass(frozen=True)
class BoundingBox:
    """Four vertices in image pixels, clockwise from the upper-left corner."""

    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.vertices) != 4:
            raise ShapeError(f"bounding box needs 4 vertices, got {len(self.vertices)}")

    @classmethod
    def from_corners(cls, x0: float, y0: float, x2: float, y2: float) -> "BoundingBox":
        """Axis-aligned box from its upper-left and lower-right corners."""
        return cls(((x0, y0), (x2, y0), (x2, y2), (x0, y2)))

    @classmethod
    def from_quad(cls, quad) -> "BoundingBox":
        vals = [float(v) for v in quad]
        if len(vals) != 8:
            raise ShapeError(f"quad needs 8 values, got {len(vals)}")
        return cls(tuple((vals[2 * i], vals[2 * i + 1]) for i in range(4)))

    @property
    def width(self) -> float:
        return self.vertices[2][0] - self.vertices[0][0]

    @property
    def height(self) -> float:
        return self.vertices[2][1] - self.vertices[0][1]


@dataclass(frozen=True)
class NormalizedBox:
    """Box vertices on the integer grid [0, 512], with derived width/height."""

    vertices: tuple[tuple[int, int], ...]

    @property
    def width(self) -> int:
        return self.vertices[2][0] - self.vertices[0][0]

    @property
    def height(self) -> int:
        return self.vertices[2][1] - self.vertices[0][1]

    def features(self) -> tuple[int, int, int, int, int, int]:
        """The six-feature layout tuple (x0, y0, x2, y2, w, h)."""
        (x0, y0), _, (x2, y2), _ = self.vertices
        return (x0, y0, x2, y2, self.width, self.height)


def full_page_box() -> NormalizedBox:
    """The whole-page box used for the global node: (0,0)-(512,512)."""
    return NormalizedBox(((0, 0), (GRID, 0), (GRID, GRID), (0, GRID)))


def _round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def normalize_box(box: BoundingBox, image_size: tuple[float, float]) -> NormalizedBox:
    """Scale pixel coordinates onto the [0, 512] grid and clamp.

    Rounding is half-away-from-zero.  A box lying outside the image may
    collapse to zero area after clamping; that is allowed but warned.
    """
    w_img, h_img = image_size
    if w_img <= 0 or h_img <= 0:
        raise ConfigError(f"image size must be positive, got ({w_img}, {h_img})")
    out_of_image = any(
        not (0 <= x <= w_img and 0 <= y <= h_img) for x, y in box.vertices
    )
    verts = tuple(
        (
            min(max(_round_half_away(x * GRID / w_img), 0), GRID),
            min(max(_round_half_away(y * GRID / h_img), 0), GRID),
        )
        for x, y in box.vertices
    )
    nbox = NormalizedBox(verts)
    if out_of_image and (nbox.width == 0 or nbox.height == 0):
        warnings.warn(
            f"box outside image collapsed to zero area after clamping: {box.vertices}",
            stacklevel=2,
        )
    return nbox


def layout_embed(features, emb_x: Tensor, emb_y: Tensor) -> Tensor:
    """Embed one six-feature tuple; returns a vector of length 6 * table width."""
    return layout_embed_rows([features], emb_x, emb_y)[0]


def layout_embed_rows(feature_rows, emb_x: Tensor, emb_y: Tensor) -> Tensor:
    """Embed many six-feature tuples into an (n, d) layout matrix.

    Row layout is [Ex(x0); Ex(x2); Ex(w); Ey(y0); Ey(y2); Ey(h)].
    """
    feats = np.asarray(feature_rows, dtype=np.int64)
    if feats.ndim != 2 or feats.shape[1] != 6:
        raise ShapeError(f"expected (n, 6) layout features, got {feats.shape}")
    x_idx = feats[:, (0, 2, 4)].reshape(-1)  # x0, x2, w
    y_idx = feats[:, (1, 3, 5)].reshape(-1)  # y0, y2, h
    n = feats.shape[0]
    dx = emb_x.data.shape[1]
    x_part = ad.reshape(ad.embedding_lookup(emb_x, x_idx), (n, 3 * dx))
    y_part = ad.reshape(ad.embedding_lookup(emb_y, y_idx), (n, 3 * emb_y.data.shape[1]))
    return ad.concat([x_part, y_part], axis=1)


@functools.lru_cache(maxsize=8)
def _sinusoid_table(d_s: int) -> np.ndarray:
    """Sinusoids of every grid delta in [-512, 512]; row index is delta + 512."""
    deltas = np.arange(-GRID, GRID + 1, dtype=np.float64)
    return _sinusoid_of(deltas, d_s)


def _sinusoid_of(deltas: np.ndarray, d_s: int) -> np.ndarray:
    t = np.arange(d_s // 2, dtype=np.float64)
    freq = 1.0 / np.power(10000.0, 2.0 * t / d_s)
    angles = deltas[:, None] * freq[None, :]
    out = np.empty((deltas.shape[0], d_s), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def sinusoidal_encode(delta: int, d_s: int) -> np.ndarray:
    """Interleaved sin/cos encoding of an integer offset; d_s must be even."""
    if d_s % 2 != 0:
        raise ConfigError(f"sinusoid length must be even, got {d_s}")
    if -GRID <= delta <= GRID:
        return _sinusoid_table(d_s)[delta + GRID].copy()
    return _sinusoid_of(np.asarray([float(delta)]), d_s)[0]


def corner_pair_features(
    boxes: list[NormalizedBox], rows: np.ndarray, cols: np.ndarray, d_s: int
) -> dict[str, np.ndarray]:
    """Per-corner sinusoid features for the ordered node pairs (rows, cols).

    For corner v, the feature of pair (i, j) is
    [sinusoid(x_iv - x_jv); sinusoid(y_iv - y_jv)], length 2 * d_s.
    Only the listed pairs are materialized, keeping cost at O(pairs).
    """
    table = _sinusoid_table(d_s)
    xs = np.array([[v[0] for v in b.vertices] for b in boxes], dtype=np.int64)
    ys = np.array([[v[1] for v in b.vertices] for b in boxes], dtype=np.int64)
    feats = {}
    for v, name in enumerate(CORNERS):
        dx = xs[rows, v] - xs[cols, v]
        dy = ys[rows, v] - ys[cols, v]
        feats[name] = np.concatenate([table[dx + GRID], table[dy + GRID]], axis=1)
    return feats


def project_pair_bias(feats: dict[str, np.ndarray], corner_weights: dict[str, Tensor]) -> Tensor:
    """Sum of the four learned corner projections, one (pairs, d) matrix."""
    parts = [ad.matmul(Tensor(feats[name]), corner_weights[name]) for name in CORNERS]
    out = parts[0]
    for p in parts[1:]:
        out = ad.add(out, p)
    return out


def relative_position_bias(
    box_i: NormalizedBox, box_j: NormalizedBox, corner_weights: dict[str, Tensor]
) -> Tensor:
    """Bias vector for one ordered box pair (model dimension d)."""
    d_s = corner_weights["tl"].data.shape[0] // 2
    feats = corner_pair_features(
        [box_i, box_j], np.array([0]), np.array([1]), d_s
    )
    return ad.reshape(project_pair_bias(feats, corner_weights), (-1,))
