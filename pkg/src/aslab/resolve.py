"""Background resolution: turning per-class score maps into label masks.

Three resolvers share one decision rule — a pixel whose best score falls
below the background threshold is background (label 0), otherwise it
takes the class of its highest score, ties going to the lowest class id:

* ``resolve_basic`` applies the rule per pixel, directly;
* ``resolve_smooth`` first convolves each class map with a normalized
  Gaussian kernel (13x13, sigma 5 by default, reflect padding);
* ``resolve_superpixel`` segments the *image* into superpixels with a
  from-scratch Felzenszwalb graph segmenter, marks a superpixel
  foreground when its mean best-score clears the threshold, and labels
  every pixel of a foreground superpixel with the class whose mean
  score over that superpixel is highest.

The segmenter follows the classic recipe: 8-connected grid graph,
Euclidean channel-space edge weights, edges processed in nondecreasing
weight order (stable, so construction order breaks ties), union-find
with the adaptive merge criterion w <= min(int(A) + k/|A|,
int(B) + k/|B|), then a final pass that absorbs undersized components.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .attribution import ScoreMap
from .errors import ConfigError, ShapeError

SMOOTH_KERNEL_SIZE = 13
SMOOTH_SIGMA = 5.0
SUPERPIXEL_TAU = 0.3
FELZ_K = 100.0
FELZ_SIGMA_PRE = 0.8
FELZ_MIN_SIZE = 20


# ---------------------------------------------------------------------------
# Shared stack handling


def stack_scores(score_maps) -> tuple[np.ndarray, np.ndarray]:
    """Validate a stack of normalized maps; returns (values, class_ids)
    with rows sorted by ascending class id so argmax ties resolve to the
    lowest id."""
    score_maps = list(score_maps)
    if not score_maps:
        raise ConfigError("at least one score map is required")
    shape = None
    for sm in score_maps:
        sm.require_normalized("resolution")
        if not 1 <= sm.class_id <= 254:
            raise ConfigError(
                f"class id must be in [1, 254] (0 is background, 255 ignored), got {sm.class_id}"
            )
        if shape is None:
            shape = sm.values.shape
        elif sm.values.shape != shape:
            raise ShapeError(f"score map shapes differ: {sm.values.shape} vs {shape}")
    ids = [sm.class_id for sm in score_maps]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate class ids in score stack: {sorted(ids)}")
    order = np.argsort(ids, kind="stable")
    values = np.stack([score_maps[i].values for i in order])
    class_ids = np.asarray([ids[i] for i in order], np.int64)
    return values, class_ids


def _check_tau(tau: float) -> float:
    if not 0 < tau <= 1:
        raise ConfigError(f"background threshold must be in (0, 1], got {tau}")
    return float(tau)


def label_from_stack(values: np.ndarray, class_ids: np.ndarray, tau: float) -> np.ndarray:
    best = np.argmax(values, axis=0)  # first max -> lowest class id
    mask = class_ids[best].astype(np.uint8)
    mask[values.max(axis=0) < tau] = 0
    return mask


def resolve_basic(score_maps, tau: float) -> np.ndarray:
    """Per-pixel thresholded argmax; returns a uint8 label mask
    (0 = background)."""
    values, class_ids = stack_scores(score_maps)
    return label_from_stack(values, class_ids, _check_tau(tau))


# ---------------------------------------------------------------------------
# Gaussian smoothing


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Odd-sized 2-D Gaussian kernel, normalized to sum exactly 1."""
    if size < 1 or size % 2 == 0:
        raise ConfigError(f"kernel size must be odd and >= 1, got {size}")
    if not sigma > 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    half = size // 2
    coords = np.arange(size, dtype=np.float64) - half
    g1 = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    kernel = np.outer(g1, g1)
    return kernel / kernel.sum()


def smooth_map(values: np.ndarray, size: int = SMOOTH_KERNEL_SIZE, sigma: float = SMOOTH_SIGMA) -> np.ndarray:
    """Convolve a 2-D map with a normalized Gaussian, reflect padding.

    If the map is smaller than the kernel, the kernel shrinks to the
    largest odd size that fits (with a warning); a 1x1 kernel is the
    identity.
    """
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeError(f"expected a 2-D map, got shape {values.shape}")
    h, w = values.shape
    limit = min(h, w)
    if size > limit:
        shrunk = limit if limit % 2 == 1 else limit - 1
        warnings.warn(
            f"{size}x{size} smoothing kernel does not fit a {h}x{w} map; "
            f"shrinking to {shrunk}x{shrunk}",
            RuntimeWarning,
            stacklevel=2,
        )
        size = shrunk
    kernel = gaussian_kernel(size, sigma)
    half = size // 2
    padded = np.pad(values.astype(np.float64), half, mode="reflect")
    windows = sliding_window_view(padded, (size, size))
    out = np.tensordot(windows, kernel, axes=([2, 3], [0, 1]))
    return out.astype(np.float32)


def resolve_smooth(
    score_maps,
    tau: float,
    size: int = SMOOTH_KERNEL_SIZE,
    sigma: float = SMOOTH_SIGMA,
) -> np.ndarray:
    """Gaussian-smooth each class map, then apply the basic rule."""
    values, class_ids = stack_scores(score_maps)
    tau = _check_tau(tau)
    smoothed = np.stack([smooth_map(values[i], size, sigma) for i in range(len(class_ids))])
    return label_from_stack(smoothed, class_ids, tau)


# ---------------------------------------------------------------------------
# Felzenszwalb graph segmentation


@dataclass(frozen=True)
class SuperpixelMap:
    """Dense segment labels for one image plus the segmentation
    parameters that produced them."""

    labels: np.ndarray  # (H, W) int32, ids dense in [0, count)
    count: int
    k: float
    sigma_pre: float
    min_size: int

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def segment_sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.count)

    def validate(self) -> None:
        ids = np.unique(self.labels)
        if len(ids) != self.count or ids[0] != 0 or ids[-1] != self.count - 1:
            raise ValueError("segment ids are not dense in [0, count)")
        effective = min(self.min_size, self.labels.size)
        if self.segment_sizes().min() < effective:
            raise ValueError("a segment is smaller than min_size")


class _UnionFind:
    def __init__(self, n: int, k: float):
        self.parent = np.arange(n, dtype=np.int64)
        self.size = np.ones(n, dtype=np.int64)
        self.threshold = np.full(n, k, dtype=np.float64)

    def find(self, x: int) -> int:
        root = x
        parent = self.parent
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        """Join two roots; returns the surviving root."""
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        return a


def _grid_edges(channels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """8-connected grid edges with Euclidean channel-space weights.

    Directions are emitted in a fixed order (right, down, down-right,
    down-left), each block row-major, so the stable sort gives equal
    weights a deterministic processing order.
    """
    _, h, w = channels.shape
    index = np.arange(h * w, dtype=np.int64).reshape(h, w)

    def block(di: int, dj: int):
        si = slice(max(0, -di), h - max(0, di))
        sj = slice(max(0, -dj), w - max(0, dj))
        ti = slice(max(0, di), h + min(0, di) if di < 0 else h)
        tj = slice(max(0, dj), w + min(0, dj) if dj < 0 else w)
        diff = channels[:, si, sj] - channels[:, ti, tj]
        wgt = np.sqrt(np.sum(diff**2, axis=0))
        return index[si, sj].ravel(), index[ti, tj].ravel(), wgt.ravel()

    blocks = [block(0, 1), block(1, 0), block(1, 1), block(1, -1)]
    src = np.concatenate([blk[0] for blk in blocks])
    dst = np.concatenate([blk[1] for blk in blocks])
    wgt = np.concatenate([blk[2] for blk in blocks])
    return src, dst, wgt


def felzenszwalb(
    image: np.ndarray,
    k: float = FELZ_K,
    sigma_pre: float = FELZ_SIGMA_PRE,
    min_size: int = FELZ_MIN_SIZE,
) -> SuperpixelMap:
    """Graph-based superpixel segmentation of an image.

    ``image`` is (H, W) or (channels, H, W). ``k`` sets the scale of
    observation (larger -> larger segments), ``sigma_pre`` Gaussian
    pre-smoothing, ``min_size`` the post-pass minimum segment size.
    """
    if not k > 0:
        raise ConfigError(f"k must be > 0, got {k}")
    if min_size < 1:
        raise ConfigError(f"min_size must be >= 1, got {min_size}")
    if not sigma_pre >= 0:
        raise ConfigError(f"sigma_pre must be >= 0, got {sigma_pre}")
    image = np.asarray(image)
    if image.ndim == 2:
        channels = image[None].astype(np.float64)
    elif image.ndim == 3:
        channels = image.astype(np.float64)
    else:
        raise ShapeError(f"expected (H, W) or (C, H, W) image, got {image.shape}")
    if sigma_pre > 0:
        smooth_size = 2 * math.ceil(2 * sigma_pre) + 1
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # kernel shrink on tiny images
            channels = np.stack(
                [smooth_map(c, smooth_size, sigma_pre).astype(np.float64) for c in channels]
            )
    _, h, w = channels.shape

    a, b, wgt = _grid_edges(channels)
    order = np.argsort(wgt, kind="stable")
    uf = _UnionFind(h * w, k)

    for e in order:
        ra, rb = uf.find(int(a[e])), uf.find(int(b[e]))
        if ra == rb:
            continue
        weight = float(wgt[e])
        if weight <= uf.threshold[ra] and weight <= uf.threshold[rb]:
            root = uf.union(ra, rb)
            uf.threshold[root] = weight + k / float(uf.size[root])

    effective_min = min(min_size, h * w)
    for e in order:
        ra, rb = uf.find(int(a[e])), uf.find(int(b[e]))
        if ra != rb and (uf.size[ra] < effective_min or uf.size[rb] < effective_min):
            uf.union(ra, rb)

    roots = np.fromiter((uf.find(i) for i in range(h * w)), np.int64, h * w)
    uniq, first_pos = np.unique(roots, return_index=True)
    rank = np.empty(len(uniq), np.int64)
    rank[np.argsort(first_pos, kind="stable")] = np.arange(len(uniq))
    labels = rank[np.searchsorted(uniq, roots)].astype(np.int32).reshape(h, w)

    out = SuperpixelMap(
        labels=labels, count=len(uniq), k=float(k), sigma_pre=float(sigma_pre), min_size=int(min_size)
    )
    out.validate()
    return out


def resolve_superpixel(
    score_maps,
    image: np.ndarray,
    tau: float = SUPERPIXEL_TAU,
    k: float = FELZ_K,
    sigma_pre: float = FELZ_SIGMA_PRE,
    min_size: int = FELZ_MIN_SIZE,
    superpixels: SuperpixelMap | None = None,
) -> np.ndarray:
    """Superpixel-voted labels: a superpixel is foreground when the mean
    of its pixels' best scores reaches ``tau``; foreground superpixels
    take the class with the highest mean score over the superpixel."""
    values, class_ids = stack_scores(score_maps)
    tau = _check_tau(tau)
    if superpixels is None:
        superpixels = felzenszwalb(image, k=k, sigma_pre=sigma_pre, min_size=min_size)
    if superpixels.labels.shape != values.shape[1:]:
        raise ShapeError(
            f"superpixel map shape {superpixels.labels.shape} != score shape {values.shape[1:]}"
        )
    seg = superpixels.labels.ravel()
    counts = np.bincount(seg, minlength=superpixels.count).astype(np.float64)

    best = values.max(axis=0).ravel().astype(np.float64)
    mean_best = np.bincount(seg, weights=best, minlength=superpixels.count) / counts

    class_means = np.stack(
        [
            np.bincount(seg, weights=values[i].ravel().astype(np.float64), minlength=superpixels.count)
            / counts
            for i in range(len(class_ids))
        ]
    )
    seg_label = class_ids[np.argmax(class_means, axis=0)].astype(np.uint8)
    seg_label[mean_best < tau] = 0
    return seg_label[seg].reshape(superpixels.labels.shape)
