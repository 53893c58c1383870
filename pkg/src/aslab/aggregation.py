"""Saliency aggregation: averaging gradient maps over perturbed inputs.

A single gradient map is noisy; averaging the maps of many perturbed
copies of the image smooths it out. Six perturbation schemes are
provided, all sharing the same reproducibility contract:

* sample ``i`` (0-based) draws from ``derive_generator(base_seed, i)``,
  so samples are independent of each other and of worker count;
* per-sample maps are reduced in ascending sample order with float64
  accumulators, then cast back to float32;
* the result is a fresh raw score map run through the usual
  normalization, so downstream thresholding works unchanged.

The schemes:

``smoothgrad``
    Adds pixelwise Gaussian noise (one ``standard_normal`` draw of the
    image shape per sample, scaled by ``sigma``). ``sigma=0`` reproduces
    the vanilla saliency bit for bit.

``binarymask``
    Multiplies the image by a Bernoulli keep-mask (one ``random`` draw of
    the image shape per sample, kept where ``u < keep_prob``).
    ``keep_prob=1`` reproduces the vanilla saliency bit for bit.

``random_crop``
    Cuts a random sub-rectangle, runs the classifier on it at native
    resolution (the pooling head is size-agnostic), and pastes the
    crop's saliency back at its source location weighted by the
    sigmoid of the crop's class logit. Per crop the draws are, in
    order: area fraction, aspect ratio, row offset, column offset.

``random_patch``
    Divides the image into a ``grid x grid`` lattice of cells (cell side
    = image side // grid, remainder folded into the last row/column) and
    zeroes each cell independently with probability ``p_erase`` (one
    ``random((grid, grid))`` draw per sample, erased where ``u < p``).

``disc_patch``
    Like ``random_patch`` but the erase probability of each cell is
    ``alpha`` times the cell's peak normalized class-evidence score,
    so strongly attributed cells are occluded more often.

``disc_crop``
    Like ``random_crop`` but each crop is kept only with probability
    ``relu(beta - peak normalized class-evidence inside the crop)``;
    the keep draw happens after the geometry draws, so ``beta=1`` with
    an all-zero evidence map consumes the same geometry stream as
    ``random_crop`` and keeps every crop.

Crop-based schemes support two normalizations. ``coverage`` (default)
divides each pixel by the total weight of the crops covering it, so a
pixel seen by one crop reports that crop's saliency exactly and pixels
never covered stay zero. ``strict_mean`` divides the weighted sum by
the sample count, which preserves linearity but darkens rarely covered
pixels.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .attribution import ScoreMap, compute_saliency, normalize_map
from .errors import ConfigError, ShapeError
from .model import Model
from .parallel import parallel_map_ordered
from .rng import derive_generator

AGGREGATION_METHODS = (
    "smoothgrad",
    "binarymask",
    "random_crop",
    "random_patch",
    "disc_crop",
    "disc_patch",
)

_CROP_METHODS = ("random_crop", "disc_crop")


@dataclass(frozen=True)
class AggregationPlan:
    """Validated bundle of aggregation settings.

    Only the fields relevant to ``method`` are consulted; the rest keep
    their defaults. ``n_samples`` is the number of perturbed copies
    (crops, for the crop schemes) and ``base_seed`` the stream root.
    """

    method: str
    n_samples: int
    base_seed: int
    sigma: float = 0.5
    keep_prob: float = 0.90
    p_erase: float = 0.1
    alpha: float = 0.4
    beta: float = 0.7
    grid: int = 16
    area_range: tuple[float, float] = (0.1, 0.5)
    aspect_range: tuple[float, float] = (0.75, 4.0 / 3.0)
    crop_normalization: str = "coverage"

    def validate(self) -> None:
        if self.method not in AGGREGATION_METHODS:
            raise ConfigError(
                f"unknown aggregation method {self.method!r}; "
                f"expected one of {', '.join(AGGREGATION_METHODS)}"
            )
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")
        if not 0 <= self.base_seed < 2**64:
            raise ConfigError("base_seed must be an unsigned 64-bit integer")
        if self.method == "smoothgrad" and not self.sigma >= 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.method == "binarymask" and not 0 < self.keep_prob <= 1:
            raise ConfigError(
                f"keep_prob must be in (0, 1], got {self.keep_prob} "
                "(keep_prob=0 would erase every input)"
            )
        if self.method in ("random_patch", "disc_patch") and self.grid < 1:
            raise ConfigError(f"grid must be >= 1, got {self.grid}")
        if self.method == "random_patch" and not 0 <= self.p_erase <= 1:
            raise ConfigError(f"p_erase must be in [0, 1], got {self.p_erase}")
        if self.method == "disc_patch" and not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.method == "disc_crop" and not 0 < self.beta <= 1:
            raise ConfigError(f"beta must be in (0, 1], got {self.beta}")
        if self.method in _CROP_METHODS:
            lo, hi = self.area_range
            if not (0 < lo <= hi <= 1):
                raise ConfigError(
                    f"area_range must satisfy 0 < lo <= hi <= 1, got {self.area_range}"
                )
            alo, ahi = self.aspect_range
            if not (0 < alo <= ahi):
                raise ConfigError(
                    f"aspect_range must satisfy 0 < lo <= hi, got {self.aspect_range}"
                )
            if self.crop_normalization not in ("coverage", "strict_mean"):
                raise ConfigError(
                    "crop_normalization must be 'coverage' or 'strict_mean', "
                    f"got {self.crop_normalization!r}"
                )


def _mean_of_samples(sample_maps: list[np.ndarray]) -> np.ndarray:
    """Mean in ascending sample order with a float64 accumulator.

    float32 payloads are exact in float64 and the sum of up to 2**29
    identical values stays exact, so averaging n copies of the same map
    returns that map bit for bit.
    """
    acc = np.zeros(sample_maps[0].shape, np.float64)
    for sm in sample_maps:
        acc += sm
    return (acc / len(sample_maps)).astype(np.float32)


def _finish(raw: np.ndarray, class_id: int) -> ScoreMap:
    return normalize_map(ScoreMap(kind="saliency", class_id=class_id, raw=raw))


def _per_sample(fn, n: int, workers: int | None) -> list:
    return parallel_map_ordered(fn, range(n), workers=workers)


# ---------------------------------------------------------------------------
# Full-image perturbation schemes


def smoothgrad(
    model: Model,
    image: np.ndarray,
    class_index: int,
    sigma: float = 0.5,
    n_samples: int = 50,
    base_seed: int = 0,
    label_id: int | None = None,
    workers: int | None = None,
) -> ScoreMap:
    """Average saliency over Gaussian-noised copies of the image."""
    if not sigma >= 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    image = np.asarray(image, np.float32)
    sig = np.float32(sigma)

    def one(i: int) -> np.ndarray:
        gen = derive_generator(base_seed, i)
        noise = gen.standard_normal(image.shape, dtype=np.float32)
        noisy = image + sig * noise
        return compute_saliency(model, noisy, class_index, label_id=label_id).raw

    maps = _per_sample(one, n_samples, workers)
    cid = class_index + 1 if label_id is None else label_id
    return _finish(_mean_of_samples(maps), cid)


def binarymask(
    model: Model,
    image: np.ndarray,
    class_index: int,
    keep_prob: float = 0.90,
    n_samples: int = 50,
    base_seed: int = 0,
    label_id: int | None = None,
    workers: int | None = None,
) -> ScoreMap:
    """Average saliency over Bernoulli-masked copies of the image."""
    if not 0 < keep_prob <= 1:
        raise ConfigError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    image = np.asarray(image, np.float32)

    def one(i: int) -> np.ndarray:
        gen = derive_generator(base_seed, i)
        keep = (gen.random(image.shape) < keep_prob).astype(np.float32)
        return compute_saliency(model, image * keep, class_index, label_id=label_id).raw

    maps = _per_sample(one, n_samples, workers)
    cid = class_index + 1 if label_id is None else label_id
    return _finish(_mean_of_samples(maps), cid)


# ---------------------------------------------------------------------------
# Patch-grid occlusion schemes


def grid_bounds(size: int, grid: int) -> list[tuple[int, int]]:
    """Cell boundaries along one axis: ``grid`` cells of ``size // grid``
    pixels, with the remainder folded into the last cell."""
    if size < grid:
        raise ConfigError(f"image side {size} is smaller than the {grid}-cell grid")
    cell = size // grid
    bounds = [(k * cell, (k + 1) * cell) for k in range(grid - 1)]
    bounds.append(((grid - 1) * cell, size))
    return bounds


def erase_mask(
    gen: np.random.Generator,
    p_grid: np.ndarray,
    bounds_i: list[tuple[int, int]],
    bounds_j: list[tuple[int, int]],
    shape: tuple[int, int],
) -> np.ndarray:
    """Pixel mask (1 keep / 0 erase) from per-cell erase probabilities.

    One ``random((grid, grid))`` draw; cell (r, c) is erased where
    ``u[r, c] < p_grid[r, c]``.
    """
    u = gen.random(p_grid.shape)
    erased = u < p_grid
    mask = np.ones(shape, np.float32)
    for r, (i0, i1) in enumerate(bounds_i):
        for c, (j0, j1) in enumerate(bounds_j):
            if erased[r, c]:
                mask[i0:i1, j0:j1] = 0.0
    return mask


def _patch_aggregate(
    model: Model,
    image: np.ndarray,
    class_index: int,
    p_grid: np.ndarray,
    grid: int,
    n_samples: int,
    base_seed: int,
    label_id: int | None,
    workers: int | None,
) -> ScoreMap:
    image = np.asarray(image, np.float32)
    bounds_i = grid_bounds(image.shape[1], grid)
    bounds_j = grid_bounds(image.shape[2], grid)

    def one(i: int) -> np.ndarray:
        gen = derive_generator(base_seed, i)
        mask = erase_mask(gen, p_grid, bounds_i, bounds_j, image.shape[1:])
        return compute_saliency(model, image * mask, class_index, label_id=label_id).raw

    maps = _per_sample(one, n_samples, workers)
    cid = class_index + 1 if label_id is None else label_id
    return _finish(_mean_of_samples(maps), cid)


def random_patch(
    model: Model,
    image: np.ndarray,
    class_index: int,
    p_erase: float = 0.1,
    grid: int = 16,
    n_samples: int = 50,
    base_seed: int = 0,
    label_id: int | None = None,
    workers: int | None = None,
) -> ScoreMap:
    """Average saliency over copies with random grid cells zeroed."""
    if not 0 <= p_erase <= 1:
        raise ConfigError(f"p_erase must be in [0, 1], got {p_erase}")
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    if grid < 1:
        raise ConfigError(f"grid must be >= 1, got {grid}")
    p_grid = np.full((grid, grid), p_erase, np.float64)
    return _patch_aggregate(
        model, image, class_index, p_grid, grid, n_samples, base_seed, label_id, workers
    )


def _combined_evidence(cam_maps, shape: tuple[int, int]) -> np.ndarray:
    """Pixelwise max of one or more normalized class-evidence maps."""
    if isinstance(cam_maps, ScoreMap):
        cam_maps = [cam_maps]
    cam_maps = list(cam_maps)
    if not cam_maps:
        raise ConfigError("at least one class-evidence map is required")
    for cm in cam_maps:
        cm.require_normalized("evidence-guided aggregation")
        if cm.values.shape != shape:
            raise ShapeError(
                f"evidence map shape {cm.values.shape} != image spatial shape {shape}"
            )
    return np.maximum.reduce([cm.values for cm in cam_maps])


def disc_patch(
    model: Model,
    image: np.ndarray,
    class_index: int,
    cam_maps,
    alpha: float = 0.4,
    grid: int = 16,
    n_samples: int = 50,
    base_seed: int = 0,
    label_id: int | None = None,
    workers: int | None = None,
) -> ScoreMap:
    """Occlude cells with probability proportional to their peak
    normalized class-evidence score (``alpha`` times the cell max)."""
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    if grid < 1:
        raise ConfigError(f"grid must be >= 1, got {grid}")
    image = np.asarray(image, np.float32)
    evidence = _combined_evidence(cam_maps, image.shape[1:])
    bounds_i = grid_bounds(image.shape[1], grid)
    bounds_j = grid_bounds(image.shape[2], grid)
    p_grid = np.empty((grid, grid), np.float64)
    for r, (i0, i1) in enumerate(bounds_i):
        for c, (j0, j1) in enumerate(bounds_j):
            p_grid[r, c] = alpha * float(evidence[i0:i1, j0:j1].max())
    return _patch_aggregate(
        model, image, class_index, p_grid, grid, n_samples, base_seed, label_id, workers
    )


# ---------------------------------------------------------------------------
# Crop-paste schemes


def draw_crop(
    gen: np.random.Generator,
    height: int,
    width: int,
    area_range: tuple[float, float] = (0.1, 0.5),
    aspect_range: tuple[float, float] = (0.75, 4.0 / 3.0),
) -> tuple[int, int, int, int]:
    """Draw one crop rectangle; returns ``(i0, j0, crop_h, crop_w)``.

    Draw order (the reproducibility contract): area fraction, aspect
    ratio (width / height), row offset, column offset. Side lengths are
    rounded to the nearest integer and clamped into [1, side].
    """
    area_frac = gen.uniform(area_range[0], area_range[1])
    aspect = gen.uniform(aspect_range[0], aspect_range[1])
    target = area_frac * height * width
    crop_w = int(round(math.sqrt(target * aspect)))
    crop_h = int(round(math.sqrt(target / aspect)))
    crop_h = min(max(crop_h, 1), height)
    crop_w = min(max(crop_w, 1), width)
    i0 = int(gen.integers(0, height - crop_h + 1))
    j0 = int(gen.integers(0, width - crop_w + 1))
    return i0, j0, crop_h, crop_w


def paste_crops(
    kept: list,
    height: int,
    width: int,
    crop_normalization: str,
    n_samples: int,
) -> np.ndarray:
    """Reduce kept crops ``(i0, j0, weight, saliency)`` onto a canvas.

    ``coverage`` divides each pixel's weighted sum by the total weight of
    the crops covering it (a pixel covered once reports that crop's
    saliency exactly; uncovered pixels stay zero). ``strict_mean``
    divides by the total sample count, counting rejected samples as
    zero maps. Accumulation is float64 in list order, cast to float32.
    """
    acc = np.zeros((height, width), np.float64)
    if crop_normalization == "coverage":
        cover = np.zeros((height, width), np.float64)
        for i0, j0, weight, sal in kept:
            ch, cw = sal.shape
            cover[i0 : i0 + ch, j0 : j0 + cw] += np.float64(weight)
        for i0, j0, weight, sal in kept:
            ch, cw = sal.shape
            frac = np.float64(weight) / cover[i0 : i0 + ch, j0 : j0 + cw]
            acc[i0 : i0 + ch, j0 : j0 + cw] += frac * sal
    else:
        for i0, j0, weight, sal in kept:
            ch, cw = sal.shape
            acc[i0 : i0 + ch, j0 : j0 + cw] += np.float64(weight) * sal
        acc /= n_samples
    return acc.astype(np.float32)


def crop_weight(model: Model, crop: np.ndarray, class_index: int) -> np.float32:
    """Confidence weight of a crop: sigmoid of its class logit."""
    logit = float(model.classify(crop)[class_index])
    # Branch on the sign so exp never overflows (it may underflow to 0,
    # which is the correct limit).
    if logit >= 0:
        w = 1.0 / (1.0 + math.exp(-logit))
    else:
        e = math.exp(logit)
        w = e / (1.0 + e)
    return np.float32(w)


def _crop_aggregate(
    model: Model,
    image: np.ndarray,
    class_index: int,
    n_samples: int,
    base_seed: int,
    area_range: tuple[float, float],
    aspect_range: tuple[float, float],
    crop_normalization: str,
    keep_fn,
    label_id: int | None,
    workers: int | None,
) -> ScoreMap:
    """Shared core of the crop schemes.

    ``keep_fn(gen, i0, j0, ch, cw)`` decides whether a drawn crop
    participates; it runs after the geometry draws so evidence-guided
    thinning never perturbs the geometry stream.
    """
    image = np.asarray(image, np.float32)
    height, width = image.shape[1], image.shape[2]

    def one(i: int):
        gen = derive_generator(base_seed, i)
        i0, j0, ch, cw = draw_crop(gen, height, width, area_range, aspect_range)
        if not keep_fn(gen, i0, j0, ch, cw):
            return None
        crop = image[:, i0 : i0 + ch, j0 : j0 + cw]
        weight = crop_weight(model, crop, class_index)
        sal = compute_saliency(model, crop, class_index, label_id=label_id).raw
        return i0, j0, weight, sal

    results = _per_sample(one, n_samples, workers)
    kept = [r for r in results if r is not None]
    cid = class_index + 1 if label_id is None else label_id

    if not kept:
        warnings.warn(
            "all crops rejected by the evidence threshold; returning a zero map",
            RuntimeWarning,
            stacklevel=2,
        )
        return _finish(np.zeros((height, width), np.float32), cid)

    raw = paste_crops(kept, height, width, crop_normalization, n_samples)
    return _finish(raw, cid)


def random_crop(
    model: Model,
    image: np.ndarray,
    class_index: int,
    n_samples: int = 100,
    base_seed: int = 0,
    area_range: tuple[float, float] = (0.1, 0.5),
    aspect_range: tuple[float, float] = (0.75, 4.0 / 3.0),
    crop_normalization: str = "coverage",
    label_id: int | None = None,
    workers: int | None = None,
) -> ScoreMap:
    """Paste confidence-weighted crop saliencies back onto the image."""
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    if crop_normalization not in ("coverage", "strict_mean"):
        raise ConfigError(f"unknown crop_normalization {crop_normalization!r}")
    return _crop_aggregate(
        model,
        image,
        class_index,
        n_samples,
        base_seed,
        area_range,
        aspect_range,
        crop_normalization,
        keep_fn=lambda gen, i0, j0, ch, cw: True,
        label_id=label_id,
        workers=workers,
    )


def disc_crop(
    model: Model,
    image: np.ndarray,
    class_index: int,
    cam_maps,
    beta: float = 0.7,
    n_samples: int = 100,
    base_seed: int = 0,
    area_range: tuple[float, float] = (0.1, 0.5),
    aspect_range: tuple[float, float] = (0.75, 4.0 / 3.0),
    crop_normalization: str = "coverage",
    label_id: int | None = None,
    workers: int | None = None,
) -> ScoreMap:
    """Crop-paste aggregation that discards crops sitting on strong
    class evidence: a crop survives with probability
    ``max(0, beta - peak normalized evidence inside the crop)``."""
    if not 0 < beta <= 1:
        raise ConfigError(f"beta must be in (0, 1], got {beta}")
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    if crop_normalization not in ("coverage", "strict_mean"):
        raise ConfigError(f"unknown crop_normalization {crop_normalization!r}")
    image32 = np.asarray(image, np.float32)
    evidence = _combined_evidence(cam_maps, image32.shape[1:])

    def keep(gen: np.random.Generator, i0: int, j0: int, ch: int, cw: int) -> bool:
        peak = float(evidence[i0 : i0 + ch, j0 : j0 + cw].max())
        p_keep = max(0.0, beta - peak)
        return bool(gen.random() < p_keep)

    return _crop_aggregate(
        model,
        image32,
        class_index,
        n_samples,
        base_seed,
        area_range,
        aspect_range,
        crop_normalization,
        keep_fn=keep,
        label_id=label_id,
        workers=workers,
    )


def aggregate(
    model: Model,
    image: np.ndarray,
    class_index: int,
    plan: AggregationPlan,
    cam_maps=None,
    label_id: int | None = None,
    workers: int | None = None,
) -> ScoreMap:
    """Run the aggregation described by ``plan``.

    The evidence-guided schemes (``disc_patch``, ``disc_crop``) require
    ``cam_maps``: one normalized class-evidence map, or a sequence of
    them (their pixelwise max is used).
    """
    plan.validate()
    common = dict(
        n_samples=plan.n_samples,
        base_seed=plan.base_seed,
        label_id=label_id,
        workers=workers,
    )
    if plan.method == "smoothgrad":
        return smoothgrad(model, image, class_index, sigma=plan.sigma, **common)
    if plan.method == "binarymask":
        return binarymask(model, image, class_index, keep_prob=plan.keep_prob, **common)
    if plan.method == "random_patch":
        return random_patch(
            model, image, class_index, p_erase=plan.p_erase, grid=plan.grid, **common
        )
    if plan.method == "disc_patch":
        if cam_maps is None:
            raise ConfigError("disc_patch requires class-evidence maps")
        return disc_patch(
            model, image, class_index, cam_maps, alpha=plan.alpha, grid=plan.grid, **common
        )
    crop_kwargs = dict(
        area_range=plan.area_range,
        aspect_range=plan.aspect_range,
        crop_normalization=plan.crop_normalization,
        **common,
    )
    if plan.method == "random_crop":
        return random_crop(model, image, class_index, **crop_kwargs)
    if cam_maps is None:
        raise ConfigError("disc_crop requires class-evidence maps")
    return disc_crop(model, image, class_index, cam_maps, beta=plan.beta, **crop_kwargs)
