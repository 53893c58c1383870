"""Class activation maps, gradient saliency maps, and region partitions.

A class activation map (CAM) projects the final activation stack A
(C, H, W) onto the class weight row w_c of the dense head: at every
pixel the score is the dot product w_c . A[:, i, j]. Because the same
head also produces the logit S_c = w_c . gap(A) + b_c, the map says
exactly which pixels push that logit up. Scores are clamped at zero
and scaled by their maximum Z into [0, 1].

A saliency map is the elementwise absolute input gradient |dS_c/dI|,
reduced over image channels by max, scaled by its own maximum.

Channel projections are accumulated channel-by-channel in index order,
in float32, so recomputing any single pixel's score with
:func:`dot_ordered` reproduces the map value bit for bit. Downstream
consumers (partitions here, the separating-plane geometry elsewhere)
rely on that exactness; don't replace the loop with a BLAS reduction.

Partitions split the ground-truth pixels of one class by thresholding
the normalized map: CAM >= 0.25 marks the discriminative region,
saliency >= 0.15 the high-sensitivity region; the complements within
the class's ground-truth pixels are exact. The >= comparison (boundary
pixels belong to the upper region) is shared with the separating-plane
geometry, which turns the same comparison into a signed distance.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import ShapeError
from .model import Model

# Normalized-map thresholds for the region partitions.
TAU_CAM = 0.25
TAU_SM = 0.15


@dataclass(frozen=True)
class ScoreMap:
    """A per-pixel attribution map for one class.

    ``raw`` keeps the pre-normalization scores (projections can be
    negative, gradient magnitudes cannot). ``values`` holds the
    [0, 1]-normalized scores once :func:`normalize_map` has run — or a
    zero placeholder when the map is degenerate (normalizer z <= 0).
    ``class_id`` is the mask-space id (digit + 1 for the digit corpus),
    not the logit index.
    """

    kind: str
    class_id: int
    raw: np.ndarray
    values: np.ndarray | None = None
    z: float | None = None
    degenerate: bool = False

    @property
    def normalized(self) -> bool:
        return self.values is not None

    def require_normalized(self, what: str) -> None:
        if not self.normalized:
            raise ValueError(f"{what} needs a normalized map; call normalize_map first")


def channel_projection(activations: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """w . A[:, i, j] for every pixel, accumulated in channel order.

    float32 in, float32 out; the accumulation order is part of the
    contract (see module docstring).
    """
    if activations.ndim != 3:
        raise ShapeError(f"activations must be (C, H, W), got {activations.shape}")
    if weights.shape != (activations.shape[0],):
        raise ShapeError(
            f"weights {weights.shape} do not match {activations.shape[0]} channels"
        )
    activations = np.ascontiguousarray(activations, dtype=np.float32)
    weights = np.asarray(weights, dtype=np.float32)
    out = np.zeros(activations.shape[1:], dtype=np.float32)
    for c in range(weights.shape[0]):
        out += weights[c] * activations[c]
    return out


def dot_ordered(weights: np.ndarray, vector: np.ndarray) -> np.float32:
    """Scalar twin of :func:`channel_projection`: same products, same
    additions, same order, so it reproduces any map pixel exactly."""
    weights = np.asarray(weights, dtype=np.float32)
    vector = np.asarray(vector, dtype=np.float32)
    if weights.shape != vector.shape or weights.ndim != 1:
        raise ShapeError(f"need matching vectors, got {weights.shape} and {vector.shape}")
    acc = np.float32(0.0)
    for c in range(weights.shape[0]):
        acc += weights[c] * vector[c]
    return acc


def normalize_map(score_map: ScoreMap) -> ScoreMap:
    """Clamp (CAMs only — gradient magnitudes are already >= 0) and
    scale by the maximum. z <= 0 flags the map degenerate and leaves a
    zero placeholder in ``values`` so thresholds read it as empty."""
    raw = score_map.raw
    scores = np.maximum(raw, np.float32(0.0)) if score_map.kind == "cam" else raw
    z = float(scores.max()) if scores.size else 0.0
    if z <= 0.0:
        return replace(
            score_map, values=np.zeros_like(raw, dtype=np.float32), z=z, degenerate=True
        )
    return replace(score_map, values=(scores / np.float32(z)).astype(np.float32), z=z)


def cam_from_activations(
    activations: np.ndarray, weights: np.ndarray, class_id: int
) -> ScoreMap:
    """Normalized CAM from a precomputed activation stack."""
    raw = channel_projection(activations, weights)
    return normalize_map(ScoreMap(kind="cam", class_id=class_id, raw=raw))


def compute_cam(
    model: Model, image: np.ndarray, class_index: int, label_id: int | None = None
) -> ScoreMap:
    """Normalized CAM for ``class_index`` (logit space). ``label_id``
    overrides the stored mask-space id; default is class_index + 1."""
    activations = model.activation_map(image)
    weights = model.class_weights(class_index)
    class_id = class_index + 1 if label_id is None else label_id
    return cam_from_activations(activations, weights, class_id)


def saliency_from_gradient(gradient: np.ndarray, class_id: int) -> ScoreMap:
    """Normalized saliency from a precomputed input gradient (Cin, H, W):
    abs, then max over image channels."""
    if gradient.ndim != 3:
        raise ShapeError(f"gradient must be (Cin, H, W), got {gradient.shape}")
    raw = np.abs(gradient.astype(np.float32)).max(axis=0)
    return normalize_map(ScoreMap(kind="saliency", class_id=class_id, raw=raw))


def compute_saliency(
    model: Model, image: np.ndarray, class_index: int, label_id: int | None = None
) -> ScoreMap:
    """Normalized saliency map |dS_c/dI| for ``class_index``."""
    gradient = model.input_gradient(image, class_index)
    class_id = class_index + 1 if label_id is None else label_id
    return saliency_from_gradient(gradient, class_id)


# ------------------------------------------------------------- partitions


def _class_pixels(score_map: ScoreMap, mask: np.ndarray) -> np.ndarray:
    if mask.shape != score_map.raw.shape:
        raise ShapeError(f"mask {mask.shape} does not match map {score_map.raw.shape}")
    return mask == score_map.class_id


def partition_dr_ndr(
    cam: ScoreMap, mask: np.ndarray, tau: float = TAU_CAM
) -> tuple[np.ndarray, np.ndarray]:
    """Split the class's ground-truth pixels into the discriminative
    region (normalized CAM >= tau) and its exact complement. Returns
    (dr, ndr) boolean masks."""
    cam.require_normalized("partition_dr_ndr")
    if cam.kind != "cam":
        raise ValueError(f"partition_dr_ndr wants a cam map, got {cam.kind!r}")
    gt = _class_pixels(cam, mask)
    above = cam.values >= np.float32(tau)
    return gt & above, gt & ~above


def partition_hsr_lsr(
    saliency: ScoreMap, mask: np.ndarray, tau: float = TAU_SM
) -> tuple[np.ndarray, np.ndarray]:
    """Split the class's ground-truth pixels into high-sensitivity
    (normalized saliency >= tau) and low-sensitivity regions."""
    saliency.require_normalized("partition_hsr_lsr")
    if saliency.kind != "saliency":
        raise ValueError(f"partition_hsr_lsr wants a saliency map, got {saliency.kind!r}")
    gt = _class_pixels(saliency, mask)
    above = saliency.values >= np.float32(tau)
    return gt & above, gt & ~above


def partition_to_mask(region_a: np.ndarray, region_b: np.ndarray) -> np.ndarray:
    """uint8 visualization mask: 1 where region_a, 2 where region_b,
    0 elsewhere. The regions must be disjoint."""
    if region_a.shape != region_b.shape:
        raise ShapeError(f"regions differ: {region_a.shape} vs {region_b.shape}")
    if (region_a & region_b).any():
        raise ValueError("partition regions overlap")
    out = np.zeros(region_a.shape, np.uint8)
    out[region_a] = 1
    out[region_b] = 2
    return out
