"""Separating-plane geometry behind the attribution thresholds.

Across one image, each pixel (i, j) owns two k-vectors: its activation
column a = A[:, i, j], and a' = the gradient of the pooled channel
vector GAP(A) with respect to that input pixel. Both live in R^k, and
both interact with the same dense-head weight row w_c:

* the normalized CAM test ``w.a / Z >= tau_cam`` draws a single
  hyperplane ``(w/Z).a = tau_cam`` through activation space; the signed
  Euclidean distance of a pixel to it is ``(w.a/Z - tau_cam) /
  ||w/Z||``, positive exactly on the discriminative side;
* the normalized saliency test ``|w.a'| / Z_sm >= tau_sm`` draws a
  *pair* of parallel hyperplanes ``(w/Z_sm).a' = +-tau_sm`` through
  gradient space; the signed distance to the nearest one is
  ``(|w.a'|/Z_sm - tau_sm) / ||w/Z_sm||``, positive exactly outside the
  slab, i.e. on the high-sensitivity side.

The sign agreement with the partitions is enforced bit-exactly, not at
a tolerance. Three ingredients make that possible:

1. the per-pixel score is accumulated with the identical float32
   operations the map itself used (``dot_ordered`` mirrors
   ``channel_projection``; the saliency path reuses the map's own raw
   scores, since a second backward pass would re-associate the same
   sum);
2. IEEE-754 guarantees sign(x - y) matches the ordering of x and y for
   finite floats (gradual underflow keeps x - y nonzero when x != y),
   so subtracting the threshold from the identical quotient preserves
   the comparison;
3. the final division by the slope norm runs in float64 and, in the
   (astronomically unlikely) event the float32 result would flush a
   nonzero numerator to zero, nudges it to the smallest subnormal of
   the correct sign.
"""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attribution import (
    TAU_CAM,
    TAU_SM,
    cam_from_activations,
    dot_ordered,
    partition_dr_ndr,
    partition_hsr_lsr,
    saliency_from_gradient,
)
from .errors import ConfigError, DegenerateMapError, ShapeError
from .model import Model

QUADRANTS = ("HSR-DR", "LSR-DR", "HSR-NDR", "LSR-NDR")

_TINY32 = np.float32(np.finfo(np.float32).smallest_subnormal)


def _check_tau(tau: float, name: str) -> None:
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"{name} must lie in (0, 1), got {tau}")


def _slope_norm(weights: np.ndarray, z: float) -> float:
    """||w/z||_2 in float64; this is the gradient magnitude of the
    normalized score as a function of the pixel vector."""
    if z <= 0:
        raise DegenerateMapError(f"normalizer z={z} must be positive")
    norm = float(np.linalg.norm(np.asarray(weights, np.float64) / float(z)))
    if not np.isfinite(norm) or norm == 0.0:
        raise DegenerateMapError(f"plane slope norm is {norm}; weights give no plane")
    return norm


def _distances(raw_scores: np.ndarray, z: float, tau: float, norm: float) -> np.ndarray:
    """(raw/z - tau)/norm with the sign of (raw/z - tau) kept exact.

    raw/z runs in float32 — the identical operation normalization used,
    so the numerator's zero set matches the >= comparison against tau.
    """
    q = np.asarray(raw_scores, np.float32) / np.float32(z)
    num = q - np.float32(tau)
    d = (num.astype(np.float64) / norm).astype(np.float32)
    lost = (d == 0) & (num != 0)
    if lost.any():
        d[lost] = np.copysign(_TINY32, num[lost])
    return d


def cam_signed_distance(
    activation: np.ndarray, weights: np.ndarray, z: float, tau_cam: float = TAU_CAM
) -> np.float32:
    """Signed distance of one pixel's activation column to the CAM
    plane; >= 0 exactly when the partition puts the pixel in DR."""
    _check_tau(tau_cam, "tau_cam")
    norm = _slope_norm(weights, z)
    raw = dot_ordered(weights, activation)
    return _distances(raw.reshape(1), z, tau_cam, norm)[0]


def sm_signed_distance(
    gap_input_grad: np.ndarray,
    weights: np.ndarray,
    z_sm: float,
    tau_sm: float = TAU_SM,
) -> np.float32:
    """Signed distance of one pixel's a' vector to the nearer of the
    two saliency planes; >= 0 on the high-sensitivity side.

    ``gap_input_grad`` is (k,) for single-channel inputs or (k, Cin);
    multi-channel pixels score with the channel of largest |w.a'|,
    matching the channel-max in the saliency map itself.
    """
    _check_tau(tau_sm, "tau_sm")
    norm = _slope_norm(weights, z_sm)
    a_prime = np.asarray(gap_input_grad, np.float32)
    if a_prime.ndim == 1:
        a_prime = a_prime[:, None]
    if a_prime.ndim != 2 or a_prime.shape[0] != np.asarray(weights).shape[0]:
        raise ShapeError(f"a' must be (k,) or (k, channels), got {gap_input_grad.shape}")
    score = np.float32(0.0)
    for ch in range(a_prime.shape[1]):
        score = np.maximum(score, np.abs(dot_ordered(weights, a_prime[:, ch])))
    return _distances(score.reshape(1), z_sm, tau_sm, norm)[0]


def gap_input_jacobian(model: Model, image: np.ndarray) -> np.ndarray:
    """a' for every input pixel, as (k, Cin, H, W): row ch is the
    gradient of GAP channel ch with respect to the image."""
    return model.gap_channel_jacobian(image)


# ------------------------------------------------------------ decomposition


@dataclass(frozen=True)
class PixelGeometry:
    """One ground-truth pixel's view of the two spaces."""

    pixel: tuple[int, int]
    activation: np.ndarray
    gap_input_grad: np.ndarray
    cam_dist: np.float32
    sm_dist: np.float32
    quadrant: str


@dataclass(frozen=True)
class QuadrantReport:
    class_id: int
    tau_cam: float
    tau_sm: float
    total: int
    counts: dict
    fractions: dict

    def to_json(self) -> str:
        return json.dumps(
            {
                "class_id": self.class_id,
                "tau_cam": self.tau_cam,
                "tau_sm": self.tau_sm,
                "total_gt_pixels": self.total,
                "counts": {q: self.counts[q] for q in QUADRANTS},
                "fractions": {q: self.fractions[q] for q in QUADRANTS},
            },
            indent=2,
        )


@dataclass(frozen=True)
class QuadrantAnalysis:
    """Per-pixel geometry arrays (row-major pixel order) plus the
    aggregate report."""

    report: QuadrantReport
    pixels_i: np.ndarray
    pixels_j: np.ndarray
    cam_dist: np.ndarray
    sm_dist: np.ndarray
    quadrant_index: np.ndarray  # index into QUADRANTS
    activations: np.ndarray  # (n, k)
    gap_input_grads: np.ndarray  # (n, k)

    def __len__(self) -> int:
        return self.pixels_i.shape[0]

    def geometry(self, n: int) -> PixelGeometry:
        return PixelGeometry(
            pixel=(int(self.pixels_i[n]), int(self.pixels_j[n])),
            activation=self.activations[n],
            gap_input_grad=self.gap_input_grads[n],
            cam_dist=self.cam_dist[n],
            sm_dist=self.sm_dist[n],
            quadrant=QUADRANTS[self.quadrant_index[n]],
        )

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pixel_i", "pixel_j", "cam_dist", "sm_dist", "quadrant"])
            for n in range(len(self)):
                writer.writerow(
                    [
                        int(self.pixels_i[n]),
                        int(self.pixels_j[n]),
                        # 9 significant digits round-trip float32 exactly
                        f"{float(self.cam_dist[n]):.9g}",
                        f"{float(self.sm_dist[n]):.9g}",
                        QUADRANTS[self.quadrant_index[n]],
                    ]
                )


def quadrant_decomposition(
    model: Model,
    image: np.ndarray,
    gt_mask: np.ndarray,
    class_index: int,
    label_id: int | None = None,
    tau_cam: float = TAU_CAM,
    tau_sm: float = TAU_SM,
) -> QuadrantAnalysis:
    """Cross the DR/NDR and HSR/LSR splits over one class's ground
    truth and attach each pixel's signed distances.

    The distances reuse the exact raw arrays the partitions
    thresholded, so the sign/membership agreement is structural.
    """
    _check_tau(tau_cam, "tau_cam")
    _check_tau(tau_sm, "tau_sm")
    class_id = class_index + 1 if label_id is None else label_id
    gt = gt_mask == class_id
    if not gt.any():
        raise ConfigError(f"class id {class_id} absent from ground truth")

    weights = model.class_weights(class_index)
    activations = model.activation_map(image)
    if activations.shape[1:] != gt_mask.shape:
        raise ShapeError(
            f"ground truth {gt_mask.shape} does not match map {activations.shape[1:]}"
        )
    cam = cam_from_activations(activations, weights, class_id)
    gradient = model.input_gradient(image, class_index)
    sal = saliency_from_gradient(gradient, class_id)
    if cam.degenerate:
        raise DegenerateMapError("cam normalizer Z <= 0: no plane to measure against")
    if sal.degenerate:
        raise DegenerateMapError("saliency normalizer Z_sm <= 0: gradient vanished")

    dr, _ = partition_dr_ndr(cam, gt_mask, tau_cam)
    hsr, _ = partition_hsr_lsr(sal, gt_mask, tau_sm)
    cam_d = _distances(cam.raw, cam.z, tau_cam, _slope_norm(weights, cam.z))
    sm_d = _distances(sal.raw, sal.z, tau_sm, _slope_norm(weights, sal.z))

    ii, jj = np.nonzero(gt)
    qidx = (~hsr[gt]).astype(np.int8) * 2 + (~dr[gt]).astype(np.int8)
    counts = {q: int((qidx == n).sum()) for n, q in enumerate(QUADRANTS)}
    total = int(gt.sum())
    report = QuadrantReport(
        class_id=class_id,
        tau_cam=tau_cam,
        tau_sm=tau_sm,
        total=total,
        counts=counts,
        fractions={q: counts[q] / total for q in QUADRANTS},
    )

    jac = gap_input_jacobian(model, image)
    best_channel = np.abs(gradient).argmax(axis=0)
    a_prime = jac[:, best_channel[ii, jj], ii, jj].T

    return QuadrantAnalysis(
        report=report,
        pixels_i=ii.astype(np.int32),
        pixels_j=jj.astype(np.int32),
        cam_dist=cam_d[ii, jj],
        sm_dist=sm_d[ii, jj],
        quadrant_index=qidx,
        activations=np.ascontiguousarray(activations[:, ii, jj].T),
        gap_input_grads=np.ascontiguousarray(a_prime),
    )
