"""Dataset-scale experiment drivers.

Everything here works on lists of :class:`~aslab.data.SegSample` and a
trained :class:`~aslab.model.Model`, and is shared between the command
line and the test suite. The drivers fan out across whole images with
:func:`~aslab.parallel.parallel_map_ordered`, so results are
byte-identical for any worker count.

Such reproducibility also needs stable per-image randomness: when an
aggregation plan is applied to a dataset, sample ``i`` runs with the
base seed re-derived from the plan's seed and the sample's *stored
index* (not its position in the current list), so subsets and
different worker counts see the same streams.

Metric conventions follow the digit corpus: one foreground class per
image, mask ids ``digit + 1``, and ``num_classes = model classes + 1``
to make room for the background row.
"""

from dataclasses import replace

import numpy as np

from .aggregation import AggregationPlan, aggregate
from .attribution import TAU_CAM, TAU_SM, ScoreMap, compute_cam, compute_saliency, partition_dr_ndr
from .errors import AslabError, ConfigError, TrainingDiverged
from .metrics import (
    TAU_GRID,
    ConfusionAccumulator,
    MetricsReport,
    SweepResult,
    build_report,
    threshold_sweep,
)
from .model import Model, TrainConfig, digit_network
from .parallel import parallel_map_ordered
from .resolve import (
    FELZ_K,
    FELZ_MIN_SIZE,
    FELZ_SIGMA_PRE,
    SMOOTH_KERNEL_SIZE,
    SMOOTH_SIGMA,
    resolve_basic,
    resolve_smooth,
    resolve_superpixel,
)
from .rng import derive_seed

METHODS = ("cam", "saliency", "aggregate")
RESOLVERS = ("basic", "smooth", "superpixel")


def num_label_classes(model: Model) -> int:
    """Label-space size for metrics: the model's classes plus background."""
    return model.spec.num_classes + 1


def _evidence_maps(model: Model, image: np.ndarray) -> list[ScoreMap]:
    """CAMs of every class, for the discrepancy-guided schemes."""
    return [compute_cam(model, image, ci) for ci in range(model.spec.num_classes)]


def score_for_sample(model, sample, method: str, plan: AggregationPlan | None = None, workers=None):
    """One sample's attribution map for the sample's own class.

    ``method`` is one of :data:`METHODS`; ``aggregate`` needs a plan,
    whose base seed is re-derived per sample from ``sample.index``.
    """
    if method == "cam":
        return compute_cam(model, sample.image, sample.label, label_id=sample.mask_id)
    if method == "saliency":
        return compute_saliency(model, sample.image, sample.label, label_id=sample.mask_id)
    if method == "aggregate":
        if plan is None:
            raise ConfigError("method 'aggregate' needs an aggregation plan")
        per_image = replace(plan, base_seed=derive_seed(plan.base_seed, sample.index))
        evidence = None
        if plan.method in ("disc_crop", "disc_patch"):
            evidence = _evidence_maps(model, sample.image)
        return aggregate(
            model,
            sample.image,
            sample.label,
            per_image,
            cam_maps=evidence,
            label_id=sample.mask_id,
            workers=workers,
        )
    raise ConfigError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")


def dataset_scores(model, samples, method: str, plan=None, workers=None) -> list:
    """Attribution maps for every sample, in sample order.

    The fan-out is across images; any parallelism inside a single
    aggregation is pinned to one worker so the two pools don't nest.
    """
    return parallel_map_ordered(
        lambda s: score_for_sample(model, s, method, plan=plan, workers=1),
        samples,
        workers=workers,
    )


def eval_inputs(model, samples, method: str, plan=None, dr_tau: float = TAU_CAM, workers=None):
    """(stacks, gts, partitions) triples ready for metric evaluation.

    Each stack holds the sample's single-class map; the DR/NDR
    partition always comes from the model's own CAM at ``dr_tau``,
    whatever method produced the evaluated map.
    """

    def one(sample):
        score = score_for_sample(model, sample, method, plan=plan, workers=1)
        if method == "cam":
            cam = score
        else:
            cam = compute_cam(model, sample.image, sample.label, label_id=sample.mask_id)
        dr, ndr = partition_dr_ndr(cam, sample.mask, dr_tau)
        return [score], sample.mask, {sample.mask_id: (dr, ndr)}

    rows = parallel_map_ordered(one, samples, workers=workers)
    stacks = [r[0] for r in rows]
    gts = [r[1] for r in rows]
    partitions = [r[2] for r in rows]
    return stacks, gts, partitions


def sweep_method(
    model,
    samples,
    method: str,
    plan=None,
    grid=TAU_GRID,
    dr_tau: float = TAU_CAM,
    workers=None,
    naive: bool = False,
) -> SweepResult:
    """Best-threshold sweep of one attribution method over a dataset."""
    stacks, gts, partitions = eval_inputs(model, samples, method, plan=plan, dr_tau=dr_tau, workers=workers)
    return threshold_sweep(
        stacks, gts, num_label_classes(model), grid=grid, dr_partitions=partitions, naive=naive
    )


def evaluate_fixed(
    model,
    samples,
    method: str,
    tau: float,
    resolver: str = "basic",
    plan=None,
    dr_tau: float = TAU_CAM,
    workers=None,
    smooth_size: int = SMOOTH_KERNEL_SIZE,
    smooth_sigma: float = SMOOTH_SIGMA,
    felz_k: float = FELZ_K,
    felz_sigma: float = FELZ_SIGMA_PRE,
    felz_min_size: int = FELZ_MIN_SIZE,
) -> MetricsReport:
    """Evaluate one method at a fixed threshold with a chosen resolver."""
    if resolver not in RESOLVERS:
        raise ConfigError(f"unknown resolver {resolver!r}; expected one of {', '.join(RESOLVERS)}")
    stacks, gts, partitions = eval_inputs(model, samples, method, plan=plan, dr_tau=dr_tau, workers=workers)

    def predict(i: int) -> np.ndarray:
        if resolver == "smooth":
            return resolve_smooth(stacks[i], tau, size=smooth_size, sigma=smooth_sigma)
        if resolver == "superpixel":
            return resolve_superpixel(
                stacks[i],
                samples[i].image,
                tau=tau,
                k=felz_k,
                sigma_pre=felz_sigma,
                min_size=felz_min_size,
            )
        return resolve_basic(stacks[i], tau)

    preds = parallel_map_ordered(predict, range(len(stacks)), workers=workers)
    acc = ConfusionAccumulator(num_label_classes(model))
    for i, pred in enumerate(preds):
        acc.add(pred, gts[i], partitions[i])
    return build_report(acc, float(tau))


# ------------------------------------------------- kernel-size experiment

CONTRIBUTION_FIELDS = (
    "kernel_size",
    "method",
    "status",
    "tau_star",
    "miou",
    "fg_precision",
    "dr_recall",
    "ndr_recall",
)


def _csv_field(value) -> str:
    if value is None:
        return "undefined"
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


def rows_to_csv(fields, rows) -> str:
    """Render row dicts as CSV with a fixed header. ``None`` prints as
    ``undefined``; floats use 9 significant digits (round-trip float32)."""
    lines = [",".join(fields)]
    for row in rows:
        lines.append(",".join(_csv_field(row[f]) for f in fields))
    return "\n".join(lines) + "\n"


def _metric_row(base: dict, sweep: SweepResult | None, report: MetricsReport | None) -> dict:
    row = dict(base)
    row["tau_star"] = None if sweep is None else sweep.tau_star
    row["miou"] = None if report is None else report.miou
    row["fg_precision"] = None if report is None else report.fg_precision
    row["dr_recall"] = None if report is None else report.macro_dr_recall
    row["ndr_recall"] = None if report is None else report.macro_ndr_recall
    return row


def contribution_window(
    train_samples,
    test_samples,
    kernel_sizes,
    seed: int,
    channels: int = 16,
    depth: int = 5,
    num_classes: int = 10,
    epochs: int = 1,
    batch_size: int = 64,
    learning_rate: float = 0.05,
    momentum: float = 0.9,
    grid=TAU_GRID,
    dr_tau: float = TAU_CAM,
    workers=None,
    progress=None,
) -> list[dict]:
    """Sweep the convolution kernel size and report both attribution
    methods at each size.

    For every kernel size a fresh classifier is trained on the train
    split (init and shuffle seeds derived from ``seed`` and the size),
    then CAM and saliency are swept over the threshold grid on the test
    split. A size whose training diverges contributes a ``diverged``
    row and the sweep moves on. Returns one row dict per (size, method)
    with the fields in :data:`CONTRIBUTION_FIELDS`.
    """
    kernel_sizes = tuple(int(f) for f in kernel_sizes)
    if not kernel_sizes:
        raise ConfigError("kernel-size sweep needs at least one size")
    if not train_samples or not test_samples:
        raise ConfigError("kernel-size sweep needs nonempty train and test splits")
    train_images = np.stack([s.image for s in train_samples])
    train_labels = np.asarray([s.label for s in train_samples], dtype=np.int64)
    side = train_samples[0].side
    rows: list[dict] = []
    for f in kernel_sizes:
        spec = digit_network(
            kernel_size=f, side=side, channels=channels, depth=depth, num_classes=num_classes
        )
        model = Model.init(spec, derive_seed(seed, f))
        cfg = TrainConfig(
            seed=derive_seed(seed, 0x7F00 + f),
            epochs=epochs,
            batch_size=batch_size,
            learning_rate=learning_rate,
            momentum=momentum,
        )
        try:
            model.train(train_images, train_labels, cfg)
        except TrainingDiverged as exc:
            if progress is not None:
                progress(f"kernel size {f}: training diverged ({exc})")
            rows.append(_metric_row({"kernel_size": f, "method": "-", "status": "diverged"}, None, None))
            continue
        for method in ("cam", "saliency"):
            sweep = sweep_method(model, test_samples, method, grid=grid, dr_tau=dr_tau, workers=workers)
            rows.append(
                _metric_row(
                    {"kernel_size": f, "method": method, "status": "ok"}, sweep, sweep.report
                )
            )
            if progress is not None:
                progress(
                    f"kernel size {f} {method}: tau*={sweep.tau_star:.9g} "
                    f"miou={sweep.report.miou:.9g}"
                )
    return rows


# ----------------------------------------------------- sensitivity sweep

SENSITIVITY_AXES = ("sigma", "p", "n_samples", "n_crops", "crop_scale")

SENSITIVITY_FIELDS = (
    "axis",
    "value",
    "status",
    "miou",
    "fg_precision",
    "dr_recall",
    "ndr_recall",
)


def _as_count(value, axis: str) -> int:
    n = float(value)
    if n != int(n):
        raise ConfigError(f"axis {axis!r} needs integer values, got {value!r}")
    return int(n)


def axis_plan(axis: str, value, base: AggregationPlan) -> AggregationPlan:
    """The aggregation plan for one point of a sensitivity axis."""
    if axis == "sigma":
        return replace(base, method="smoothgrad", sigma=float(value))
    if axis == "p":
        return replace(base, method="binarymask", keep_prob=float(value))
    if axis == "n_samples":
        return replace(base, method="smoothgrad", n_samples=_as_count(value, axis))
    if axis == "n_crops":
        return replace(base, method="random_crop", n_samples=_as_count(value, axis))
    if axis == "crop_scale":
        scale = float(value)
        return replace(base, method="random_crop", area_range=(scale, scale))
    raise ConfigError(f"unknown sensitivity axis {axis!r}; expected one of {', '.join(SENSITIVITY_AXES)}")


def sensitivity(
    model,
    samples,
    axis: str,
    values,
    seed: int,
    tau: float = TAU_SM,
    base_plan: AggregationPlan | None = None,
    dr_tau: float = TAU_CAM,
    workers=None,
    progress=None,
) -> list[dict]:
    """Evaluate aggregated saliency while one plan parameter sweeps an
    axis; every other parameter stays at ``base_plan``'s value.

    A failure at one point (degenerate maps, invalid derived plan)
    marks that row ``error:<type>`` and the sweep continues. Returns
    one row dict per value with the fields in
    :data:`SENSITIVITY_FIELDS`.
    """
    if axis not in SENSITIVITY_AXES:
        raise ConfigError(
            f"unknown sensitivity axis {axis!r}; expected one of {', '.join(SENSITIVITY_AXES)}"
        )
    values = list(values)
    if not values:
        raise ConfigError("sensitivity sweep needs at least one axis value")
    if base_plan is None:
        base_plan = AggregationPlan(method="smoothgrad", n_samples=16, base_seed=seed)
    base_plan = replace(base_plan, base_seed=seed)
    rows: list[dict] = []
    for value in values:
        base = {"axis": axis, "value": float(value), "status": "ok"}
        try:
            plan = axis_plan(axis, value, base_plan)
            plan.validate()
            report = evaluate_fixed(
                model, samples, "aggregate", tau, plan=plan, dr_tau=dr_tau, workers=workers
            )
        except AslabError as exc:
            base["status"] = f"error:{type(exc).__name__}"
            rows.append(_metric_row(base, None, None))
            if progress is not None:
                progress(f"{axis}={value}: failed ({exc})")
            continue
        row = _metric_row(base, None, report)
        rows.append(row)
        if progress is not None:
            progress(f"{axis}={value}: miou={report.miou:.9g}")
    return rows
