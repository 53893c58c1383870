"""Command-line interface.

One executable, ``aslab``, with a subcommand per pipeline stage::

    dataset build-mnist        synthesize a digit segmentation corpus
    train                      fit the GAP classifier on a dataset
    infer cam|saliency         one image's attribution map -> FMAP
    aggregate                  perturbation-averaged saliency -> FMAP
    resolve basic|smooth|superpixel
                               score maps -> label mask (PGM)
    evaluate                   masks vs ground truth -> metrics report
    sweep threshold            best background threshold for a method
    sweep contribution-window  kernel-size experiment, CSV per (F, method)
    sweep sensitivity          aggregation-parameter sweep, CSV per value
    hyperplane                 per-pixel separating-plane geometry
    export-heatmap             FMAP in [0, 1] -> 8-bit PGM heatmap

Configuration comes from flags, or from an INI file (``--config``)
whose section names equal command paths (``[train]``,
``[sweep.sensitivity]``); flags override file keys, and unknown
sections or keys are rejected by name. Commands that draw randomness
require an explicit ``--seed`` — there is no wall-clock default, a run
is always replayable from its command line.

Exit codes: 0 success, 2 configuration problems, 3 input/output
problems, 4 numeric failures. Outputs are byte-stable: reruns with the
same inputs produce identical files for any worker count (parallelism
only fans out across whole images; see :mod:`aslab.parallel`).
"""

import argparse
import configparser
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import experiments
from .aggregation import AGGREGATION_METHODS, AggregationPlan, aggregate
from .attribution import TAU_CAM, TAU_SM, ScoreMap, compute_cam, compute_saliency, partition_dr_ndr
from .data import (
    build_seg_samples,
    load_dataset,
    load_idx,
    read_fmap,
    read_pgm,
    save_dataset,
    write_fmap,
    write_pgm,
)
from .digits import GLYPH_SIDE, write_idx_corpus
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .hyperplane import QUADRANTS, quadrant_decomposition
from .metrics import ConfusionAccumulator, build_report
from .model import Model, Perturb, TrainConfig, digit_network
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

# --------------------------------------------------------- value parsers


def _int(text: str) -> int:
    return int(text)


def _float(text: str) -> float:
    return float(text)


def _str(text: str) -> str:
    return text


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean (true/false), got {text!r}")


def _ints(text: str) -> tuple:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(int(t) for t in items)


def _floats(text: str) -> tuple:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise ValueError("expected a comma-separated list of numbers")
    return tuple(float(t) for t in items)


def _choice(*allowed):
    def parse(text: str) -> str:
        if text not in allowed:
            raise ValueError(f"expected one of: {', '.join(allowed)}")
        return text

    return parse


def _class_paths(text: str) -> tuple:
    """``1=a.fmap,2=b.fmap`` -> ((1, "a.fmap"), (2, "b.fmap"))."""
    pairs = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        cid, sep, path = item.partition("=")
        if not sep or not path:
            raise ValueError(f"expected CLASS=PATH, got {item!r}")
        pairs.append((int(cid), path))
    if not pairs:
        raise ValueError("expected at least one CLASS=PATH pair")
    return tuple(pairs)


# ------------------------------------------------------ option registry


@dataclass(frozen=True)
class Opt:
    """One command option: flag ``--name``, config key ``name``."""

    name: str
    parse: object
    default: object = None
    required: bool = False
    help: str = ""

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


@dataclass(frozen=True)
class Command:
    key: str  # config section name, e.g. "sweep.threshold"
    help: str
    opts: tuple
    run: object

    @property
    def path(self) -> tuple:
        return tuple(self.key.split("."))


def _say(message: str) -> None:
    print(message)


def _write_text(path, text: str) -> None:
    if not text.endswith("\n"):
        text += "\n"
    Path(path).write_text(text)


# ------------------------------------------------------- shared loading


def _load_model(path) -> Model:
    model, _ = Model.load(path)
    return model


def _load_samples(data, limit=None) -> list:
    samples = load_dataset(data)
    if limit is not None:
        if limit < 1:
            raise ConfigError(f"--limit must be >= 1, got {limit}")
        samples = samples[:limit]
    if not samples:
        raise FormatError(f"{data}: dataset is empty")
    return samples


def _one_sample(data, image_id):
    if image_id is None:
        raise ConfigError("an --image-id is required")
    return load_dataset(data, ids=[image_id])[0]


def _check_class_index(model: Model, class_index: int) -> None:
    if not 0 <= class_index < model.spec.num_classes:
        raise ConfigError(
            f"class index {class_index} out of range for a {model.spec.num_classes}-class model"
        )


def _loaded_map(path, class_id: int) -> ScoreMap:
    """Reconstruct a normalized score map from an FMAP file."""
    values = read_fmap(path)
    if values.ndim != 2:
        raise FormatError(f"{path}: score maps must be 2-d, got shape {values.shape}")
    lo, hi = float(values.min()), float(values.max())
    if lo < 0.0 or hi > 1.0:
        raise FormatError(
            f"{path}: normalized scores must lie in [0, 1], found range [{lo:.9g}, {hi:.9g}]"
        )
    return ScoreMap(kind="cam", class_id=class_id, raw=values, values=values, z=1.0)


def _maps_from_pairs(pairs) -> list:
    return [_loaded_map(path, cid) for cid, path in pairs]


def heatmap_u8(values: np.ndarray) -> np.ndarray:
    """Scale a [0, 1] map onto 0..255 gray levels, rounding half-up
    (0.5 maps to 128)."""
    v = np.asarray(values, dtype=np.float64)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


# ------------------------------------------------------------- handlers


def cmd_build_mnist(v) -> int:
    if v["train_count"] < 1 or v["test_count"] < 1:
        raise ConfigError("--train-count and --test-count must be >= 1")
    if v["side"] < GLYPH_SIDE:
        raise ConfigError(f"--side must be >= {GLYPH_SIDE}, got {v['side']}")
    out = Path(v["out"])
    paths = write_idx_corpus(out / "idx", v["train_count"], v["test_count"], v["seed"])
    train = build_seg_samples(
        load_idx(paths["train_images"]), load_idx(paths["train_labels"]), v["side"]
    )
    save_dataset(out / "train", train)
    test = build_seg_samples(
        load_idx(paths["test_images"]), load_idx(paths["test_labels"]), v["side"]
    )
    save_dataset(out / "test", test)
    _say(f"wrote {len(train)} train and {len(test)} test samples (side {v['side']}) under {out}")
    return 0


def cmd_train(v) -> int:
    samples = _load_samples(v["data"], v["limit"])
    images = np.stack([s.image for s in samples])
    labels = np.asarray([s.label for s in samples], dtype=np.int64)
    spec = digit_network(
        kernel_size=v["kernel_size"],
        side=samples[0].side,
        channels=v["channels"],
        depth=v["depth"],
        num_classes=v["num_classes"],
        in_channels=images.shape[1],
    )
    model = Model.init(spec, v["seed"])
    cfg = TrainConfig(
        seed=v["seed"],
        epochs=v["epochs"],
        batch_size=v["batch_size"],
        learning_rate=v["learning_rate"],
        momentum=v["momentum"],
        perturb=Perturb.parse(v["perturb"]),
        hflip=v["hflip"],
    )
    report = model.train(images, labels, cfg)
    final = report.losses[-1] if report.losses else None
    metadata = {
        "command": "train",
        "seed": v["seed"],
        "epochs": v["epochs"],
        "batch_size": v["batch_size"],
        "learning_rate": v["learning_rate"],
        "momentum": v["momentum"],
        "kernel_size": v["kernel_size"],
        "channels": v["channels"],
        "depth": v["depth"],
        "samples": len(samples),
    }
    if final is not None:
        metadata["final_loss"] = final
    model.save(v["out"], metadata)
    tail = "" if final is None else f"; final loss {final:.6f}"
    _say(f"trained on {len(samples)} samples for {v['epochs']} epochs{tail}")
    _say(f"checkpoint written to {v['out']}")
    return 0


def _infer(v, kind: str) -> int:
    model = _load_model(v["model"])
    sample = _one_sample(v["data"], v["image_id"])
    if v["class_index"] is None:
        class_index, label_id = sample.label, sample.mask_id
    else:
        class_index, label_id = v["class_index"], None
    _check_class_index(model, class_index)
    compute = compute_cam if kind == "cam" else compute_saliency
    smap = compute(model, sample.image, class_index, label_id=label_id)
    write_fmap(v["out"], smap.values)
    note = " (degenerate: no positive scores)" if smap.degenerate else ""
    _say(f"{kind} map for image {sample.index}, class index {class_index}: z={smap.z:.9g}{note}")
    _say(f"map written to {v['out']}")
    return 0


def cmd_infer_cam(v) -> int:
    return _infer(v, "cam")


def cmd_infer_saliency(v) -> int:
    return _infer(v, "saliency")


def cmd_aggregate(v) -> int:
    model = _load_model(v["model"])
    sample = _one_sample(v["data"], v["image_id"])
    if v["class_index"] is None:
        class_index, label_id = sample.label, sample.mask_id
    else:
        class_index, label_id = v["class_index"], None
    _check_class_index(model, class_index)
    plan = AggregationPlan(
        method=v["method"],
        n_samples=v["n_samples"],
        base_seed=v["seed"],
        sigma=v["sigma"],
        keep_prob=v["keep_prob"],
        p_erase=v["p_erase"],
        alpha=v["alpha"],
        beta=v["beta"],
        grid=v["grid"],
        area_range=(v["area_lo"], v["area_hi"]),
        aspect_range=(v["aspect_lo"], v["aspect_hi"]),
        crop_normalization=v["crop_normalization"],
    )
    evidence = None
    if plan.method in ("disc_crop", "disc_patch"):
        evidence = [compute_cam(model, sample.image, ci) for ci in range(model.spec.num_classes)]
    smap = aggregate(
        model,
        sample.image,
        class_index,
        plan,
        cam_maps=evidence,
        label_id=label_id,
        workers=v["workers"],
    )
    write_fmap(v["out"], smap.values)
    note = " (degenerate: no positive scores)" if smap.degenerate else ""
    _say(
        f"{plan.method} map ({plan.n_samples} samples) for image {sample.index}, "
        f"class index {class_index}: z={smap.z:.9g}{note}"
    )
    _say(f"map written to {v['out']}")
    return 0


def _resolve_common(v, pred: np.ndarray) -> int:
    write_pgm(v["out"], pred)
    fg = int((pred > 0).sum())
    _say(f"mask written to {v['out']} ({fg} foreground pixels)")
    return 0


def cmd_resolve_basic(v) -> int:
    maps = _maps_from_pairs(v["maps"])
    return _resolve_common(v, resolve_basic(maps, v["tau"]))


def cmd_resolve_smooth(v) -> int:
    maps = _maps_from_pairs(v["maps"])
    return _resolve_common(v, resolve_smooth(maps, v["tau"], size=v["kernel_size"], sigma=v["sigma"]))


def cmd_resolve_superpixel(v) -> int:
    maps = _maps_from_pairs(v["maps"])
    if v["image"] is not None:
        if v["data"] is not None or v["image_id"] is not None:
            raise ConfigError("pass either --image or --data/--image-id, not both")
        image = read_fmap(v["image"])
        if image.ndim not in (2, 3):
            raise FormatError(f"{v['image']}: expected a 2-d or 3-d image, got {image.shape}")
    elif v["data"] is not None:
        image = _one_sample(v["data"], v["image_id"]).image
    else:
        raise ConfigError("superpixel resolve needs --image, or --data with --image-id")
    pred = resolve_superpixel(
        maps,
        image,
        tau=v["tau"],
        k=v["felz_k"],
        sigma_pre=v["felz_sigma"],
        min_size=v["felz_min_size"],
    )
    return _resolve_common(v, pred)


def _external_inputs(scores_dir, gt_dir) -> list:
    """Collect (stem, score maps, gt mask) triples from two directories.

    Ground truth masks are ``<stem>_gt.pgm``; each image's score maps
    are ``<stem>_score_c<id>.fmap`` with the class id in the name.
    """
    scores_dir, gt_dir = Path(scores_dir), Path(gt_dir)
    gt_files = sorted(gt_dir.glob("*_gt.pgm"))
    if not gt_files:
        raise FormatError(f"{gt_dir}: no *_gt.pgm ground-truth masks found")
    triples = []
    for gt_path in gt_files:
        stem = gt_path.name[: -len("_gt.pgm")]
        prefix = f"{stem}_score_c"
        score_files = sorted(scores_dir.glob(f"{prefix}*.fmap"))
        if not score_files:
            raise FormatError(f"{scores_dir}: no score maps matching {prefix}<id>.fmap")
        maps = []
        for path in score_files:
            tail = path.name[len(prefix) : -len(".fmap")]
            try:
                cid = int(tail)
            except ValueError as exc:
                raise FormatError(f"{path.name}: cannot parse class id {tail!r}") from exc
            maps.append(_loaded_map(path, cid))
        triples.append((stem, maps, read_pgm(gt_path)))
    return triples


def _write_report(v, report) -> int:
    prefix = v["out_prefix"]
    _write_text(f"{prefix}.json", report.to_json())
    _write_text(f"{prefix}.csv", report.to_csv())
    fmt = lambda x: "undefined" if x is None else f"{x:.9g}"  # noqa: E731
    _say(
        f"evaluated {report.num_images} images at tau={report.tau:.9g}: "
        f"miou={fmt(report.miou)} fg_precision={fmt(report.fg_precision)} "
        f"dr_recall={fmt(report.macro_dr_recall)} ndr_recall={fmt(report.macro_ndr_recall)}"
    )
    _say(f"report written to {prefix}.json and {prefix}.csv")
    return 0


def _evaluate_external(v) -> int:
    if v["gt_dir"] is None:
        raise ConfigError("--scores-dir needs --gt-dir")
    if v["model"] is not None or v["data"] is not None:
        raise ConfigError("pass either --scores-dir/--gt-dir or --model/--data, not both")
    if v["resolver"] == "superpixel":
        raise ConfigError("superpixel resolve needs source images; use --model/--data mode")
    triples = _external_inputs(v["scores_dir"], v["gt_dir"])
    num_classes = v["num_classes"]
    if num_classes is None:
        top = 0
        for _, maps, gt in triples:
            top = max(top, max(m.class_id for m in maps))
            valid = gt[gt != 255]
            if valid.size:
                top = max(top, int(valid.max()))
        num_classes = top + 1
    acc = ConfusionAccumulator(num_classes)
    for _, maps, gt in triples:
        if v["resolver"] == "smooth":
            pred = resolve_smooth(maps, v["tau"], size=v["smooth_size"], sigma=v["smooth_sigma"])
        else:
            pred = resolve_basic(maps, v["tau"])
        partitions = None
        if v["dr_from_scores"]:
            partitions = {
                m.class_id: partition_dr_ndr(m, gt, v["dr_tau"]) for m in maps
            }
        acc.add(pred, gt, partitions)
    return _write_report(v, build_report(acc, v["tau"]))


def cmd_evaluate(v) -> int:
    if v["scores_dir"] is not None:
        return _evaluate_external(v)
    if v["model"] is None or v["data"] is None:
        raise ConfigError("evaluate needs --scores-dir/--gt-dir, or --model with --data")
    if v["method"] is None:
        raise ConfigError("evaluate with --model needs --method cam or saliency")
    model = _load_model(v["model"])
    samples = _load_samples(v["data"], v["limit"])
    report = experiments.evaluate_fixed(
        model,
        samples,
        v["method"],
        v["tau"],
        resolver=v["resolver"],
        dr_tau=v["dr_tau"],
        workers=v["workers"],
        smooth_size=v["smooth_size"],
        smooth_sigma=v["smooth_sigma"],
        felz_k=v["felz_k"],
        felz_sigma=v["felz_sigma"],
        felz_min_size=v["felz_min_size"],
    )
    return _write_report(v, report)


def cmd_sweep_threshold(v) -> int:
    model = _load_model(v["model"])
    samples = _load_samples(v["data"], v["limit"])
    sweep = experiments.sweep_method(
        model, samples, v["method"], dr_tau=v["dr_tau"], workers=v["workers"], naive=v["naive"]
    )
    prefix = v["out_prefix"]
    _write_text(f"{prefix}_sweep.csv", sweep.to_csv())
    _write_text(f"{prefix}_report.json", sweep.report.to_json())
    _write_text(f"{prefix}_report.csv", sweep.report.to_csv())
    _say(
        f"swept {len(sweep.taus)} thresholds over {len(samples)} images: "
        f"tau*={sweep.tau_star:.9g} miou={sweep.report.miou:.9g}"
    )
    _say(f"results written to {prefix}_sweep.csv and {prefix}_report.json/.csv")
    return 0


def cmd_contribution_window(v) -> int:
    root = Path(v["data"])
    train = _load_samples(root / "train", v["limit_train"])
    test = _load_samples(root / "test", v["limit_test"])
    rows = experiments.contribution_window(
        train,
        test,
        v["kernel_sizes"],
        seed=v["seed"],
        channels=v["channels"],
        depth=v["depth"],
        num_classes=v["num_classes"],
        epochs=v["epochs"],
        batch_size=v["batch_size"],
        learning_rate=v["learning_rate"],
        momentum=v["momentum"],
        dr_tau=v["dr_tau"],
        workers=v["workers"],
        progress=_say,
    )
    _write_text(v["out"], experiments.rows_to_csv(experiments.CONTRIBUTION_FIELDS, rows))
    _say(f"wrote {len(rows)} rows to {v['out']}")
    return 0


def cmd_sweep_sensitivity(v) -> int:
    model = _load_model(v["model"])
    samples = _load_samples(v["data"], v["limit"])
    base = AggregationPlan(
        method="smoothgrad",
        n_samples=v["n_samples"],
        base_seed=v["seed"],
        sigma=v["sigma"],
        keep_prob=v["keep_prob"],
        area_range=(v["area_lo"], v["area_hi"]),
        aspect_range=(v["aspect_lo"], v["aspect_hi"]),
        crop_normalization=v["crop_normalization"],
    )
    rows = experiments.sensitivity(
        model,
        samples,
        v["axis"],
        v["values"],
        seed=v["seed"],
        tau=v["tau"],
        base_plan=base,
        dr_tau=v["dr_tau"],
        workers=v["workers"],
        progress=_say,
    )
    _write_text(v["out"], experiments.rows_to_csv(experiments.SENSITIVITY_FIELDS, rows))
    _say(f"wrote {len(rows)} rows to {v['out']}")
    return 0


def cmd_hyperplane(v) -> int:
    model = _load_model(v["model"])
    sample = _one_sample(v["data"], v["image_id"])
    if v["class_index"] is None:
        class_index, label_id = sample.label, sample.mask_id
    else:
        class_index, label_id = v["class_index"], None
    _check_class_index(model, class_index)
    analysis = quadrant_decomposition(
        model,
        sample.image,
        sample.mask,
        class_index,
        label_id=label_id,
        tau_cam=v["tau_cam"],
        tau_sm=v["tau_sm"],
    )
    prefix = v["out_prefix"]
    _write_text(f"{prefix}.json", analysis.report.to_json())
    analysis.write_csv(f"{prefix}.csv")
    counts = " ".join(f"{q}={analysis.report.counts[q]}" for q in QUADRANTS)
    _say(f"{analysis.report.total} ground-truth pixels: {counts}")
    _say(f"geometry written to {prefix}.json and {prefix}.csv")
    return 0


def cmd_export_heatmap(v) -> int:
    values = read_fmap(v["map"])
    if values.ndim != 2:
        raise FormatError(f"{v['map']}: heatmaps must be 2-d, got shape {values.shape}")
    lo, hi = float(values.min()), float(values.max())
    if lo < 0.0 or hi > 1.0:
        raise FormatError(
            f"{v['map']}: heatmap values must lie in [0, 1], found range [{lo:.9g}, {hi:.9g}]"
        )
    write_pgm(v["out"], heatmap_u8(values))
    _say(f"heatmap written to {v['out']}")
    return 0


# ------------------------------------------------------ command registry

_WORKERS = Opt("workers", _int, None, help="fan-out width; ASLAB_THREADS caps it (default: the cap, else 1)")
_LIMIT = Opt("limit", _int, None, help="evaluate only the first N samples")
_MODEL = Opt("model", _str, required=True, help="checkpoint path")
_DATA = Opt("data", _str, required=True, help="dataset directory")
_IMAGE_ID = Opt("image-id", _int, required=True, help="sample id from the dataset index")
_CLASS_INDEX = Opt("class-index", _int, None, help="logit index (default: the sample's own label)")
_DR_TAU = Opt("dr-tau", _float, TAU_CAM, help="CAM threshold defining the discriminative region")

_AGG_PARAMS = (
    Opt("n-samples", _int, 50, help="perturbed samples per map"),
    Opt("sigma", _float, 0.5, help="noise std for smoothgrad"),
    Opt("keep-prob", _float, 0.90, help="keep probability for binarymask"),
    Opt("p-erase", _float, 0.1, help="cell erase probability for random_patch"),
    Opt("alpha", _float, 0.4, help="evidence scale for disc_patch"),
    Opt("beta", _float, 0.7, help="keep-probability cap for disc_crop"),
    Opt("grid", _int, 16, help="patch grid cells per side"),
    Opt("area-lo", _float, 0.1, help="crop area fraction lower bound"),
    Opt("area-hi", _float, 0.5, help="crop area fraction upper bound"),
    Opt("aspect-lo", _float, 0.75, help="crop aspect ratio lower bound"),
    Opt("aspect-hi", _float, 4.0 / 3.0, help="crop aspect ratio upper bound"),
    Opt(
        "crop-normalization",
        _choice("coverage", "strict_mean"),
        "coverage",
        help="how pasted crops are averaged: coverage or strict_mean",
    ),
)

_SMOOTH_PARAMS = (
    Opt("smooth-size", _int, SMOOTH_KERNEL_SIZE, help="gaussian kernel size for resolver smooth"),
    Opt("smooth-sigma", _float, SMOOTH_SIGMA, help="gaussian sigma for resolver smooth"),
)

_FELZ_PARAMS = (
    Opt("felz-k", _float, FELZ_K, help="superpixel scale parameter"),
    Opt("felz-sigma", _float, FELZ_SIGMA_PRE, help="superpixel pre-smoothing sigma"),
    Opt("felz-min-size", _int, FELZ_MIN_SIZE, help="minimum superpixel size"),
)


def _commands() -> dict:
    infer_opts = (
        _MODEL,
        _DATA,
        _IMAGE_ID,
        _CLASS_INDEX,
        Opt("out", _str, required=True, help="output FMAP path"),
    )
    resolve_base = (
        Opt("maps", _class_paths, required=True, help="score maps as CLASS=PATH[,CLASS=PATH...]"),
        Opt("tau", _float, required=True, help="background threshold"),
        Opt("out", _str, required=True, help="output PGM mask path"),
    )
    table = (
        Command(
            "dataset.build-mnist",
            "synthesize the digit segmentation corpus",
            (
                Opt("out", _str, required=True, help="output root (creates idx/, train/, test/)"),
                Opt("seed", _int, required=True, help="corpus seed"),
                Opt("train-count", _int, 10000, help="training images"),
                Opt("test-count", _int, 2000, help="test images"),
                Opt("side", _int, 64, help="upsampled image side"),
            ),
            cmd_build_mnist,
        ),
        Command(
            "train",
            "fit the GAP classifier on a dataset",
            (
                _DATA,
                Opt("out", _str, required=True, help="checkpoint output path"),
                Opt("seed", _int, required=True, help="init and shuffle seed"),
                Opt("epochs", _int, 10),
                Opt("batch-size", _int, 32),
                Opt("learning-rate", _float, 0.01),
                Opt("momentum", _float, 0.9),
                Opt("kernel-size", _int, 3, help="convolution kernel side (odd)"),
                Opt("channels", _int, 16, help="channels per convolution layer"),
                Opt("depth", _int, 5, help="convolution layers"),
                Opt("num-classes", _int, 10),
                Opt("perturb", _str, "none", help="input perturbation, e.g. gaussian:0.15"),
                Opt("hflip", _bool, False, help="random horizontal flips during training"),
                Opt("limit", _int, None, help="train only on the first N samples"),
            ),
            cmd_train,
        ),
        Command("infer.cam", "class activation map for one image", infer_opts, cmd_infer_cam),
        Command(
            "infer.saliency", "gradient saliency map for one image", infer_opts, cmd_infer_saliency
        ),
        Command(
            "aggregate",
            "perturbation-averaged saliency map for one image",
            (
                _MODEL,
                _DATA,
                _IMAGE_ID,
                _CLASS_INDEX,
                Opt("method", _choice(*AGGREGATION_METHODS), required=True),
                Opt("seed", _int, required=True, help="base seed for the perturbation streams"),
                Opt("out", _str, required=True, help="output FMAP path"),
                _WORKERS,
            )
            + _AGG_PARAMS,
            cmd_aggregate,
        ),
        Command(
            "resolve.basic",
            "argmax-over-maps labeling with a background threshold",
            resolve_base,
            cmd_resolve_basic,
        ),
        Command(
            "resolve.smooth",
            "gaussian-smoothed labeling",
            resolve_base
            + (
                Opt("kernel-size", _int, SMOOTH_KERNEL_SIZE, help="gaussian kernel size (odd)"),
                Opt("sigma", _float, SMOOTH_SIGMA, help="gaussian sigma"),
            ),
            cmd_resolve_smooth,
        ),
        Command(
            "resolve.superpixel",
            "superpixel-voted labeling",
            resolve_base
            + (
                Opt("image", _str, None, help="source image FMAP (alternative to --data)"),
                Opt("data", _str, None, help="dataset directory holding the source image"),
                Opt("image-id", _int, None, help="sample id within --data"),
            )
            + _FELZ_PARAMS,
            cmd_resolve_superpixel,
        ),
        Command(
            "evaluate",
            "metrics report from a model or from exported score maps",
            (
                Opt("model", _str, None, help="checkpoint path (model mode)"),
                Opt("data", _str, None, help="dataset directory (model mode)"),
                Opt("method", _choice("cam", "saliency"), None, help="attribution method (model mode)"),
                Opt("scores-dir", _str, None, help="directory of <stem>_score_c<id>.fmap files"),
                Opt("gt-dir", _str, None, help="directory of <stem>_gt.pgm masks"),
                Opt("dr-from-scores", _bool, False, help="derive DR partitions from the score maps"),
                Opt("num-classes", _int, None, help="label-space size (default: inferred)"),
                Opt("tau", _float, required=True, help="background threshold"),
                _DR_TAU,
                Opt("out-prefix", _str, required=True, help="writes <prefix>.json and <prefix>.csv"),
                Opt("resolver", _choice("basic", "smooth", "superpixel"), "basic"),
                _LIMIT,
                _WORKERS,
            )
            + _SMOOTH_PARAMS
            + _FELZ_PARAMS,
            cmd_evaluate,
        ),
        Command(
            "sweep.threshold",
            "pick the mIoU-maximizing background threshold",
            (
                _MODEL,
                _DATA,
                Opt("method", _choice("cam", "saliency"), required=True),
                Opt("out-prefix", _str, required=True, help="writes <prefix>_sweep.csv and reports"),
                Opt("naive", _bool, False, help="re-resolve every image at every threshold"),
                _DR_TAU,
                _LIMIT,
                _WORKERS,
            ),
            cmd_sweep_threshold,
        ),
        Command(
            "sweep.contribution-window",
            "kernel-size experiment: train and evaluate both methods per size",
            (
                Opt("data", _str, required=True, help="corpus root holding train/ and test/"),
                Opt("kernel-sizes", _ints, (1, 3, 5, 7), help="odd sizes, e.g. 1,3,5,7"),
                Opt("seed", _int, required=True, help="per-size init/shuffle seeds derive from this"),
                Opt("epochs", _int, 1),
                Opt("batch-size", _int, 64),
                Opt("learning-rate", _float, 0.05),
                Opt("momentum", _float, 0.9),
                Opt("channels", _int, 16),
                Opt("depth", _int, 5),
                Opt("num-classes", _int, 10),
                Opt("limit-train", _int, None, help="train on the first N samples only"),
                Opt("limit-test", _int, None, help="evaluate on the first N samples only"),
                Opt("out", _str, required=True, help="output CSV path"),
                _DR_TAU,
                _WORKERS,
            ),
            cmd_contribution_window,
        ),
        Command(
            "sweep.sensitivity",
            "sweep one aggregation parameter, evaluating each point",
            (
                _MODEL,
                _DATA,
                Opt("axis", _choice(*experiments.SENSITIVITY_AXES), required=True),
                Opt("values", _floats, required=True, help="axis values, e.g. 0,0.25,0.5"),
                Opt("seed", _int, required=True, help="base seed for the perturbation streams"),
                Opt("tau", _float, TAU_SM, help="background threshold for evaluation"),
                Opt("out", _str, required=True, help="output CSV path"),
                _DR_TAU,
                _LIMIT,
                _WORKERS,
                Opt("n-samples", _int, 16, help="samples per map when not the swept axis"),
                Opt("sigma", _float, 0.5, help="smoothgrad sigma when not the swept axis"),
                Opt("keep-prob", _float, 0.90, help="binarymask keep probability when not swept"),
                Opt("area-lo", _float, 0.1, help="crop area lower bound when not swept"),
                Opt("area-hi", _float, 0.5, help="crop area upper bound when not swept"),
                Opt("aspect-lo", _float, 0.75),
                Opt("aspect-hi", _float, 4.0 / 3.0),
                Opt("crop-normalization", _choice("coverage", "strict_mean"), "coverage"),
            ),
            cmd_sweep_sensitivity,
        ),
        Command(
            "hyperplane",
            "per-pixel separating-plane geometry for one image",
            (
                _MODEL,
                _DATA,
                _IMAGE_ID,
                _CLASS_INDEX,
                Opt("tau-cam", _float, TAU_CAM),
                Opt("tau-sm", _float, TAU_SM),
                Opt("out-prefix", _str, required=True, help="writes <prefix>.json and <prefix>.csv"),
            ),
            cmd_hyperplane,
        ),
        Command(
            "export-heatmap",
            "render a [0, 1] score map as an 8-bit PGM",
            (
                Opt("map", _str, required=True, help="input FMAP path"),
                Opt("out", _str, required=True, help="output PGM path"),
            ),
            cmd_export_heatmap,
        ),
    )
    return {c.key: c for c in table}


COMMANDS = _commands()


# ------------------------------------------------------ parsing & merge


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aslab",
        description="class activation maps vs gradient saliency for weakly supervised segmentation",
        allow_abbrev=False,
    )
    parser.add_argument("--config", default=None, help="INI config file; flags override its keys")
    tops = parser.add_subparsers(metavar="command", required=True)
    group_help = {
        "dataset": "corpus construction",
        "infer": "single-image attribution maps",
        "resolve": "score maps to label masks",
        "sweep": "threshold and parameter sweeps",
    }
    groups: dict = {}
    for cmd in COMMANDS.values():
        path = cmd.path
        if len(path) == 1:
            leaf = tops.add_parser(path[0], help=cmd.help, allow_abbrev=False)
        else:
            head, tail = path
            if head not in groups:
                group = tops.add_parser(head, help=group_help.get(head), allow_abbrev=False)
                groups[head] = group.add_subparsers(metavar="subcommand", required=True)
            leaf = groups[head].add_parser(tail, help=cmd.help, allow_abbrev=False)
        leaf.set_defaults(_cmd=cmd.key)
        leaf.add_argument(
            "--config",
            dest="config_leaf",
            default=argparse.SUPPRESS,
            help="INI config file; flags override its keys",
            metavar="FILE",
        )
        for opt in cmd.opts:
            leaf.add_argument(
                f"--{opt.name}",
                dest=opt.dest,
                default=argparse.SUPPRESS,
                type=str,
                help=opt.help or None,
                metavar="V",
            )
    return parser


def _read_config(path, section: str) -> dict:
    """Raw strings for ``section``; every section and key in the file is
    validated against the registry, so typos fail loudly wherever they
    hide."""
    try:
        text = Path(path).read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    parser = configparser.ConfigParser(
        interpolation=None, delimiters=("=",), comment_prefixes=("#", ";")
    )
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config file: {exc}") from exc
    out: dict = {}
    for sec in parser.sections():
        if sec not in COMMANDS:
            raise ConfigError(f"unknown config section '{sec}'")
        known = {o.name for o in COMMANDS[sec].opts}
        for key, value in parser.items(sec):
            if key not in known:
                raise ConfigError(f"unknown config key '{sec}.{key}'")
            if sec == section:
                out[key] = value
    return out


def _merge(cmd: Command, ns: argparse.Namespace) -> dict:
    raw: dict = {}
    config_path = getattr(ns, "config_leaf", None) or ns.config
    if config_path is not None:
        for key, value in _read_config(config_path, cmd.key).items():
            raw[key] = ("config", value)
    for opt in cmd.opts:
        if hasattr(ns, opt.dest):
            raw[opt.name] = ("flag", getattr(ns, opt.dest))
    values: dict = {}
    for opt in cmd.opts:
        if opt.name in raw:
            origin, text = raw[opt.name]
            where = f"--{opt.name}" if origin == "flag" else f"config key '{cmd.key}.{opt.name}'"
            try:
                values[opt.dest] = opt.parse(text)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {where}: {exc}") from exc
        elif opt.required:
            raise ConfigError(
                f"'{cmd.key}' needs --{opt.name} (or config key '{cmd.key}.{opt.name}')"
            )
        else:
            values[opt.dest] = opt.default
    return values


def main(argv=None) -> int:
    try:
        parser = build_parser()
        ns = parser.parse_args(argv)
        cmd = COMMANDS[ns._cmd]
        return cmd.run(_merge(cmd, ns))
    except SystemExit as exc:  # argparse usage errors and --help
        return exc.code if isinstance(exc.code, int) else 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
