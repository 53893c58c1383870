"""End-to-end tests of the ``aslab`` command line.

Everything runs in-process through :func:`aslab.cli.main`, on a small
synthetic corpus and a briefly trained model shared across the module.
"""

import json

import numpy as np
import pytest

from aslab import cli
from aslab.aggregation import smoothgrad
from aslab.attribution import ScoreMap, compute_cam, compute_saliency
from aslab.data import load_dataset, read_fmap, read_pgm, write_fmap, write_pgm
from aslab.metrics import TAU_GRID, ConfusionAccumulator, build_report
from aslab.model import Model
from aslab.resolve import resolve_basic, resolve_smooth, resolve_superpixel


def run(*args) -> int:
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    code = run(
        "dataset", "build-mnist",
        "--out", root, "--seed", 7,
        "--train-count", 12, "--test-count", 6, "--side", 32,
    )
    assert code == 0
    return root


@pytest.fixture(scope="module")
def model_path(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("ckpt") / "digit.aslc"
    code = run(
        "train",
        "--data", corpus / "train", "--out", out, "--seed", 11,
        "--epochs", 2, "--batch-size", 6, "--learning-rate", 0.05,
        "--channels", 8, "--depth", 3,
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def model(model_path):
    loaded, _ = Model.load(model_path)
    return loaded


@pytest.fixture(scope="module")
def test_samples(corpus):
    return load_dataset(corpus / "test")


# ------------------------------------------------------------ parsing


class TestParsing:
    def test_missing_required_seed(self, corpus, tmp_path, capsys):
        code = run("train", "--data", corpus / "train", "--out", tmp_path / "m.aslc")
        assert code == 2
        err = capsys.readouterr().err
        assert "--seed" in err and "train.seed" in err

    def test_unknown_config_key(self, tmp_path, capsys):
        ini = tmp_path / "exp.ini"
        ini.write_text("[train]\nepoochs = 3\n")
        assert run("train", "--config", ini, "--data", "x", "--out", "y", "--seed", 1) == 2
        assert "train.epoochs" in capsys.readouterr().err

    def test_unknown_config_section(self, tmp_path, capsys):
        ini = tmp_path / "exp.ini"
        ini.write_text("[trainz]\nepochs = 3\n")
        assert run("train", "--config", ini, "--data", "x", "--out", "y", "--seed", 1) == 2
        assert "trainz" in capsys.readouterr().err

    def test_other_sections_tolerated_but_validated(self, tmp_path, capsys):
        # a shared config may hold sections for other commands...
        ini = tmp_path / "exp.ini"
        ini.write_text("[export-heatmap]\nmap = a.fmap\n\n[sweep.threshold]\nmethod = cam\n")
        code = run("export-heatmap", "--config", ini, "--out", tmp_path / "o.pgm")
        assert code == 3  # a.fmap does not exist: config parsed fine
        # ...but a typo in any section is still an error
        ini.write_text("[sweep.threshold]\nmethodd = cam\n")
        assert run("export-heatmap", "--config", ini, "--map", "a", "--out", "b") == 2
        assert "sweep.threshold.methodd" in capsys.readouterr().err

    def test_flag_overrides_config(self, corpus, tmp_path):
        ini = tmp_path / "exp.ini"
        ini.write_text("[train]\nseed = 11\nepochs = 3\nchannels = 4\ndepth = 2\n")
        out = tmp_path / "m.aslc"
        code = run(
            "train", "--config", ini,
            "--data", corpus / "train", "--out", out,
            "--epochs", 0, "--limit", 2, "--kernel-size", 1,
        )
        assert code == 0
        _, meta = Model.load(out)
        assert meta["epochs"] == 0  # the flag, not the file
        assert meta["seed"] == 11  # the file satisfied the required seed
        assert meta["channels"] == 4

    def test_bad_flag_value(self, capsys):
        assert run("train", "--data", "x", "--out", "y", "--seed", 1, "--epochs", "soon") == 2
        assert "--epochs" in capsys.readouterr().err

    def test_bad_config_value(self, tmp_path, capsys):
        ini = tmp_path / "exp.ini"
        ini.write_text("[train]\nepochs = soon\n")
        assert run("train", "--config", ini, "--data", "x", "--out", "y", "--seed", 1) == 2
        assert "train.epochs" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert run("train", "--config", tmp_path / "nope.ini", "--data", "x", "--out", "y", "--seed", 1) == 2
        assert "not found" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert run("export-heatmap", "--map", "a", "--out", "b", "--wat", 1) == 2

    def test_help_exits_zero(self, capsys):
        assert run("--help") == 0
        assert "export-heatmap" in capsys.readouterr().out

    def test_missing_subcommand(self, capsys):
        assert run() == 2

    def test_bool_flags(self, capsys):
        for text in ("maybe", "2"):
            assert run("train", "--data", "x", "--out", "y", "--seed", 1, "--hflip", text) == 2
            assert "--hflip" in capsys.readouterr().err

    def test_bad_class_path_pairs(self, capsys):
        assert run("resolve", "basic", "--maps", "nopath", "--tau", 0.3, "--out", "m.pgm") == 2
        assert "--maps" in capsys.readouterr().err


# ----------------------------------------------------- export-heatmap


class TestExportHeatmap:
    def export(self, tmp_path, values):
        src = tmp_path / "in.fmap"
        dst = tmp_path / "out.pgm"
        write_fmap(src, np.asarray(values, np.float32))
        code = run("export-heatmap", "--map", src, "--out", dst)
        return code, dst

    def test_constant_half_maps_to_128(self, tmp_path):
        code, dst = self.export(tmp_path, np.full((5, 4), 0.5, np.float32))
        assert code == 0
        out = read_pgm(dst)
        assert out.shape == (5, 4)
        assert (out == 128).all()

    def test_pinned_gray_levels(self, tmp_path):
        # round-half-up on the [0, 1] -> [0, 255] scale
        values = np.array([[0.0, 0.25, 0.5, 0.75, 1.0]], np.float32)
        code, dst = self.export(tmp_path, values)
        assert code == 0
        assert read_pgm(dst).tolist() == [[0, 64, 128, 191, 255]]

    def test_out_of_range_rejected(self, tmp_path, capsys):
        code, _ = self.export(tmp_path, np.full((3, 3), 1.5, np.float32))
        assert code == 3
        assert "[0, 1]" in capsys.readouterr().err

    def test_negative_rejected(self, tmp_path):
        code, _ = self.export(tmp_path, np.full((3, 3), -0.1, np.float32))
        assert code == 3

    def test_non_2d_rejected(self, tmp_path):
        code, _ = self.export(tmp_path, np.zeros((2, 3, 3), np.float32))
        assert code == 3

    def test_heatmap_u8_helper(self):
        vals = np.array([0.0, 0.5, 1.0], np.float32)
        assert cli.heatmap_u8(vals).tolist() == [0, 128, 255]
        assert cli.heatmap_u8(vals).dtype == np.uint8


# ------------------------------------------------------------- infer


class TestInfer:
    def test_cam_matches_library(self, model, model_path, corpus, test_samples, tmp_path):
        sample = test_samples[0]
        out = tmp_path / "cam.fmap"
        code = run(
            "infer", "cam",
            "--model", model_path, "--data", corpus / "test",
            "--image-id", sample.index, "--out", out,
        )
        assert code == 0
        expect = compute_cam(model, sample.image, sample.label, label_id=sample.mask_id)
        assert read_fmap(out).tobytes() == expect.values.tobytes()

    def test_saliency_matches_library(self, model, model_path, corpus, test_samples, tmp_path):
        sample = test_samples[1]
        out = tmp_path / "sal.fmap"
        code = run(
            "infer", "saliency",
            "--model", model_path, "--data", corpus / "test",
            "--image-id", sample.index, "--out", out,
        )
        assert code == 0
        expect = compute_saliency(model, sample.image, sample.label, label_id=sample.mask_id)
        assert read_fmap(out).tobytes() == expect.values.tobytes()

    def test_class_index_override(self, model, model_path, corpus, test_samples, tmp_path):
        sample = test_samples[0]
        other = (sample.label + 3) % 10
        out = tmp_path / "cam.fmap"
        code = run(
            "infer", "cam",
            "--model", model_path, "--data", corpus / "test",
            "--image-id", sample.index, "--class-index", other, "--out", out,
        )
        assert code == 0
        expect = compute_cam(model, sample.image, other)
        assert read_fmap(out).tobytes() == expect.values.tobytes()

    def test_class_index_out_of_range(self, model_path, corpus, tmp_path):
        code = run(
            "infer", "cam",
            "--model", model_path, "--data", corpus / "test",
            "--image-id", 0, "--class-index", 10, "--out", tmp_path / "x.fmap",
        )
        assert code == 2

    def test_missing_image_id(self, model_path, corpus, tmp_path, capsys):
        code = run(
            "infer", "cam",
            "--model", model_path, "--data", corpus / "test",
            "--image-id", 9999, "--out", tmp_path / "x.fmap",
        )
        assert code == 3
        assert "9999" in capsys.readouterr().err

    def test_bad_checkpoint(self, corpus, tmp_path):
        bad = tmp_path / "bad.aslc"
        bad.write_bytes(b"not a checkpoint")
        code = run(
            "infer", "cam",
            "--model", bad, "--data", corpus / "test",
            "--image-id", 0, "--out", tmp_path / "x.fmap",
        )
        assert code == 3


# ---------------------------------------------------------- aggregate


class TestAggregateCli:
    def test_smoothgrad_matches_library(self, model, model_path, corpus, test_samples, tmp_path):
        sample = test_samples[0]
        out = tmp_path / "sg.fmap"
        code = run(
            "aggregate",
            "--model", model_path, "--data", corpus / "test",
            "--image-id", sample.index, "--method", "smoothgrad",
            "--seed", 42, "--n-samples", 3, "--sigma", 0.4, "--out", out,
        )
        assert code == 0
        expect = smoothgrad(
            model, sample.image, sample.label,
            sigma=0.4, n_samples=3, base_seed=42, label_id=sample.mask_id,
        )
        assert read_fmap(out).tobytes() == expect.values.tobytes()

    def test_disc_method_gets_own_evidence(self, model_path, corpus, tmp_path):
        out = tmp_path / "dc.fmap"
        code = run(
            "aggregate",
            "--model", model_path, "--data", corpus / "test",
            "--image-id", 0, "--method", "disc_patch",
            "--seed", 5, "--n-samples", 2, "--grid", 4, "--out", out,
        )
        assert code == 0
        assert read_fmap(out).shape == (32, 32)

    def test_seed_required(self, model_path, corpus, tmp_path, capsys):
        code = run(
            "aggregate",
            "--model", model_path, "--data", corpus / "test",
            "--image-id", 0, "--method", "smoothgrad", "--out", tmp_path / "x.fmap",
        )
        assert code == 2
        assert "--seed" in capsys.readouterr().err

    def test_invalid_plan_value(self, model_path, corpus, tmp_path):
        code = run(
            "aggregate",
            "--model", model_path, "--data", corpus / "test",
            "--image-id", 0, "--method", "binarymask", "--keep-prob", 0.0,
            "--seed", 5, "--out", tmp_path / "x.fmap",
        )
        assert code == 2


# ------------------------------------------------------------ resolve


class TestResolveCli:
    def test_external_map_equals_in_process(self, model, model_path, corpus, test_samples, tmp_path):
        # a map exported to FMAP and resolved by the CLI must match the
        # in-process resolve of the same map exactly
        sample = test_samples[2]
        fmap = tmp_path / "cam.fmap"
        assert run(
            "infer", "cam",
            "--model", model_path, "--data", corpus / "test",
            "--image-id", sample.index, "--out", fmap,
        ) == 0
        mask_path = tmp_path / "mask.pgm"
        assert run(
            "resolve", "basic",
            "--maps", f"{sample.mask_id}={fmap}", "--tau", 0.25, "--out", mask_path,
        ) == 0
        cam = compute_cam(model, sample.image, sample.label, label_id=sample.mask_id)
        expect = resolve_basic([cam], 0.25)
        assert read_pgm(mask_path).tobytes() == expect.tobytes()

    def test_handwritten_map(self, tmp_path):
        values = np.zeros((6, 6), np.float32)
        values[2:5, 1:4] = 0.8
        fmap = tmp_path / "v.fmap"
        write_fmap(fmap, values)
        out = tmp_path / "m.pgm"
        assert run("resolve", "basic", "--maps", f"3={fmap}", "--tau", 0.5, "--out", out) == 0
        mask = read_pgm(out)
        assert (mask[2:5, 1:4] == 3).all()
        assert mask.sum() == 9 * 3

    def test_smooth_matches_library(self, tmp_path):
        gen = np.random.default_rng(4)
        values = gen.random((16, 16), dtype=np.float32)
        fmap = tmp_path / "v.fmap"
        write_fmap(fmap, values)
        out = tmp_path / "m.pgm"
        assert run(
            "resolve", "smooth",
            "--maps", f"1={fmap}", "--tau", 0.5, "--kernel-size", 5, "--sigma", 2.0,
            "--out", out,
        ) == 0
        smap = ScoreMap(kind="cam", class_id=1, raw=values, values=values, z=1.0)
        expect = resolve_smooth([smap], 0.5, size=5, sigma=2.0)
        assert read_pgm(out).tobytes() == expect.tobytes()

    def test_superpixel_image_sources_agree(self, model_path, corpus, test_samples, tmp_path):
        sample = test_samples[0]
        fmap = tmp_path / "cam.fmap"
        assert run(
            "infer", "cam",
            "--model", model_path, "--data", corpus / "test",
            "--image-id", sample.index, "--out", fmap,
        ) == 0
        by_dataset = tmp_path / "a.pgm"
        assert run(
            "resolve", "superpixel",
            "--maps", f"{sample.mask_id}={fmap}", "--tau", 0.3,
            "--data", corpus / "test", "--image-id", sample.index,
            "--out", by_dataset,
        ) == 0
        img_fmap = tmp_path / "img.fmap"
        write_fmap(img_fmap, sample.image)
        by_file = tmp_path / "b.pgm"
        assert run(
            "resolve", "superpixel",
            "--maps", f"{sample.mask_id}={fmap}", "--tau", 0.3,
            "--image", img_fmap, "--out", by_file,
        ) == 0
        assert by_dataset.read_bytes() == by_file.read_bytes()

    def test_superpixel_needs_one_image_source(self, tmp_path, capsys):
        fmap = tmp_path / "v.fmap"
        write_fmap(fmap, np.zeros((4, 4), np.float32))
        assert run(
            "resolve", "superpixel", "--maps", f"1={fmap}", "--tau", 0.3, "--out", tmp_path / "m.pgm",
        ) == 2

    def test_duplicate_class_ids(self, tmp_path):
        fmap = tmp_path / "v.fmap"
        write_fmap(fmap, np.zeros((4, 4), np.float32))
        code = run(
            "resolve", "basic", "--maps", f"1={fmap},1={fmap}", "--tau", 0.3,
            "--out", tmp_path / "m.pgm",
        )
        assert code == 2

    def test_tau_out_of_range(self, tmp_path):
        fmap = tmp_path / "v.fmap"
        write_fmap(fmap, np.zeros((4, 4), np.float32))
        assert run("resolve", "basic", "--maps", f"1={fmap}", "--tau", 0, "--out", tmp_path / "m.pgm") == 2

    def test_unnormalized_map_rejected(self, tmp_path):
        fmap = tmp_path / "v.fmap"
        write_fmap(fmap, np.full((4, 4), 1.5, np.float32))
        assert run("resolve", "basic", "--maps", f"1={fmap}", "--tau", 0.3, "--out", tmp_path / "m.pgm") == 3


# ----------------------------------------------------------- evaluate


class TestEvaluateCli:
    def test_own_cam_dr_recall_is_one(self, model_path, corpus, tmp_path):
        # predictions thresholded from the same CAM that defines the
        # discriminative region cover it completely, by construction
        prefix = tmp_path / "eval"
        code = run(
            "evaluate",
            "--model", model_path, "--data", corpus / "test",
            "--method", "cam", "--tau", 0.25, "--dr-tau", 0.25,
            "--out-prefix", prefix,
        )
        assert code == 0
        report = json.loads((tmp_path / "eval.json").read_text())
        assert report["macro_dr_recall"] == 1.0
        defined = [v for v in report["dr_recall"].values() if v is not None]
        assert defined and all(v == 1.0 for v in defined)

    def test_report_files_agree(self, model_path, corpus, tmp_path):
        prefix = tmp_path / "eval"
        assert run(
            "evaluate",
            "--model", model_path, "--data", corpus / "test",
            "--method", "saliency", "--tau", 0.15, "--out-prefix", prefix, "--limit", 3,
        ) == 0
        report = json.loads((tmp_path / "eval.json").read_text())
        assert report["num_images"] == 3
        csv_lines = (tmp_path / "eval.csv").read_text().splitlines()
        assert csv_lines[0] == "metric,value"
        by_name = dict(line.split(",", 1) for line in csv_lines[1:])
        assert by_name["miou"] == f"{report['miou']:.9g}"

    def external_fixture(self, tmp_path):
        """Two 8x8 images, two classes with disjoint support."""
        scores = tmp_path / "scores"
        gts = tmp_path / "gts"
        scores.mkdir()
        gts.mkdir()
        gen = np.random.default_rng(12)
        triples = []
        for i in range(2):
            gt = np.zeros((8, 8), np.uint8)
            gt[1:4, 1:4] = 1
            gt[5:8, 4 + i:8] = 2
            maps = {}
            for cid, region in ((1, gt == 1), (2, gt == 2)):
                v = (gen.random((8, 8), dtype=np.float32) * 0.3).astype(np.float32)
                v[region] = 0.9
                v[~region & (gt > 0)] = 0.0  # keep supports disjoint
                write_fmap(scores / f"img{i}_score_c{cid}.fmap", v)
                maps[cid] = v
            write_pgm(gts / f"img{i}_gt.pgm", gt)
            triples.append((maps, gt))
        return scores, gts, triples

    def test_external_matches_hand_oracle(self, tmp_path):
        scores, gts, triples = self.external_fixture(tmp_path)
        prefix = tmp_path / "ext"
        code = run(
            "evaluate",
            "--scores-dir", scores, "--gt-dir", gts,
            "--tau", 0.5, "--dr-from-scores", "true", "--dr-tau", 0.5,
            "--out-prefix", prefix,
        )
        assert code == 0
        acc = ConfusionAccumulator(3)
        for maps, gt in triples:
            smaps = [
                ScoreMap(kind="cam", class_id=c, raw=v, values=v, z=1.0)
                for c, v in maps.items()
            ]
            pred = resolve_basic(smaps, 0.5)
            partitions = {}
            for sm in smaps:
                gt_c = gt == sm.class_id
                above = sm.values >= np.float32(0.5)
                partitions[sm.class_id] = (gt_c & above, gt_c & ~above)
            acc.add(pred, gt, partitions)
        expect = build_report(acc, 0.5)
        assert (tmp_path / "ext.json").read_text().strip() == expect.to_json().strip()

    def test_external_smooth_resolver(self, tmp_path):
        scores, gts, _ = self.external_fixture(tmp_path)
        prefix = tmp_path / "ext"
        code = run(
            "evaluate",
            "--scores-dir", scores, "--gt-dir", gts,
            "--tau", 0.5, "--resolver", "smooth", "--smooth-size", 3, "--smooth-sigma", 1.0,
            "--out-prefix", prefix,
        )
        assert code == 0
        assert json.loads((tmp_path / "ext.json").read_text())["num_images"] == 2

    def test_external_superpixel_rejected(self, tmp_path):
        scores, gts, _ = self.external_fixture(tmp_path)
        code = run(
            "evaluate",
            "--scores-dir", scores, "--gt-dir", gts,
            "--tau", 0.5, "--resolver", "superpixel", "--out-prefix", tmp_path / "x",
        )
        assert code == 2

    def test_both_modes_rejected(self, model_path, corpus, tmp_path):
        code = run(
            "evaluate",
            "--model", model_path, "--data", corpus / "test",
            "--scores-dir", tmp_path, "--gt-dir", tmp_path,
            "--tau", 0.5, "--out-prefix", tmp_path / "x",
        )
        assert code == 2

    def test_neither_mode_rejected(self, tmp_path):
        assert run("evaluate", "--tau", 0.5, "--out-prefix", tmp_path / "x") == 2

    def test_empty_gt_dir(self, tmp_path, capsys):
        (tmp_path / "scores").mkdir()
        (tmp_path / "gts").mkdir()
        code = run(
            "evaluate",
            "--scores-dir", tmp_path / "scores", "--gt-dir", tmp_path / "gts",
            "--tau", 0.5, "--out-prefix", tmp_path / "x",
        )
        assert code == 3


# ------------------------------------------------------ sweep threshold


class TestSweepThresholdCli:
    def test_csv_covers_the_grid(self, model_path, corpus, tmp_path):
        prefix = tmp_path / "sw"
        assert run(
            "sweep", "threshold",
            "--model", model_path, "--data", corpus / "test",
            "--method", "cam", "--out-prefix", prefix, "--limit", 4,
        ) == 0
        lines = (tmp_path / "sw_sweep.csv").read_text().splitlines()
        assert lines[0] == "tau,miou"
        taus = [float(line.split(",")[0]) for line in lines[1:]]
        assert taus == [float(t) for t in TAU_GRID]

    def test_report_tau_is_argmax(self, model_path, corpus, tmp_path):
        prefix = tmp_path / "sw"
        assert run(
            "sweep", "threshold",
            "--model", model_path, "--data", corpus / "test",
            "--method", "saliency", "--out-prefix", prefix, "--limit", 4,
        ) == 0
        lines = (tmp_path / "sw_sweep.csv").read_text().splitlines()[1:]
        rows = [(float(t), float(m)) for t, m in (line.split(",") for line in lines)]
        best = max(m for _, m in rows)
        first_best = next(t for t, m in rows if m == best)
        report = json.loads((tmp_path / "sw_report.json").read_text())
        assert report["tau"] == first_best

    def test_naive_flag_is_byte_identical(self, model_path, corpus, tmp_path):
        a, b = tmp_path / "fast", tmp_path / "naive"
        for prefix, naive in ((a, "false"), (b, "true")):
            assert run(
                "sweep", "threshold",
                "--model", model_path, "--data", corpus / "test",
                "--method", "cam", "--out-prefix", prefix, "--limit", 3,
                "--naive", naive,
            ) == 0
        for suffix in ("_sweep.csv", "_report.json", "_report.csv"):
            fast = (tmp_path / f"fast{suffix}").read_bytes()
            naive = (tmp_path / f"naive{suffix}").read_bytes()
            assert fast == naive

    def test_worker_count_does_not_change_bytes(self, model_path, corpus, tmp_path, monkeypatch):
        outputs = []
        for threads in ("1", "4"):
            monkeypatch.setenv("ASLAB_THREADS", threads)
            prefix = tmp_path / f"t{threads}"
            assert run(
                "sweep", "threshold",
                "--model", model_path, "--data", corpus / "test",
                "--method", "saliency", "--out-prefix", prefix, "--limit", 4,
            ) == 0
            outputs.append((tmp_path / f"t{threads}_sweep.csv").read_bytes())
        assert outputs[0] == outputs[1]


# ------------------------------------------------- contribution window


class TestContributionWindowCli:
    def test_degenerate_smoke(self, tmp_path):
        # a 1-image corpus and zero training epochs must still produce
        # a complete, well-formed table
        root = tmp_path / "tiny"
        assert run(
            "dataset", "build-mnist",
            "--out", root, "--seed", 3, "--train-count", 1, "--test-count", 1, "--side", 32,
        ) == 0
        out = tmp_path / "cw.csv"
        code = run(
            "sweep", "contribution-window",
            "--data", root, "--kernel-sizes", "1,3", "--seed", 5,
            "--epochs", 0, "--channels", 4, "--depth", 2, "--out", out,
        )
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "kernel_size,method,status,tau_star,miou,fg_precision,dr_recall,ndr_recall"
        assert len(lines) == 5  # two sizes x two methods
        for line in lines[1:]:
            fields = line.split(",")
            assert fields[1] in ("cam", "saliency")
            assert fields[2] == "ok"
            assert 0.01 <= float(fields[3]) <= 0.5

    def test_even_kernel_size_rejected(self, corpus, tmp_path):
        code = run(
            "sweep", "contribution-window",
            "--data", corpus, "--kernel-sizes", "2", "--seed", 5,
            "--epochs", 0, "--out", tmp_path / "cw.csv",
        )
        assert code == 2


# ------------------------------------------------------- sensitivity


class TestSensitivityCli:
    def test_sigma_zero_equals_vanilla_saliency(self, model_path, corpus, tmp_path):
        out = tmp_path / "sens.csv"
        assert run(
            "sweep", "sensitivity",
            "--model", model_path, "--data", corpus / "test",
            "--axis", "sigma", "--values", "0", "--seed", 9,
            "--n-samples", 3, "--tau", 0.15, "--limit", 3, "--out", out,
        ) == 0
        row = out.read_text().splitlines()[1].split(",")
        assert row[:3] == ["sigma", "0", "ok"]

        prefix = tmp_path / "vanilla"
        assert run(
            "evaluate",
            "--model", model_path, "--data", corpus / "test",
            "--method", "saliency", "--tau", 0.15, "--limit", 3,
            "--out-prefix", prefix,
        ) == 0
        csv_lines = (tmp_path / "vanilla.csv").read_text().splitlines()
        vanilla = dict(line.split(",", 1) for line in csv_lines[1:])
        assert row[3] == vanilla["miou"]
        assert row[4] == vanilla["fg_precision"]
        assert row[5] == vanilla["macro_dr_recall"]
        assert row[6] == vanilla["macro_ndr_recall"]

    def test_same_seed_same_bytes(self, model_path, corpus, tmp_path):
        files = []
        for name in ("a.csv", "b.csv"):
            out = tmp_path / name
            assert run(
                "sweep", "sensitivity",
                "--model", model_path, "--data", corpus / "test",
                "--axis", "p", "--values", "0.7,0.9", "--seed", 21,
                "--n-samples", 2, "--limit", 2, "--out", out,
            ) == 0
            files.append(out.read_bytes())
        assert files[0] == files[1]

    def test_worker_count_does_not_change_bytes(self, model_path, corpus, tmp_path, monkeypatch):
        files = []
        for threads in ("1", "4"):
            monkeypatch.setenv("ASLAB_THREADS", threads)
            out = tmp_path / f"s{threads}.csv"
            assert run(
                "sweep", "sensitivity",
                "--model", model_path, "--data", corpus / "test",
                "--axis", "n_crops", "--values", "2,4", "--seed", 13,
                "--limit", 2, "--out", out,
            ) == 0
            files.append(out.read_bytes())
        assert files[0] == files[1]

    def test_bad_point_isolated(self, model_path, corpus, tmp_path):
        # p = 0 is an invalid keep probability; its row reports the
        # error and the remaining points still evaluate
        out = tmp_path / "sens.csv"
        assert run(
            "sweep", "sensitivity",
            "--model", model_path, "--data", corpus / "test",
            "--axis", "p", "--values", "0,0.9", "--seed", 9,
            "--n-samples", 2, "--limit", 2, "--out", out,
        ) == 0
        lines = out.read_text().splitlines()
        first = lines[1].split(",")
        second = lines[2].split(",")
        assert first[2] == "error:ConfigError"
        assert first[3] == "undefined"
        assert second[2] == "ok"
        assert second[3] != "undefined"

    def test_fractional_count_axis_isolated(self, model_path, corpus, tmp_path):
        out = tmp_path / "sens.csv"
        assert run(
            "sweep", "sensitivity",
            "--model", model_path, "--data", corpus / "test",
            "--axis", "n_samples", "--values", "2.5,2", "--seed", 9,
            "--limit", 2, "--out", out,
        ) == 0
        lines = out.read_text().splitlines()
        assert lines[1].split(",")[2] == "error:ConfigError"
        assert lines[2].split(",")[2] == "ok"

    def test_unknown_axis_rejected(self, model_path, corpus, tmp_path):
        code = run(
            "sweep", "sensitivity",
            "--model", model_path, "--data", corpus / "test",
            "--axis", "temperature", "--values", "1", "--seed", 9, "--out", tmp_path / "x.csv",
        )
        assert code == 2

    def test_empty_values_rejected(self, model_path, corpus, tmp_path):
        code = run(
            "sweep", "sensitivity",
            "--model", model_path, "--data", corpus / "test",
            "--axis", "sigma", "--values", ",", "--seed", 9, "--out", tmp_path / "x.csv",
        )
        assert code == 2


# ----------------------------------------------------------- hyperplane


class TestHyperplaneCli:
    def test_outputs(self, model_path, corpus, test_samples, tmp_path):
        sample = test_samples[0]
        prefix = tmp_path / "hp"
        code = run(
            "hyperplane",
            "--model", model_path, "--data", corpus / "test",
            "--image-id", sample.index, "--out-prefix", prefix,
        )
        assert code == 0
        report = json.loads((tmp_path / "hp.json").read_text())
        assert sum(report["counts"].values()) == report["total_gt_pixels"]
        lines = (tmp_path / "hp.csv").read_text().splitlines()
        assert lines[0] == "pixel_i,pixel_j,cam_dist,sm_dist,quadrant"
        assert len(lines) == report["total_gt_pixels"] + 1

    def test_absent_class_rejected(self, model_path, corpus, test_samples, tmp_path):
        sample = test_samples[0]
        other = (sample.label + 3) % 10
        code = run(
            "hyperplane",
            "--model", model_path, "--data", corpus / "test",
            "--image-id", sample.index, "--class-index", other,
            "--out-prefix", tmp_path / "hp",
        )
        assert code == 2


# ------------------------------------------------------------- train


class TestTrainCli:
    def test_divergence_exits_4(self, corpus, tmp_path, capsys):
        code = run(
            "train",
            "--data", corpus / "train", "--out", tmp_path / "m.aslc",
            "--seed", 1, "--epochs", 2, "--batch-size", 4, "--limit", 8,
            "--learning-rate", "1e25", "--channels", 4, "--depth", 2,
        )
        assert code == 4
        assert "non-finite" in capsys.readouterr().err

    def test_checkpoint_roundtrip(self, corpus, tmp_path):
        out = tmp_path / "m.aslc"
        assert run(
            "train",
            "--data", corpus / "train", "--out", out, "--seed", 2,
            "--epochs", 0, "--kernel-size", 1, "--channels", 4, "--depth", 2, "--limit", 2,
        ) == 0
        loaded, meta = Model.load(out)
        assert loaded.spec.num_classes == 10
        assert meta["kernel_size"] == 1
        assert meta["samples"] == 2
        assert "final_loss" not in meta  # zero epochs trains no steps

    def test_same_seed_same_checkpoint_bytes(self, corpus, tmp_path):
        blobs = []
        for name in ("a.aslc", "b.aslc"):
            out = tmp_path / name
            assert run(
                "train",
                "--data", corpus / "train", "--out", out, "--seed", 33,
                "--epochs", 1, "--batch-size", 4, "--limit", 6,
                "--channels", 4, "--depth", 2,
            ) == 0
            blobs.append(out.read_bytes())
        assert blobs[0] == blobs[1]


# ---------------------------------------------------- dataset command


class TestDatasetCli:
    def test_layout(self, corpus):
        train = load_dataset(corpus / "train")
        test = load_dataset(corpus / "test")
        assert len(train) == 12 and len(test) == 6
        sample = train[0]
        assert sample.image.shape == (1, 32, 32)
        assert sample.mask.shape == (32, 32)
        assert sample.mask.max() == sample.mask_id

    def test_side_below_glyph_rejected(self, tmp_path):
        code = run(
            "dataset", "build-mnist",
            "--out", tmp_path / "c", "--seed", 1, "--train-count", 1,
            "--test-count", 1, "--side", 20,
        )
        assert code == 2

    def test_counts_validated(self, tmp_path):
        code = run(
            "dataset", "build-mnist",
            "--out", tmp_path / "c", "--seed", 1, "--train-count", 0, "--test-count", 1,
        )
        assert code == 2
