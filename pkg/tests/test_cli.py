import os

import numpy as np
import pytest

from duplo import data as D
from duplo import features as F
from duplo.cli import EXIT_INTERNAL, EXIT_OK, EXIT_USAGE, main
from duplo.model import load_checkpoint


def run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Synthetic benchmark, split, and a short training run shared by tests."""
    root = tmp_path_factory.mktemp("cli")
    paths = {
        "cube": str(root / "cube.sitc"),
        "labels": str(root / "labels.sitl"),
        "split": str(root / "split.csv"),
        "model": str(root / "model.ckpt"),
    }
    assert run("synth", "--height", "32", "--width", "32", "--timestamps", "6",
               "--objects-per-class", "4", "--object-size", "4",
               "--cloud-prob", "0.05", "--seed", "5",
               "--out-cube", paths["cube"], "--out-labels", paths["labels"]) == EXIT_OK
    assert run("split", "--labels", paths["labels"], "--seed", "5",
               "--out", paths["split"]) == EXIT_OK
    assert run("train", "--cube", paths["cube"], "--labels", paths["labels"],
               "--split", paths["split"], "--small", "--epochs", "3",
               "--seed", "5", "--out", paths["model"]) == EXIT_OK
    return paths


class TestSynthAndSplit:
    def test_outputs_readable(self, workdir):
        cube = D.read_cube(workdir["cube"])
        labels = D.read_labels(workdir["labels"])
        assert cube.data.shape[:2] == (6, 4)
        assert labels.num_classes() == 3

    def test_split_file_tokens(self, workdir):
        with open(workdir["split"]) as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
        assert lines
        parts = set()
        for ln in lines:
            oid, name = ln.split(",")
            int(oid)
            assert name in ("train", "val", "test")
            parts.add(name)
        assert parts == {"train", "val", "test"}

    def test_missing_labels_exit_2(self, tmp_path, capsys):
        code = run("split", "--labels", str(tmp_path / "absent.sitl"),
                   "--out", str(tmp_path / "s.csv"))
        assert code == EXIT_USAGE
        assert "cannot open" in capsys.readouterr().err


class TestPreprocess:
    def test_ndvi_adds_band(self, workdir, tmp_path):
        out = str(tmp_path / "pre.sitc")
        assert run("preprocess", "--input", workdir["cube"], "--output", out,
                   "--gapfill", "--ndvi", "--normalize") == EXIT_OK
        cube = D.read_cube(out)
        assert cube.bands == ["B2", "B3", "B4", "B8", "NDVI"]
        assert np.all(cube.data >= 0.0) and np.all(cube.data <= 1.0)

    def test_missing_input_exit_2(self, tmp_path):
        assert run("preprocess", "--input", str(tmp_path / "nope.sitc"),
                   "--output", str(tmp_path / "o.sitc")) == EXIT_USAGE


class TestTrain:
    def test_checkpoint_and_history_written(self, workdir):
        assert os.path.exists(workdir["model"])
        with open(workdir["model"] + ".history.csv") as fh:
            lines = fh.read().splitlines()
        assert lines[0] == "epoch,train_loss,val_accuracy"
        assert len(lines) == 4

    def test_checkpoint_loadable_with_metadata(self, workdir):
        model, meta = load_checkpoint(workdir["model"])
        assert model.config.num_classes == 3
        # Stats cover the four input bands plus the derived vegetation index.
        assert len(meta["norm_min"]) == 5
        assert meta["config"]["seed"] == 5

    def test_defaults_echoed_before_data_load(self, tmp_path, capsys):
        # A missing cube aborts after the config echo, exposing the defaults.
        code = run("train", "--cube", str(tmp_path / "absent.sitc"),
                   "--labels", str(tmp_path / "absent.sitl"),
                   "--split", str(tmp_path / "absent.csv"),
                   "--out", str(tmp_path / "m.ckpt"))
        assert code == EXIT_USAGE
        out = capsys.readouterr().out
        assert "lr=0.0002" in out
        assert "epochs=300" in out
        assert "batch=128" in out
        assert "alpha1=0.3" in out

    def test_same_seed_byte_identical_checkpoints(self, workdir, tmp_path):
        out2 = str(tmp_path / "model2.ckpt")
        assert run("train", "--cube", workdir["cube"], "--labels", workdir["labels"],
                   "--split", workdir["split"], "--small", "--epochs", "3",
                   "--seed", "5", "--out", out2) == EXIT_OK
        with open(workdir["model"], "rb") as a, open(out2, "rb") as b:
            assert a.read() == b.read()


class TestEvaluate:
    def test_writes_metrics_and_confusion(self, workdir, tmp_path):
        out_dir = str(tmp_path / "eval")
        assert run("evaluate", "--model", workdir["model"], "--cube", workdir["cube"],
                   "--labels", workdir["labels"], "--split", workdir["split"],
                   "--part", "test", "--out-dir", out_dir) == EXIT_OK
        with open(os.path.join(out_dir, "metrics.txt")) as fh:
            text = fh.read()
        assert "accuracy:" in text and "kappa:" in text
        with open(os.path.join(out_dir, "confusion.csv")) as fh:
            rows = [r.split(",") for r in fh.read().splitlines()]
        assert len(rows) == 3 and all(len(r) == 3 for r in rows)
        with open(os.path.join(out_dir, "confusion.ppm"), "rb") as fh:
            assert fh.read(2) == b"P6"

    def test_deterministic_outputs(self, workdir, tmp_path):
        dirs = [str(tmp_path / f"eval{i}") for i in range(2)]
        for d in dirs:
            assert run("evaluate", "--model", workdir["model"],
                       "--cube", workdir["cube"], "--labels", workdir["labels"],
                       "--split", workdir["split"], "--out-dir", d) == EXIT_OK
        for name in ("metrics.txt", "confusion.csv"):
            with open(os.path.join(dirs[0], name), "rb") as a, \
                 open(os.path.join(dirs[1], name), "rb") as b:
                assert a.read() == b.read()


class TestPredict:
    def test_class_map_shape_and_range(self, workdir, tmp_path):
        out = str(tmp_path / "map.i32")
        img = str(tmp_path / "map.ppm")
        assert run("predict", "--model", workdir["model"], "--cube", workdir["cube"],
                   "--out", out, "--ppm", img) == EXIT_OK
        cmap = np.fromfile(out, dtype="<i4")
        assert cmap.size == 32 * 32
        assert cmap.min() >= 1 and cmap.max() <= 3
        with open(img, "rb") as fh:
            assert fh.read(2) == b"P6"

    def test_missing_model_exit_2(self, workdir, tmp_path):
        assert run("predict", "--model", str(tmp_path / "absent.ckpt"),
                   "--cube", workdir["cube"],
                   "--out", str(tmp_path / "m.i32")) == EXIT_USAGE


class TestFeatures:
    def test_csv_and_binary_agree(self, workdir, tmp_path):
        csv_path = str(tmp_path / "f.csv")
        bin_path = str(tmp_path / "f.bin")
        assert run("features", "--model", workdir["model"], "--cube", workdir["cube"],
                   "--labels", workdir["labels"], "--out", csv_path,
                   "--format", "csv") == EXIT_OK
        assert run("features", "--model", workdir["model"], "--cube", workdir["cube"],
                   "--labels", workdir["labels"], "--out", bin_path,
                   "--format", "bin") == EXIT_OK
        a = F.read_features_csv(csv_path)
        b = F.read_features_bin(bin_path)
        assert len(a) == len(b) > 0
        dim = len(a[0][2])
        for (oa, la, va), (ob, lb, vb) in zip(a, b):
            assert (oa, la) == (ob, lb)
            assert len(va) == len(vb) == dim
            assert np.array_equal(va, vb)

    def test_labels_are_one_based(self, workdir, tmp_path):
        path = str(tmp_path / "f.csv")
        assert run("features", "--model", workdir["model"], "--cube", workdir["cube"],
                   "--labels", workdir["labels"], "--out", path) == EXIT_OK
        labels = {rec[1] for rec in F.read_features_csv(path)}
        assert labels <= {1, 2, 3}


class TestAblate:
    def test_four_variant_table(self, workdir, tmp_path):
        out = str(tmp_path / "ablation.tsv")
        assert run("ablate", "--cube", workdir["cube"], "--labels", workdir["labels"],
                   "--split", workdir["split"], "--small", "--epochs", "2",
                   "--seed", "5", "--out", out) == EXIT_OK
        with open(out) as fh:
            lines = fh.read().splitlines()
        assert lines[0] == "variant\taccuracy\tfmeasure\tkappa"
        names = [ln.split("\t")[0] for ln in lines[1:]]
        assert names == ["DuPLO", "DuPLO_noAux", "Cbranch", "Rbranch"]
        for ln in lines[1:]:
            cells = ln.split("\t")
            assert len(cells) == 4
            for v in cells[1:]:
                float(v)


class TestGradcheck:
    def test_passes_at_default_tolerance(self):
        assert run("gradcheck") == EXIT_OK

    def test_impossible_tolerance_fails(self):
        assert run("gradcheck", "--tol", "1e-18") == EXIT_INTERNAL


class TestUsageErrors:
    def test_unknown_command(self):
        with pytest.raises(SystemExit) as e:
            run("frobnicate")
        assert e.value.code == 2

    def test_missing_required_argument(self):
        with pytest.raises(SystemExit) as e:
            run("train")
        assert e.value.code == 2
