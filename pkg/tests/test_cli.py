import json
import time

import numpy as np
import pytest

from greybox.cli import EXIT_DIVERGED, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from greybox.cli.checkpoint import Checkpoint, decode_gbck, encode_gbck, load_checkpoint
from greybox.cli.commands import load_encoder
from greybox.cli.config import build_model, load_recipe, recipe_names
from greybox.cli.export import grid_to_csv, heatmap_pgm, parse_grid_csv, read_pgm
from greybox.datagen import load_dataset, save_dataset
from greybox.errors import ConfigurationError, ContractError
from greybox.postestim import AxisSpec, full_box_axes, point_estimate_grid
from greybox.training import Dataset

TINY = {"schema_version": 1, "model": {"theory": "sine", "x_dim": 1, "hidden": [8, 8]},
        "train": {"scheme": "adaptive", "epochs": 12, "batch_size": 10, "valid_every": 4}}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def tree_bytes(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy") / "data"
    assert main(["generate", "--benchmark", "toy", "--out", str(d)]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def adaptive_ckpt(tmp_path_factory, toy_dir):
    d = tmp_path_factory.mktemp("adaptive")
    cfg = write(d / "run.json", TINY)
    assert main(["train", "--config", cfg, "--data", str(toy_dir), "--out", str(d / "out")]) == EXIT_OK
    return d / "out" / "final.gbck"


class TestGenerate:
    def test_toy_default_sizes(self, toy_dir):
        data, meta = load_dataset(toy_dir)
        assert {k: len(v) for k, v in data.items()} == {"train": 40, "valid": 40, "test": 40}
        assert meta["spec"]["benchmark"] == "toy"

    def test_deterministic(self, tmp_path, toy_dir):
        assert main(["generate", "--benchmark", "toy", "--out", str(tmp_path / "again")]) == EXIT_OK
        assert tree_bytes(tmp_path / "again") == tree_bytes(toy_dir)

    def test_config_file(self, tmp_path):
        cfg = write(tmp_path / "gen.json", {"schema_version": 1, "benchmark": "toy", "sizes": [5, 6, 7], "seed": 3})
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "d")]) == EXIT_OK
        data, _ = load_dataset(tmp_path / "d")
        assert [len(data[s]) for s in ("train", "valid", "test")] == [5, 6, 7]

    @pytest.mark.parametrize("argv", [["generate", "--benchmark", "nope"], ["generate"], ["frobnicate"],
                                      ["generate", "--benchmark", "toy", "--seed", "x"]])
    def test_usage_errors(self, tmp_path, argv):
        assert main(argv + ["--out", str(tmp_path / "x")]) == EXIT_USAGE

    def test_schema_version_required(self, tmp_path):
        cfg = write(tmp_path / "gen.json", {"benchmark": "toy"})
        assert main(["generate", "--config", cfg, "--out", str(tmp_path / "d")]) == EXIT_USAGE


class TestTrain:
    def test_outputs(self, adaptive_ckpt):
        out = adaptive_ckpt.parent
        assert {"final.gbck", "best.gbck", "report.csv", "metrics.json"} <= set(p.name for p in out.iterdir())
        report = (out / "report.csv").read_text().splitlines()
        assert report[0] == "epoch,L,R,valid_L" and len(report) == 13
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["epochs_completed"] == 12 and metrics["theta"] is None
        assert np.isfinite(metrics["test_L"])

    def test_rerun_identical(self, tmp_path, toy_dir, adaptive_ckpt):
        cfg = write(tmp_path / "run.json", TINY)
        assert main(["train", "--config", cfg, "--data", str(toy_dir), "--out", str(tmp_path / "o")]) == 0
        assert tree_bytes(tmp_path / "o") == tree_bytes(adaptive_ckpt.parent)

    def test_resume_continues_numbering(self, tmp_path, toy_dir, adaptive_ckpt):
        cfg = write(tmp_path / "run.json", TINY)
        args = ["--data", str(toy_dir)]
        assert main(["train", "--config", cfg, *args, "--out", str(tmp_path / "a"), "--stop-epoch", "5"]) == 0
        assert load_checkpoint(tmp_path / "a" / "final.gbck").epochs_completed == 5
        assert main(["train", "--checkpoint", str(tmp_path / "a" / "final.gbck"), "--out", str(tmp_path / "b")]) == 0
        rows = (tmp_path / "b" / "report.csv").read_text().splitlines()
        assert rows[1].startswith("5,") and rows[-1].startswith("11,")
        assert (tmp_path / "b" / "final.gbck").read_bytes() == adaptive_ckpt.read_bytes()

    def test_inductive_theta_in_box(self, tmp_path, toy_dir):
        run = {**TINY, "train": {**TINY["train"], "scheme": "inductive", "reg": "normd", "lam": 0.1}}
        cfg = write(tmp_path / "run.json", run)
        assert main(["train", "--config", cfg, "--data", str(toy_dir), "--out", str(tmp_path / "o")]) == 0
        ck = load_checkpoint(tmp_path / "o" / "final.gbck")
        assert ck.theta is not None and ck.build_model().box.contains(ck.theta)

    def test_lambda_sweep(self, tmp_path, toy_dir):
        run = {**TINY, "train": {**TINY["train"], "epochs": 2, "reg": "normd"}}
        cfg = write(tmp_path / "run.json", run)
        assert main(["train", "--config", cfg, "--data", str(toy_dir), "--out", str(tmp_path / "s"),
                     "--lambda-sweep"]) == 0
        subdirs = sorted(p.name for p in (tmp_path / "s").iterdir())
        assert subdirs == ["lambda_0.001", "lambda_0.005", "lambda_0.01", "lambda_0.05", "lambda_0.1"]
        for name in subdirs:
            assert load_checkpoint(tmp_path / "s" / name / "final.gbck").config().lam == float(name[7:])

    def test_divergence_exit_code(self, tmp_path):
        x = np.linspace(-1, 1, 10).reshape(10, 1)
        ds = {s: Dataset(x, np.full_like(x, np.inf), s) for s in ("train", "valid", "test")}
        save_dataset(ds, tmp_path / "bad")
        cfg = write(tmp_path / "run.json", TINY)
        assert main(["train", "--config", cfg, "--data", str(tmp_path / "bad"), "--out", str(tmp_path / "o")]) \
            == EXIT_DIVERGED

    def test_missing_data(self, tmp_path):
        cfg = write(tmp_path / "run.json", TINY)
        assert main(["train", "--config", cfg, "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) \
            == EXIT_RUNTIME

    def test_unknown_model_key(self, tmp_path, toy_dir):
        cfg = write(tmp_path / "run.json", {**TINY, "model": {**TINY["model"], "depth": 3}})
        assert main(["train", "--config", cfg, "--data", str(toy_dir), "--out", str(tmp_path / "o")]) == EXIT_USAGE

    def test_bundled_recipe_timing(self, tmp_path, toy_dir):
        assert "toy_adaptive" in recipe_names()
        t0 = time.perf_counter()
        assert main(["train", "--recipe", "toy_adaptive", "--data", str(toy_dir), "--out", str(tmp_path / "o")]) == 0
        assert time.perf_counter() - t0 <= 300


class TestCheckpoint:
    def test_round_trip_bytes(self, adaptive_ckpt):
        data = adaptive_ckpt.read_bytes()
        assert Checkpoint.from_bytes(data).to_bytes() == data

    def test_layout(self, adaptive_ckpt):
        data = adaptive_ckpt.read_bytes()
        assert data[:4] == b"GBCK"
        assert int.from_bytes(data[4:8], "little") == 1
        hlen = int.from_bytes(data[8:16], "little")
        header = json.loads(data[16:16 + hlen])
        count = sum(int(np.prod(t["shape"])) for t in header["tensors"])
        assert len(data) == 16 + hlen + 8 * count
        assert header["epochs_completed"] == 12 and header["scheme"] == "adaptive"

    def test_version_mismatch(self, adaptive_ckpt):
        data = bytearray(adaptive_ckpt.read_bytes())
        data[4] = 2
        with pytest.raises(ContractError, match="version"):
            Checkpoint.from_bytes(bytes(data))

    def test_bad_magic_and_truncation(self, adaptive_ckpt):
        data = adaptive_ckpt.read_bytes()
        with pytest.raises(ContractError):
            Checkpoint.from_bytes(b"XXXX" + data[4:])
        with pytest.raises(ContractError):
            Checkpoint.from_bytes(data[:-8])

    def test_model_restored(self, adaptive_ckpt, toy_dir):
        ck = load_checkpoint(adaptive_ckpt)
        m = ck.build_model()
        assert m.params.checksum() == ck.params.checksum()
        x = load_dataset(toy_dir)[0]["test"].x
        assert m.predict(np.array([1.0, 0.5]), x).shape == x.shape

    def test_generic_container(self):
        tensors = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(-0.0)}
        header, back = decode_gbck(encode_gbck({"kind": "x"}, tensors))
        assert header["kind"] == "x"
        np.testing.assert_array_equal(back["a"], tensors["a"])
        assert back["b"].shape == () and np.signbit(back["b"])


class TestExport:
    def test_csv_round_trip(self):
        axes = [AxisSpec(0, 0.0, 2.0, 3), AxisSpec(1, -1.0, 1.0, 2)]
        values = np.array([[0.1, 1 / 3], [2.0, -5e-300], [np.pi, 7.0]])
        parsed = parse_grid_csv(grid_to_csv(values, axes, [1.0, 0.0], "R", "scale(0.5, corr)"))
        np.testing.assert_array_equal(parsed["values"], values)
        assert parsed["axes"] == axes and parsed["label"] == "scale(0.5, corr)"

    def test_loadtxt_compatible(self, tmp_path):
        values = np.arange(6.0).reshape(2, 3)
        p = tmp_path / "g.csv"
        p.write_text(grid_to_csv(values, [AxisSpec(0, 0, 1, 2), AxisSpec(1, 0, 1, 3)], [0, 0], "L"))
        np.testing.assert_array_equal(np.loadtxt(p, delimiter=","), values)

    def test_pgm_scaling(self):
        img = read_pgm(heatmap_pgm(np.array([[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]])))
        np.testing.assert_array_equal(img, [[0, 51, 102], [153, 204, 255]])

    def test_pgm_constant_and_one_axis(self):
        assert read_pgm(heatmap_pgm(np.full((2, 2), 3.0))).max() == 0
        assert read_pgm(heatmap_pgm(np.array([1.0, 2.0, 3.0]))).shape == (1, 3)


class TestLandscape:
    def test_toy_landscape_files(self, tmp_path, adaptive_ckpt, capsys):
        out = tmp_path / "l"
        assert main(["landscape", "--checkpoint", str(adaptive_ckpt), "--reg", "normd",
                     "--grid", "0:0:2:5,1:-3:3:4", "--out", str(out)]) == 0
        assert "argmin R" in capsys.readouterr().out
        grid = parse_grid_csv((out / "landscape.csv").read_text())
        assert grid["values"].shape == (5, 4)
        assert read_pgm((out / "landscape.pgm").read_bytes()).shape == (5, 4)

    def test_one_axis_single_row(self, tmp_path, adaptive_ckpt):
        assert main(["landscape", "--checkpoint", str(adaptive_ckpt), "--reg", "normd", "--grid", "0:0:2:7",
                     "--out", str(tmp_path)]) == 0
        body = (tmp_path / "landscape.csv").read_text().splitlines()[1:]
        assert len(body) == 1 and len(body[0].split(",")) == 7

    def test_rejects_non_adaptive(self, tmp_path, toy_dir):
        run = {**TINY, "train": {**TINY["train"], "scheme": "inductive"}}
        cfg = write(tmp_path / "run.json", run)
        assert main(["train", "--config", cfg, "--data", str(toy_dir), "--out", str(tmp_path / "o")]) == 0
        assert main(["landscape", "--checkpoint", str(tmp_path / "o" / "final.gbck"), "--reg", "normd",
                     "--out", str(tmp_path / "l")]) == EXIT_RUNTIME

    def test_threshold_summary(self, tmp_path, adaptive_ckpt, capsys):
        assert main(["landscape", "--checkpoint", str(adaptive_ckpt), "--quantity", "NRMSE", "--grid", "0:0:2:3",
                     "--threshold", "10", "--out", str(tmp_path)]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_deterministic_with_threads(self, tmp_path, adaptive_ckpt, monkeypatch):
        argv = ["landscape", "--checkpoint", str(adaptive_ckpt), "--reg", "normd * corr", "--grid",
                "0:0:2:6,1:-3:3:6"]
        assert main(argv + ["--out", str(tmp_path / "a")]) == 0
        monkeypatch.setenv("GREYBOX_THREADS", "4")
        assert main(argv + ["--out", str(tmp_path / "b")]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_regularizer_required(self, tmp_path, adaptive_ckpt):
        assert main(["landscape", "--checkpoint", str(adaptive_ckpt), "--out", str(tmp_path)]) == EXIT_USAGE

    def test_bad_regularizer(self, tmp_path, adaptive_ckpt):
        assert main(["landscape", "--checkpoint", str(adaptive_ckpt), "--reg", "normd +", "--out",
                     str(tmp_path)]) == EXIT_USAGE


class TestEstimate:
    def test_grid_matches_library(self, tmp_path, adaptive_ckpt, toy_dir):
        assert main(["estimate", "--checkpoint", str(adaptive_ckpt), "--reg", "normd", "--method", "grid",
                     "--grid", "0:0:2:9,1:-3:3:9", "--out", str(tmp_path)]) == 0
        result = json.loads((tmp_path / "estimate.json").read_text())
        model = load_checkpoint(adaptive_ckpt).build_model()
        x = load_dataset(toy_dir)[0]["test"].x
        est = point_estimate_grid(model, "normd", x, [AxisSpec(0, 0, 2, 9), AxisSpec(1, -3, 3, 9)])
        assert result["index"] == est.index and result["value"] == est.value
        assert list(result["theta"].values()) == est.theta.values.tolist()

    def test_posterior_beta_zero_uniform(self, tmp_path, adaptive_ckpt):
        assert main(["estimate", "--checkpoint", str(adaptive_ckpt), "--reg", "normd", "--method", "posterior",
                     "--beta", "0", "--grid", "0:0:2:4,1:-3:3:5", "--out", str(tmp_path)]) == 0
        probs = parse_grid_csv((tmp_path / "posterior.csv").read_text())["values"]
        np.testing.assert_array_equal(probs, np.full((4, 5), 1 / 20))

    def test_gradient(self, tmp_path, adaptive_ckpt):
        assert main(["estimate", "--checkpoint", str(adaptive_ckpt), "--reg", "coord2(1)", "--method",
                     "gradient", "--steps", "300", "--lr", "0.05", "--init", "1.0,2.0", "--out", str(tmp_path)]) == 0
        result = json.loads((tmp_path / "estimate.json").read_text())
        assert abs(result["theta"]["c"]) < 1e-2

    def test_encoder_outputs(self, tmp_path, adaptive_ckpt):
        assert main(["estimate", "--checkpoint", str(adaptive_ckpt), "--reg", "normd", "--method", "encoder",
                     "--epochs", "2", "--hidden", "4", "--batch-size", "20", "--out", str(tmp_path)]) == 0
        enc = load_encoder(tmp_path / "encoder.gbck")
        rows = np.loadtxt(tmp_path / "encoder_theta.csv", delimiter=",", skiprows=1)
        assert rows.shape == (40, 2)
        assert enc.box.contains(rows).all()


class TestPredatorPreyRecipe:
    def test_tiny_latent_run_scores_encoder(self, tmp_path):
        gen = write(tmp_path / "gen.json", {"schema_version": 1, "benchmark": "predator_prey",
                                            "sizes": [30, 10, 12]})
        assert main(["generate", "--config", gen, "--out", str(tmp_path / "d")]) == EXIT_OK
        run = load_recipe("pp_latent")
        run["model"]["hidden"] = run["model"]["encoder_hidden"] = [6]
        run["train"].update(epochs=2, batch_size=10, valid_every=1)
        cfg = write(tmp_path / "run.json", run)
        assert main(["train", "--config", cfg, "--data", str(tmp_path / "d"), "--out", str(tmp_path / "t")]) == 0
        ckpt = load_checkpoint(tmp_path / "t" / "final.gbck")
        assert ckpt.build_model().ode.state_bound == 10.0
        assert main(["estimate", "--checkpoint", str(tmp_path / "t" / "final.gbck"), "--split", "test",
                     "--reg", "normd", "--method", "encoder", "--epochs", "1", "--hidden", "4",
                     "--out", str(tmp_path / "e")]) == EXIT_OK
        result = json.loads((tmp_path / "e" / "estimate.json").read_text())
        assert len(result["median_abs_error_over_width"]) == 4
        header = (tmp_path / "e" / "encoder_theta.csv").read_text().splitlines()[0]
        assert "true_delta" in header

    def test_zero_output_init_key(self):
        model = build_model(load_recipe("pp_latent")["model"])
        assert not model.params["fd.2.weight"].any() and not model.params["fd.2.bias"].any()
        assert model.params["fd.0.weight"].any()


class TestCompare:
    CFG ={"schema_version": 1, "model": {"theory": "sine", "x_dim": 1, "hidden": [8]},
           "train": {"epochs": 3, "batch_size": 20}, "reg": "corr + coord2(1)",
           "schemes": ["adaptive", "inductive"], "lambdas": [0.01, 0.1], "seeds": 1,
           "estimate": {"steps": 5}}

    def test_rows_and_single_seed(self, tmp_path, toy_dir, capsys):
        cfg = write(tmp_path / "c.json", self.CFG)
        assert main(["compare", "--config", cfg, "--data", str(toy_dir), "--out", str(tmp_path / "o")]) == 0
        lines = (tmp_path / "o" / "summary.csv").read_text().splitlines()
        assert lines[0] == "scheme,lambda,n,test_L_mean,test_L_se,test_R_mean,test_R_se"
        assert len(lines) == 1 + 2 * 2
        for row in lines[1:]:
            cols = row.split(",")
            assert cols[2] == "1" and float(cols[4]) == 0.0 and float(cols[6]) == 0.0
        assert capsys.readouterr().out.count("| adaptive |") == 2

    def test_standard_error(self, tmp_path, toy_dir):
        cfg = write(tmp_path / "c.json", {**self.CFG, "schemes": ["inductive"], "lambdas": [0.1]})
        assert main(["compare", "--config", cfg, "--data", str(toy_dir), "--seeds", "3",
                     "--out", str(tmp_path / "o")]) == 0
        runs = json.loads((tmp_path / "o" / "runs.json").read_text())
        r = runs[0]
        assert r["n"] == 3
        assert r["test_R_se"] == pytest.approx(np.std(r["test_R"], ddof=1) / np.sqrt(3), rel=1e-12)


class TestConfig:
    def test_recipes_valid(self):
        for name in recipe_names():
            cfg = load_recipe(name)
            build_model(cfg["model"])

    def test_unknown_recipe(self):
        with pytest.raises(ConfigurationError):
            load_recipe("nope")

    def test_diffusion_dx_from_meta(self):
        m = build_model({"theory": "diffusion", "kind": "ode_additive", "fd_arch": "conv", "x_dim": 2,
                         "hidden": [4], "ode": {"dt": 0.1, "horizon": 2}}, {"spec": {"grid": 32}})
        assert m.theory.dx == 2.0 / 32

    def test_full_box_default_axes(self, adaptive_ckpt):
        m = load_checkpoint(adaptive_ckpt).build_model()
        assert full_box_axes(m.box, (0, 1), 51)[1] == AxisSpec(1, -np.pi, np.pi, 51)
