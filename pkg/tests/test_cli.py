import json

import numpy as np
import pytest

from confined_diffusion.cli import (EXIT_CONTAINMENT, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, UsageError, main,
                                    parse_overrides, resolve_config)
from confined_diffusion.datasets import load_csv, save_csv
from confined_diffusion.score_model import load_checkpoint, save_checkpoint


def run(tmp_path, *argv):
    return main(["--out", str(tmp_path), "--threads", "1", *argv])


class TestConfig:
    def test_overrides(self):
        assert parse_overrides(["--train.lr=0.1", "--data.set=gm"]) == {"train": {"lr": 0.1}, "data": {"set": "gm"}}

    def test_unknown_key(self, tmp_path):
        with pytest.raises(UsageError):
            resolve_config(overrides={"train": {"learning_rate": 1.0}})
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"bogus": 1}))
        assert main(["--config", str(path), "data", "gen"]) == EXIT_USAGE

    def test_bad_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{")
        assert main(["--config", str(path), "data", "gen"]) == EXIT_USAGE

    def test_bad_argument(self, tmp_path):
        assert run(tmp_path, "data", "gen", "stray") == EXIT_USAGE


class TestData:
    def test_gen_gm(self, tmp_path):
        assert run(tmp_path, "data", "gen", "--set", "gm", "--n", "4000") == EXIT_OK
        pts = load_csv(tmp_path / "gm.csv").points
        assert pts.shape == (4000, 2) and np.abs(pts).max() <= 3.0
        echo = json.loads((tmp_path / "resolved_config.json").read_text())
        assert echo["command"] == "data gen" and echo["config"]["data"]["n"] == 4000

    def test_gen_wheel(self, tmp_path):
        assert run(tmp_path, "data", "gen", "--set", "wheel") == EXIT_OK
        assert len(load_csv(tmp_path / "wheel.csv")) == 1232

    def test_unknown_set(self, tmp_path):
        assert run(tmp_path, "data", "gen", "--set", "spiral") == EXIT_USAGE

    def test_check(self, tmp_path):
        path = tmp_path / "p.csv"
        save_csv(np.array([[0.5, 0.5], [2.0, 0.0]]), path)
        dom = '--domain={"type": "box", "lo": [-1, -1], "hi": [1, 1]}'
        assert run(tmp_path, "data", "check", "--file", str(path), dom) == EXIT_CONTAINMENT
        save_csv(np.array([[0.5, 0.5]]), path)
        assert run(tmp_path, "data", "check", "--file", str(path), dom) == EXIT_OK


@pytest.fixture
def data_file(tmp_path):
    path = tmp_path / "data.csv"
    save_csv(np.random.default_rng(0).uniform(-1, 1, (40, 2)), path)
    return path


TRAIN = ["--dynamics.T=0.1", "--dynamics.h=0.01", "--train.hidden=[8,8]",
         '--domain={"type": "box", "lo": [-1, -1], "hi": [1, 1]}']


class TestTrainSample:
    def test_reproducible_checkpoint(self, tmp_path, data_file):
        for d in ("a", "b"):
            assert run(tmp_path / d, "train", "--data", str(data_file), "--iterations", "3", *TRAIN) == EXIT_OK
        a = (tmp_path / "a" / "checkpoint.bin").read_bytes()
        assert a == (tmp_path / "b" / "checkpoint.bin").read_bytes()
        assert (tmp_path / "a" / "loss.csv").read_text().count("\n") == 4
        assert json.loads((tmp_path / "a" / "resolved_config.json").read_text())["command"] == "train"

    def test_loss_flag(self, tmp_path, data_file):
        for loss in ("ism_reflected_corrected", "ism_reflected_uncorrected"):
            assert run(tmp_path / loss, "train", "--data", str(data_file), "--iterations", "2", "--model",
                       "reflected", "--scheme", "symmetrized", "--loss", loss, *TRAIN) == EXIT_OK
        rows = {loss: (tmp_path / loss / "loss.csv").read_text().splitlines()[1:]
                for loss in ("ism_reflected_corrected", "ism_reflected_uncorrected")}
        # zero-initialised output: only the correction column may differ on the first row
        first_c = rows["ism_reflected_corrected"][0].split(",")
        first_u = rows["ism_reflected_uncorrected"][0].split(",")
        assert first_c[:4] == first_u[:4]

    def test_missing_dataset(self, tmp_path):
        assert run(tmp_path, "train", "--data", str(tmp_path / "none.csv"), *TRAIN) == EXIT_USAGE

    def test_non_finite_checkpoint(self, tmp_path, data_file):
        assert run(tmp_path, "train", "--data", str(data_file), "--iterations", "1", *TRAIN) == EXIT_OK
        ckpt = tmp_path / "checkpoint.bin"
        net, header, _ = load_checkpoint(ckpt, "raw")
        nan = np.full(net.n_params, np.nan)
        save_checkpoint(tmp_path / "nan.bin", net, {"raw": nan, "ema": nan}, header["meta"])
        assert run(tmp_path / "s", "sample", "--checkpoint", str(tmp_path / "nan.bin"), "--n", "5") == EXIT_NUMERIC

    @pytest.mark.parametrize("scheme,per_step", [("cbbk_s", 1), ("saoas_2fe", 2)])
    def test_sample_nfe(self, tmp_path, data_file, scheme, per_step):
        assert run(tmp_path, "train", "--data", str(data_file), "--iterations", "1", *TRAIN) == EXIT_OK
        ckpt = str(tmp_path / "checkpoint.bin")
        out = tmp_path / "s"
        assert run(out, "sample", "--checkpoint", ckpt, "--scheme", scheme, "--n", "30") == EXIT_OK
        meta = json.loads((out / "samples.meta.json").read_text())
        assert meta["nfe"] == per_step * 10
        assert load_csv(out / "samples.csv").points.shape == (30, 2)

    def test_unknown_scheme(self, tmp_path):
        assert run(tmp_path, "sample", "--scheme", "leapfrog", "--generate.analytic=zero") == EXIT_USAGE

    def test_analytic_sampling_deterministic(self, tmp_path):
        args = ("sample", "--scheme", "symmetrized", "--generate.analytic=zero", "--n", "50",
                "--dynamics.h=0.05", '--domain={"type": "box", "lo": [-1, -1], "hi": [1, 1]}')
        assert run(tmp_path / "a", *args) == EXIT_OK and run(tmp_path / "b", *args) == EXIT_OK
        assert (tmp_path / "a" / "samples.csv").read_bytes() == (tmp_path / "b" / "samples.csv").read_bytes()


class TestEval:
    def test_identical_files(self, tmp_path, data_file):
        assert run(tmp_path, "eval", "--data", str(data_file), "--samples", str(data_file), str(data_file)) == EXIT_OK
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        assert metrics["mmd"]["mean"] == 0.0 and len(metrics["runs"]) == 2

    def test_runs(self, tmp_path, data_file):
        assert run(tmp_path, "eval", "--data", str(data_file), "--runs", "10", "--scheme", "symmetrized",
                   "--generate.analytic=zero", "--generate.n_samples=20", "--dynamics.h=0.1",
                   '--domain={"type": "box", "lo": [-1, -1], "hi": [1, 1]}') == EXIT_OK
        metrics = json.loads((tmp_path / "metrics.json").read_text())
        assert len(metrics["runs"]) == 10 and metrics["violation"]["mean"] == 0.0
        assert metrics["mmd"]["stderr"] > 0

    def test_dimension_mismatch(self, tmp_path, data_file):
        other = tmp_path / "three.csv"
        save_csv(np.zeros((5, 3)), other)
        assert run(tmp_path, "eval", "--data", str(data_file), "--samples", str(other)) == EXIT_USAGE


class TestStudy:
    def test_stationarity(self, tmp_path):
        assert run(tmp_path, "study", "stationarity", "--study.n=2000", "--study.T=1.0", "--study.h=0.05") == EXIT_OK
        rep = json.loads((tmp_path / "stationarity.json").read_text())
        assert 0.0 <= rep["position"]["p_value"] <= 1.0

    def test_weak_order(self, tmp_path):
        assert run(tmp_path, "study", "weak-order", "--study.n=2000", "--study.x0=[0.9]",
                   "--study.h_list=[0.2,0.1,0.05]") == EXIT_OK
        assert (tmp_path / "weak_order.json").exists() and (tmp_path / "weak_order.csv").exists()

    def test_local_time(self, tmp_path, capsys):
        assert run(tmp_path, "study", "local-time", "--study.n=2000", "--study.h_list=[0.1,0.05,0.025]",
                   "--study.reference=analytic") == EXIT_OK
        orders = json.loads(capsys.readouterr().out.strip().splitlines()[-1])["orders"]
        assert len(orders) == 2
        assert (tmp_path / "local_time_gaussian.json").exists() and (tmp_path / "local_time_rademacher.json").exists()
