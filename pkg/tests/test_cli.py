"""End-to-end runs of the command-line front end on tiny problems: artifact
layout, delimited-output schemas, the zero-iteration/MALA equivalence, and
determinism of the worker split."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from entromc import checkpoint as checkpoint_mod
from entromc import cli
from entromc.training import TrainingLog

TINY = [
    "--set", "target.name=icg",
    "--set", "target.dim=3",
    "--set", "target.log10_min=-0.3",
    "--set", "target.log10_max=0.3",
    "--set", "sampler.width=8",
    "--set", "sampler.eps=0.45",
    "--set", "training.batch=24",
    "--set", "training.iterations=4",
    "--set", "eval.steps=220",
    "--set", "eval.keep=120",
    "--set", "eval.chains=3",
    "--quiet",
]


def _run(argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def train_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("train"))
    assert _run(["train", *TINY, "--seed", "9", "--out", out]) == 0
    return out


class TestTrain:
    def test_artifact_layout(self, train_dir):
        for name in ("resolved_config.ini", "training_log.csv",
                     "checkpoint.npz", "run.json"):
            assert os.path.exists(os.path.join(train_dir, name)), name
        assert os.path.getsize(
            os.path.join(train_dir, "figures", "training.png")) > 0

    def test_log_csv_schema(self, train_dir):
        data = np.genfromtxt(os.path.join(train_dir, "training_log.csv"),
                             delimiter=",", names=True)
        assert data.dtype.names == TrainingLog.COLUMNS
        assert data.shape == (4,)

    def test_manifest_hash_matches_checkpoint(self, train_dir):
        with open(os.path.join(train_dir, "run.json")) as fh:
            manifest = json.load(fh)
        path = os.path.join(train_dir, "checkpoint.npz")
        assert manifest["checkpoint_sha256"] == checkpoint_mod.file_sha256(path)
        assert manifest["seed"] == 9
        assert manifest["target"] == "icg3"
        model, _ = checkpoint_mod.load_checkpoint(path)
        assert model.dim == 3

    def test_resolved_config_records_overrides(self, train_dir):
        with open(os.path.join(train_dir, "resolved_config.ini")) as fh:
            text = fh.read()
        assert "batch = 24" in text
        assert "eps = 0.45" in text

    def test_checkpoint_cadence_writes_intermediates(self, tmp_path):
        out = str(tmp_path / "ck")
        assert _run(["train", *TINY, "--seed", "1", "--out", out,
                     "--set", "training.checkpoint_every=2"]) == 0
        assert os.path.exists(os.path.join(out, "checkpoint_iter2.npz"))
        assert os.path.exists(os.path.join(out, "checkpoint_iter4.npz"))


@pytest.fixture(scope="module")
def eval_dir(tmp_path_factory, train_dir):
    out = str(tmp_path_factory.mktemp("eval"))
    assert _run(["eval", *TINY, "--seed", "9", "--out", out,
                 "--checkpoint",
                 os.path.join(train_dir, "checkpoint.npz")]) == 0
    return out


class TestEval:
    def test_chain_csv_schema(self, eval_dir):
        path = os.path.join(eval_dir, "chains", "chain_0.csv")
        with open(path) as fh:
            header = fh.readline().strip()
        assert header == "step,accept,energy,x0,x1,x2"
        body = np.loadtxt(path, delimiter=",", skiprows=1)
        assert body.shape == (120, 6)
        # recorded steps follow the warmup, accept column is a probability
        assert body[0, 0] == 100
        assert np.all((body[:, 1] >= 0) & (body[:, 1] <= 1))
        for i in range(3):
            assert os.path.exists(
                os.path.join(eval_dir, "chains", f"chain_{i}.csv"))

    def test_report_payload(self, eval_dir):
        with open(os.path.join(eval_dir, "ess_report.json")) as fh:
            rep = json.load(fh)
        assert len(rep["per_dim"]) == 3
        assert rep["min_ess"] == min(rep["per_dim"])
        assert rep["checkpoint_sha256"]
        assert rep["kernel"] == "neural"

    def test_manifest_lists_chain_seeds(self, eval_dir):
        with open(os.path.join(eval_dir, "run.json")) as fh:
            manifest = json.load(fh)
        assert len(manifest["chain_seeds"]) == 3
        assert manifest["chain_seeds"][2] == "SeedSequence(9).spawn[2]"
        assert manifest["bias_passed"] is None

    def test_trace_figure_written(self, eval_dir):
        assert os.path.getsize(
            os.path.join(eval_dir, "figures", "trace_x0.png")) > 0

    def test_dim_mismatch_rejected(self, tmp_path, train_dir):
        code = None
        try:
            _run(["eval", *TINY, "--set", "target.dim=5",
                  "--out", str(tmp_path / "bad"),
                  "--checkpoint",
                  os.path.join(train_dir, "checkpoint.npz")])
        except SystemExit as e:
            code = e.code
        assert code == 2

    def test_worker_split_reproduces_serial_report(self, tmp_path, train_dir):
        reports = []
        for w, tag in ((1, "serial"), (3, "split")):
            out = str(tmp_path / tag)
            assert _run(["eval", *TINY, "--seed", "9", "--out", out,
                         "--workers", str(w),
                         "--checkpoint",
                         os.path.join(train_dir, "checkpoint.npz")]) == 0
            with open(os.path.join(out, "ess_report.json")) as fh:
                reports.append(json.load(fh))
        # random streams are identical across worker counts; the flow's
        # matmuls round differently for 1-row vs 3-row batches, so compare
        # to floating-point rounding rather than bitwise
        assert reports[0]["per_dim"] == pytest.approx(reports[1]["per_dim"],
                                                      rel=1e-9)
        assert reports[0]["accept_rate"] == pytest.approx(
            reports[1]["accept_rate"], rel=1e-9)


class TestZeroIterationEquivalence:
    """An untrained checkpoint evaluates identically to the tuned-free MALA
    baseline run with the same step size and seed."""

    def test_eval_matches_mala_baseline(self, tmp_path):
        train_out = str(tmp_path / "zero")
        assert _run(["train", *TINY, "--seed", "13", "--out", train_out,
                     "--set", "training.iterations=0"]) == 0
        eval_out = str(tmp_path / "zeval")
        assert _run(["eval", *TINY, "--seed", "13", "--out", eval_out,
                     "--checkpoint",
                     os.path.join(train_out, "checkpoint.npz")]) == 0
        base_out = str(tmp_path / "mala")
        assert _run(["baseline", *TINY, "--seed", "13", "--out", base_out,
                     "--kernel", "mala", "--step-size", "0.45"]) == 0
        with open(os.path.join(eval_out, "ess_report.json")) as fh:
            neural = json.load(fh)
        with open(os.path.join(base_out, "ess_report.json")) as fh:
            mala = json.load(fh)
        assert neural["min_ess"] == pytest.approx(mala["min_ess"], rel=1e-12)
        assert neural["ess_per_mh"] == pytest.approx(mala["ess_per_mh"],
                                                     rel=1e-12)
        assert neural["accept_rate"] == pytest.approx(
            mala["accept_rate"], rel=1e-12)
        # per-step budgets still reflect each kernel's own pricing
        assert neural["grads_per_step"] == 4
        assert mala["grads_per_step"] == 2


class TestBaseline:
    def test_auto_tuning_adapts_step(self, tmp_path):
        out = str(tmp_path / "auto")
        assert _run(["baseline", *TINY, "--seed", "3", "--out", out,
                     "--kernel", "mala", "--step-size", "auto",
                     "--set", "baseline.tune_steps=300",
                     "--set", "eval.chains=8"]) == 0
        with open(os.path.join(out, "baseline.json")) as fh:
            base = json.load(fh)
        assert base["kernel"] == "mala"
        assert base["step_size"] > 0
        assert "adaptation" in base["method"]
        # tiny run: generous window around the canonical 0.574 target
        assert abs(base["accept_rate"] - 0.574) < 0.15

    def test_neck_rule_requires_funnel(self, tmp_path):
        code = None
        try:
            _run(["baseline", *TINY, "--out", str(tmp_path / "neck"),
                  "--kernel", "hmc", "--step-size", "neck"])
        except SystemExit as e:
            code = e.code
        assert code == 2

    def test_bias_report_on_funnel(self, tmp_path):
        out = str(tmp_path / "fb")
        assert _run(["baseline", "--quiet", "--out", out,
                     "--seed", "5", "--kernel", "mala",
                     "--step-size", "0.3",
                     "--set", "target.name=funnel",
                     "--set", "target.dim=3",
                     "--set", "eval.steps=260",
                     "--set", "eval.keep=120",
                     "--set", "eval.chains=2",
                     "--set", "eval.bias_steps=150",
                     "--set", "eval.bias_chains=6"]) == 0
        with open(os.path.join(out, "bias_report.json")) as fh:
            rep = json.load(fh)
        names = [c["name"] for c in rep["checks"]]
        assert "funnel_x0_mean" in names
        assert "funnel_x0_std" in names


@pytest.fixture(scope="module")
def ablate_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("ablate"))
    assert _run(["ablate", *TINY, "--seed", "2", "--out", out,
                 "--modes", "full,langevin", "--iters", "3"]) == 0
    return out


class TestAblate:
    def test_curves_csv(self, ablate_dir):
        path = os.path.join(ablate_dir, "ablation_curves.csv")
        with open(path) as fh:
            header = fh.readline().strip()
        assert header == "iter,entropy_full,entropy_langevin"
        assert np.loadtxt(path, delimiter=",", skiprows=1).shape == (3, 3)

    def test_report_budgets(self, ablate_dir):
        with open(os.path.join(ablate_dir, "run.json")) as fh:
            manifest = json.load(fh)
        modes = manifest["modes"]
        # tiny preset trains N=1 flows: 4 grads full, 2 langevin
        assert modes["full"]["grad_evals_per_proposal"] == 4
        assert modes["langevin"]["grad_evals_per_proposal"] == 2
        assert os.path.getsize(os.path.join(
            ablate_dir, "figures", "ablation_entropy.png")) > 0

    def test_per_mode_checkpoints(self, ablate_dir):
        for mode in ("full", "langevin"):
            model, meta = checkpoint_mod.load_checkpoint(
                os.path.join(ablate_dir, f"checkpoint_{mode}.npz"))
            assert model.mode == mode


class TestEssCommand:
    def test_on_emitted_chain_csvs(self, eval_dir, tmp_path, capsys):
        traces = [os.path.join(eval_dir, "chains", f"chain_{i}.csv")
                  for i in range(3)]
        out = str(tmp_path / "essout")
        assert _run(["ess", *traces, "--grads-per-step", "4",
                     "--out", out]) == 0
        printed = json.loads(capsys.readouterr().out)
        with open(os.path.join(out, "ess_report.json")) as fh:
            saved = json.load(fh)
        assert printed["min_ess"] == saved["min_ess"]
        assert len(printed["per_dim"]) == 3
        assert printed["ess_per_grad"] == pytest.approx(
            printed["ess_per_mh"] / 4.0)

    def test_headerless_numeric_trace(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        path = str(tmp_path / "plain.csv")
        np.savetxt(path, rng.standard_normal((400, 2)), delimiter=",")
        assert _run(["ess", path]) == 0
        rep = json.loads(capsys.readouterr().out)
        assert len(rep["per_dim"]) == 2
        assert rep["ess_per_grad"] is None

    def test_mismatched_shapes_rejected(self, tmp_path):
        a, b = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
        np.savetxt(a, np.zeros((50, 2)), delimiter=",")
        np.savetxt(b, np.zeros((60, 2)), delimiter=",")
        code = None
        try:
            _run(["ess", a, b])
        except SystemExit as e:
            code = e.code
        assert code == 2


class TestConfigErrors:
    def test_unknown_key_is_usage_error(self, tmp_path):
        code = None
        try:
            _run(["train", "--set", "training.bogus=1",
                  "--out", str(tmp_path / "x")])
        except SystemExit as e:
            code = e.code
        assert code == 2

    def test_missing_target_is_usage_error(self, tmp_path):
        code = None
        try:
            _run(["train", "--set", "training.batch=8",
                  "--out", str(tmp_path / "x")])
        except SystemExit as e:
            code = e.code
        assert code == 2


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "entromc.cli", "--help"],
                         capture_output=True, text=True, check=True)
    assert "train" in out.stdout and "baseline" in out.stdout
