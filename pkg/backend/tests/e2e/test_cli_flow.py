"""E2E tests for the sensorlens command line"""
import pytest
import pandas as pd
import yaml
from typer.testing import CliRunner


@pytest.fixture
def runner():
    """Create CLI runner"""
    return CliRunner()


@pytest.fixture
def cli_app():
    from app.cli import app
    return app


@pytest.fixture
def smoke_yaml(tmp_path):
    """A tiny synthetic run config written to disk"""
    path = tmp_path / "smoke.yaml"
    path.write_text(yaml.safe_dump({
        "synthetic": True,
        "synthetic_samples": 1280,
        "master_seed": 5,
        "noise_grid": [0.5, 3.0],
        "short_grid": [1.5, 10.0],
        "fixed_grid": [150.0, 500.0],
        "models": ["M1", "CART"],
        "train": {"learning_rate": 0.01, "batch_size": 16, "max_epochs": 2, "patience": 1},
        "cart": {"max_depth": 4, "min_leaf": 2},
        "seed_count": 1,
        "output_dir": str(tmp_path / "runs"),
    }))
    return path


def _confusion_line(output: str) -> str:
    return next(line.strip() for line in output.splitlines() if line.strip().startswith("tp="))


class TestSynthCommand:
    """Test synthetic data generation"""

    def test_writes_ibrl_file(self, runner, cli_app, tmp_path):
        """Test synth writes a parseable IBRL file"""
        from app.services.sensor_ingest import load_ibrl

        target = tmp_path / "data.txt"
        result = runner.invoke(cli_app, ["synth", "--output", str(target), "--samples", "200", "--seed", "1"])

        assert result.exit_code == 0, result.output
        assert len(load_ibrl(target).samples) == 400


class TestEncodeCommand:
    """Test image rendering"""

    def test_seven_categories(self, runner, cli_app, smoke_yaml, tmp_path):
        """Test one PGM per category, named by category and seed"""
        out = tmp_path / "images"
        result = runner.invoke(cli_app, ["encode", "--config", str(smoke_yaml), "--out", str(out)])

        assert result.exit_code == 0, result.output
        names = sorted(p.name for p in out.glob("*.pgm"))
        assert len(names) == 7
        assert "noise+fixed_node1_m0_seed5.pgm" in names
        assert "normal_node1_m0_seed5.pgm" in names

    def test_rerun_is_byte_identical(self, runner, cli_app, smoke_yaml, tmp_path):
        """Test two renders with the same config produce the same bytes"""
        for name in ("a", "b"):
            result = runner.invoke(cli_app, ["encode", "--config", str(smoke_yaml), "--out", str(tmp_path / name)])
            assert result.exit_code == 0, result.output

        for first in (tmp_path / "a").glob("*.pgm"):
            assert first.read_bytes() == (tmp_path / "b" / first.name).read_bytes()

    def test_missing_dataset(self, runner, cli_app, tmp_path):
        """Test a missing dataset exits 1 with a diagnostic"""
        result = runner.invoke(cli_app, ["encode", "--dataset", str(tmp_path / "none.txt")])

        assert result.exit_code == 1
        assert "[cli]" in result.output


class TestTrainEvalCommands:
    """Test the train -> eval flow"""

    def test_eval_reproduces_train_metrics(self, runner, cli_app, smoke_yaml, tmp_path):
        """Test eval on the saved split prints the training confusion"""
        model_path = tmp_path / "m1.npz"
        trained = runner.invoke(cli_app, [
            "train", "--config", str(smoke_yaml), "--model", "M1",
            "--fault", "fixed", "--intensity", "300", "--out", str(model_path),
        ])
        assert trained.exit_code == 0, trained.output
        assert model_path.exists()

        evaluated = runner.invoke(cli_app, ["eval", str(model_path), "--config", str(smoke_yaml), "--model", "M1"])
        assert evaluated.exit_code == 0, evaluated.output
        assert _confusion_line(evaluated.output) == _confusion_line(trained.output)

    def test_cart_default_path(self, runner, cli_app, smoke_yaml, tmp_path):
        """Test CART models default to a JSON file under the output directory"""
        result = runner.invoke(cli_app, ["train", "--config", str(smoke_yaml), "--model", "CART", "--fault", "short"])

        assert result.exit_code == 0, result.output
        assert (tmp_path / "runs" / "models" / "CART_short_f=1.5.json").exists()

    def test_clean_eval_exits_nonzero(self, runner, cli_app, smoke_yaml, tmp_path):
        """Test an all-normal corpus leaves TPR undefined and exits 1"""
        model_path = tmp_path / "cart.json"
        runner.invoke(cli_app, ["train", "--config", str(smoke_yaml), "--model", "CART", "--out", str(model_path)])

        result = runner.invoke(cli_app, ["eval", str(model_path), "--config", str(smoke_yaml), "--clean"])
        assert result.exit_code == 1
        assert "[eval]" in result.output

    def test_preset_mismatch_exits_nonzero(self, runner, cli_app, smoke_yaml, tmp_path):
        """Test evaluating an M1 file as M2 fails in the nn module"""
        model_path = tmp_path / "m1.npz"
        runner.invoke(cli_app, ["train", "--config", str(smoke_yaml), "--model", "M1", "--out", str(model_path)])

        result = runner.invoke(cli_app, ["eval", str(model_path), "--config", str(smoke_yaml), "--model", "M2"])
        assert result.exit_code == 1
        assert "[nn]" in result.output

    @pytest.mark.parametrize("flags", [["--max-windows", "20"], ["--seed", "99"]])
    def test_eval_on_other_data_exits_nonzero(self, runner, cli_app, smoke_yaml, tmp_path, flags):
        """Test eval with data other than the training data fails in the eval module"""
        model_path = tmp_path / "cart.json"
        trained = runner.invoke(cli_app, ["train", "--config", str(smoke_yaml), "--model", "CART", "--out", str(model_path)])
        assert trained.exit_code == 0, trained.output

        result = runner.invoke(cli_app, ["eval", str(model_path), "--config", str(smoke_yaml), *flags])
        assert result.exit_code == 1
        assert "[eval]" in result.output
        assert "different windows" in result.output

    def test_unwritable_model_path(self, runner, cli_app, smoke_yaml, tmp_path):
        """Test an output path under a regular file gives a diagnostic, not a traceback"""
        blocker = tmp_path / "blocker"
        blocker.write_text("")

        result = runner.invoke(cli_app, [
            "train", "--config", str(smoke_yaml), "--model", "CART", "--out", str(blocker / "cart.json"),
        ])
        assert result.exit_code == 1
        assert "❌ [cli]" in result.output

    def test_missing_model_file(self, runner, cli_app, smoke_yaml, tmp_path):
        """Test eval of a missing file exits 1"""
        result = runner.invoke(cli_app, ["eval", str(tmp_path / "nope.npz"), "--config", str(smoke_yaml)])
        assert result.exit_code == 1

    def test_unknown_fault(self, runner, cli_app, smoke_yaml):
        """Test an unknown fault name exits 1"""
        result = runner.invoke(cli_app, ["train", "--config", str(smoke_yaml), "--fault", "drift"])
        assert result.exit_code == 1


class TestReproduceCommand:
    """Test the full reproduction command"""

    def test_writes_reports(self, runner, cli_app, smoke_yaml, tmp_path):
        """Test the four CSVs, metadata and the synthetic watermark"""
        result = runner.invoke(cli_app, ["reproduce", "--config", str(smoke_yaml), "--run-name", "smoke"])

        assert result.exit_code == 0, result.output
        assert "Synthetic data" in result.output
        run_dir = tmp_path / "runs" / "smoke"
        for name in ("single_noise", "single_short", "single_fixed", "mixed"):
            assert (run_dir / f"{name}.csv").exists()
        mixed = pd.read_csv(run_dir / "mixed.csv")
        assert len(mixed) == 3
        assert set(mixed["data_source"]) == {"synthetic"}
        assert (run_dir / "metadata.json").exists()
        assert (run_dir / "timeline.jsonl").exists()

    @pytest.mark.slow
    def test_rerun_outputs_byte_identical(self, runner, cli_app, smoke_yaml, tmp_path):
        """Test two runs of one config write the same reports and metadata bytes"""
        for name in ("a", "b"):
            result = runner.invoke(cli_app, ["reproduce", "--config", str(smoke_yaml), "--run-name", name])
            assert result.exit_code == 0, result.output

        first, second = tmp_path / "runs" / "a", tmp_path / "runs" / "b"
        for file_name in ("metadata.json", "single_noise.csv", "single_short.csv", "single_fixed.csv", "mixed.csv"):
            assert (first / file_name).read_bytes() == (second / file_name).read_bytes(), file_name

    def test_unwritable_output_dir(self, runner, cli_app, smoke_yaml, tmp_path):
        """Test an output directory that is a regular file exits 1 with a diagnostic"""
        blocker = tmp_path / "blocker"
        blocker.write_text("")

        result = runner.invoke(cli_app, ["reproduce", "--config", str(smoke_yaml), "--output-dir", str(blocker)])
        assert result.exit_code == 1
        assert "❌ [cli]" in result.output

    def test_without_source_fails(self, runner, cli_app):
        """Test reproduce without config, dataset or synthetic exits 1"""
        result = runner.invoke(cli_app, ["reproduce"])
        assert result.exit_code == 1


class TestSweepCommand:
    """Test hyperparameter sweeps from the command line"""

    def test_sweep_log_and_summary(self, runner, cli_app, smoke_yaml, tmp_path):
        """Test two trials land in sweep.jsonl and the summary CSV"""
        result = runner.invoke(cli_app, [
            "sweep", "--config", str(smoke_yaml), "--model", "M1", "--fault", "fixed",
            "--lr", "0.01", "--batch", "8,16", "--momentum", "0.9", "--run-name", "tune",
        ])

        assert result.exit_code == 0, result.output
        run_dir = tmp_path / "runs" / "tune"
        assert len((run_dir / "sweep.jsonl").read_text().splitlines()) == 2
        assert len(pd.read_csv(run_dir / "sweep_summary.csv")) == 2

    def test_rerun_replaces_trials(self, runner, cli_app, smoke_yaml, tmp_path):
        """Test a second sweep under the same run name rewrites the log instead of appending"""
        args = [
            "sweep", "--config", str(smoke_yaml), "--model", "M1", "--fault", "fixed",
            "--lr", "0.01", "--batch", "8,16", "--momentum", "0.9", "--run-name", "tune",
        ]
        run_dir = tmp_path / "runs" / "tune"
        assert runner.invoke(cli_app, args).exit_code == 0
        first = (run_dir / "sweep.jsonl").read_bytes()

        result = runner.invoke(cli_app, args)
        assert result.exit_code == 0, result.output
        assert (run_dir / "sweep.jsonl").read_bytes() == first
        assert len(pd.read_csv(run_dir / "sweep_summary.csv")) == 2

    def test_cart_sweep_rejected(self, runner, cli_app, smoke_yaml):
        """Test sweeping CART exits 1"""
        result = runner.invoke(cli_app, ["sweep", "--config", str(smoke_yaml), "--model", "CART"])
        assert result.exit_code == 1
