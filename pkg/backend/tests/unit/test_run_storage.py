"""Unit tests for run directories and the sweep log"""
import pytest
import pandas as pd


class TestRunStorage:
    """Test run directory layout and cell flushing"""

    def test_for_run_creates_directory(self, tmp_path):
        """Test for_run places the run under the base directory"""
        from app.services.run_storage import RunStorage

        storage = RunStorage.for_run("demo", base_dir=tmp_path)
        assert storage.run_dir == tmp_path / "demo"
        assert storage.run_dir.is_dir()

    def test_metadata_round_trip(self, tmp_path):
        """Test metadata comes back exactly as written"""
        from app.services.run_storage import RunStorage

        storage = RunStorage(tmp_path / "run")
        assert storage.read_metadata() is None

        storage.write_metadata({"master_seed": 7, "data_source": "synthetic"})
        assert storage.read_metadata() == {"master_seed": 7, "data_source": "synthetic"}

    def test_metadata_bytes_repeatable(self, tmp_path):
        """Test writing the same metadata twice gives byte-identical files"""
        from app.services.run_storage import RunStorage

        metadata = {"master_seed": 7, "config": {"nodes": [1, 2]}}
        a = RunStorage(tmp_path / "a")
        b = RunStorage(tmp_path / "b")
        a.write_metadata(metadata)
        b.write_metadata(metadata)

        assert a.metadata_file.read_bytes() == b.metadata_file.read_bytes()

    def test_append_and_read_cells(self, tmp_path):
        """Test appended cells come back keyed by index, later lines winning"""
        from app.services.run_storage import RunStorage

        storage = RunStorage(tmp_path / "run")
        storage.append_cell("single_fixed", {"cell": 0, "seed": 1})
        storage.append_cell("single_fixed", {"cell": 1, "seed": 2})
        storage.append_cell("single_fixed", {"cell": 0, "seed": 3})

        cells = storage.completed_cells("single_fixed")
        assert set(cells) == {0, 1}
        assert cells[0]["seed"] == 3
        assert storage.completed_cells("single_noise") == {}

    def test_torn_line_ignored(self, tmp_path):
        """Test a half-written trailing line does not break resume"""
        from app.services.run_storage import RunStorage

        storage = RunStorage(tmp_path / "run")
        storage.append_cell("mixed", {"cell": 0})
        with open(storage.cells_dir / "mixed.jsonl", "a", encoding="utf-8") as f:
            f.write('{"cell": 1, "outco')

        assert list(storage.completed_cells("mixed")) == [0]

    def test_clear_cells(self, tmp_path):
        """Test clearing removes a grid's cells"""
        from app.services.run_storage import RunStorage

        storage = RunStorage(tmp_path / "run")
        storage.append_cell("mixed", {"cell": 0})
        storage.clear_cells("mixed")
        assert storage.completed_cells("mixed") == {}

    def test_reports(self, tmp_path):
        """Test CSV reports are written and listed"""
        from app.services.run_storage import RunStorage

        storage = RunStorage(tmp_path / "run")
        storage.write_report("mixed", pd.DataFrame([{"model": "M1", "DA": 99.5}]))
        storage.write_sweep(pd.DataFrame([{"trial": 0}]))

        assert storage.list_reports() == ["mixed", "sweep_summary"]
        assert pd.read_csv(storage.run_dir / "mixed.csv")["DA"].tolist() == [99.5]


class TestSweepLog:
    """Test the JSONL sweep log"""

    def _trial(self, trial: int, **kwargs):
        from app.services.metrics import Confusion
        from app.services.sweep_log import SweepTrial

        fields = dict(
            trial=trial, model="M2", fault="fixed", intensity="G=300",
            learning_rate=0.01, batch_size=32, momentum=0.9,
            epochs_run=5, best_epoch=3, valid_da=0.95,
            confusion=Confusion(tp=9, fn=1, fp=2, tn=8), DA=0.85, TPR=0.9, PRE=9 / 11,
        )
        fields.update(kwargs)
        return SweepTrial(**fields)

    def test_json_line_round_trip(self):
        """Test a trial survives to_json_line / from_json_line"""
        from app.services.sweep_log import SweepTrial

        trial = self._trial(0)
        assert SweepTrial.from_json_line(trial.to_json_line()) == trial

    def test_append_and_list(self, tmp_path):
        """Test trials are appended in order"""
        from app.services.sweep_log import SweepLog

        log = SweepLog(tmp_path / "sweep")
        assert log.list_trials() == []

        log.append_trial(self._trial(0))
        log.append_trial(self._trial(1, learning_rate=0.05, metadata={"diverged_at_epoch": 2}))

        trials = log.list_trials()
        assert [t.trial for t in trials] == [0, 1]
        assert trials[1].metadata == {"diverged_at_epoch": 2}
        assert log.get_log_path().endswith("sweep.jsonl")

    def test_json_line_is_repeatable(self):
        """Test equal trials serialize to identical lines"""
        assert self._trial(3).to_json_line() == self._trial(3).to_json_line()

    def test_reset_drops_earlier_trials(self, tmp_path):
        """Test a reset log holds only trials appended afterwards"""
        from app.services.sweep_log import SweepLog

        log = SweepLog(tmp_path / "sweep")
        log.reset()
        log.append_trial(self._trial(0))
        log.append_trial(self._trial(1))

        again = SweepLog(tmp_path / "sweep")
        again.reset()
        again.append_trial(self._trial(0, learning_rate=0.05))

        assert [(t.trial, t.learning_rate) for t in again.list_trials()] == [(0, 0.05)]
        assert len(again.to_frame()) == 1

    def test_to_frame(self, tmp_path):
        """Test the tabular view has one row per trial"""
        from app.services.sweep_log import SweepLog

        log = SweepLog(tmp_path / "sweep")
        log.append_trial(self._trial(0))
        log.append_trial(self._trial(1, DA=None, TPR=None, PRE=None))

        frame = log.to_frame()
        assert len(frame) == 2
        assert frame.loc[0, "learning_rate"] == 0.01
        assert pd.isna(frame.loc[1, "DA"])


class TestObservability:
    """Test timeline events and tracing"""

    def test_record_and_read_timeline(self, tmp_path):
        """Test events are appended and read back oldest first"""
        from app.core.observability import EventType, get_run_timeline, record_event

        record_event(tmp_path, EventType.RUN_STARTED, {"master_seed": 1})
        record_event(tmp_path, EventType.CELL_COMPLETED, {"grid": "mixed", "cell": 0})

        events = get_run_timeline(tmp_path)
        assert [e["event"] for e in events] == ["run_started", "cell_completed"]
        assert events[1]["payload"]["cell"] == 0

    def test_record_without_run_dir(self, tmp_path):
        """Test console-only events write nothing"""
        from app.core.observability import EventType, get_run_timeline, record_event

        record_event(None, EventType.DATA_LOADED)
        assert get_run_timeline(tmp_path) == []

    def test_trace_pipeline_preserves_result(self, caplog):
        """Test the decorator returns the wrapped result and logs at DEBUG"""
        import logging
        from app.core.observability import trace_pipeline

        @trace_pipeline
        def double(x):
            return 2 * x

        with caplog.at_level(logging.DEBUG, logger="app.core.observability"):
            assert double(4) == 8
        assert any("[TRACE] double - OK" in r.message for r in caplog.records)

    def test_trace_pipeline_reraises(self):
        """Test errors propagate through the decorator"""
        from app.core.observability import trace_pipeline

        @trace_pipeline
        def broken():
            raise ValueError("boom")

        with pytest.raises(ValueError, match="boom"):
            broken()
