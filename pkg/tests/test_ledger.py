import pytest

from errors import DataIOError, ParameterError
from ledger import RunLedger, RunRecord


@pytest.fixture
def ledger(tmp_path):
    with RunLedger(str(tmp_path / "runs" / "ledger.sqlite")) as db:
        yield db


def test_record_and_find(ledger):
    record = ledger.record_run(RunRecord("ffs", "abc", {"dice_threshold": 0.7}, {"manifest": "m"},
                                         {"report": "r.jsonl"}, {"keep_rate": 0.5}))
    assert record.id is not None
    found = ledger.find_run("ffs", "abc")
    assert found.id == record.id
    assert found.config == {"dice_threshold": 0.7}
    assert found.metrics == {"keep_rate": 0.5}
    assert ledger.find_run("ffs", "other") is None
    assert ledger.find_run("boost", "abc") is None


def test_rerecording_replaces_run_and_lineage(ledger):
    first = ledger.record_run(RunRecord("ffs", "abc", metrics={"kept": 1}))
    ledger.add_lineage(first.id, ["box-0001"], "rejected")
    second = ledger.record_run(RunRecord("ffs", "abc", metrics={"kept": 2}))
    assert len(ledger.runs("ffs")) == 1
    assert ledger.find_run("ffs", "abc").metrics == {"kept": 2}
    assert ledger.lineage_for(first.id, "rejected") == []
    assert ledger.lineage_for(second.id, "rejected") == []


def test_latest_run_and_listing(ledger):
    ledger.record_run(RunRecord("pretrain", "h1"))
    ledger.record_run(RunRecord("boost", "h2"))
    last = ledger.record_run(RunRecord("pretrain", "h3"))
    assert ledger.latest_run("pretrain").id == last.id
    assert ledger.latest_run("eval") is None
    assert [r.stage for r in ledger.runs()] == ["pretrain", "boost", "pretrain"]


def test_lineage_roles(ledger):
    run = ledger.record_run(RunRecord("boost", "h"))
    assert ledger.add_lineage(run.id, ["box-0002", "box-0000"], "trained") == 2
    assert ledger.lineage_for(run.id, "trained") == ["box-0002", "box-0000"]
    assert ledger.lineage_for(run.id, "rejected") == []
    with pytest.raises(ParameterError):
        ledger.add_lineage(run.id, ["box-0001"], "ignored")


def test_ledger_persists_across_connections(tmp_path):
    path = str(tmp_path / "ledger.sqlite")
    with RunLedger(path) as db:
        run = db.record_run(RunRecord("synth", "h", outputs={"manifest": "x"}))
        db.add_lineage(run.id, ["a"], "trained")
    with RunLedger(path) as db:
        assert db.find_run("synth", "h").outputs == {"manifest": "x"}
        assert db.lineage_for(run.id, "trained") == ["a"]


def test_outputs_exist(tmp_path):
    present = tmp_path / "present.txt"
    present.write_text("x")
    record = RunRecord("eval", "h", outputs={"metrics": str(present), "curves": [str(present)]})
    assert record.outputs_exist()
    record.outputs["curves"].append(str(tmp_path / "missing.csv"))
    assert not record.outputs_exist()


def test_missing_output_key():
    with pytest.raises(DataIOError):
        RunRecord("eval", "h").output("metrics")


@pytest.mark.parametrize("name", ["connect", "create_tables", "record_run", "find_run", "latest_run", "runs",
                                  "add_lineage", "lineage_for", "close"])
def test_public_helpers_are_documented(name):
    assert getattr(RunLedger, name).__doc__
