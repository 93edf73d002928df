import json
import subprocess
import sys

import pytest

from hybridplan.cli import EXIT_INFEASIBLE, EXIT_OK, EXIT_SCHEMA, main


def test_cost_table(r18_path, capsys):
    assert main(["cost", "--model", str(r18_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "stem.conv" in out and "True" in out


def test_partition_structured(r34_path, capsys):
    assert main(["partition", "--model", str(r34_path), "--format", "structured"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert len(doc["partitions"]) == 66


def test_allocate_then_simulate_from_plan(r34_path, v100_path, tmp_path, capsys):
    plan = tmp_path / "plan.json"
    assert main(["allocate", "--model", str(r34_path), "--cluster", str(v100_path), "--gens", "50", "--out", str(plan)]) == 0
    assert main(["simulate", "--plan", str(plan), "--format", "structured"]) == EXIT_OK
    from_plan = json.loads(capsys.readouterr().out)
    assert from_plan == json.loads(plan.read_text())["simulation"]


def test_simulate_async_mode(r34_path, v100_path, capsys):
    args = ["simulate", "--model", str(r34_path), "--cluster", str(v100_path), "--gens", "20", "--format", "structured"]
    main(args + ["--mode", "sync"])
    sync = json.loads(capsys.readouterr().out)
    main(args + ["--mode", "async"])
    asyn = json.loads(capsys.readouterr().out)
    assert asyn["microbatch_time"] <= sync["microbatch_time"]


def test_schema_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "m.yaml"
    bad.write_text("name: x\nlayers:\n  - {index: 1, kind: relu, out_channels: -3, spatial: [1, 1, 1]}\n")
    assert main(["cost", "--model", str(bad)]) == EXIT_SCHEMA
    assert "line 3" in capsys.readouterr().err


def test_infeasible_exit_code(r18_path, tmp_path, capsys):
    cluster = tmp_path / "c.yaml"
    cluster.write_text("ga: {seed: 1}\ndevices:\n  - {id: tiny0, capacity: 1000}\n")
    assert main(["allocate", "--model", str(r18_path), "--cluster", str(cluster)]) == EXIT_INFEASIBLE
    assert "tiny0" in capsys.readouterr().err


def test_missing_file_exit_code(tmp_path):
    assert main(["cost", "--model", str(tmp_path / "nope.yaml")]) == EXIT_SCHEMA


def test_bad_flag_is_usage_error():
    with pytest.raises(SystemExit) as err:
        main(["simulate", "--mode", "turbo"])
    assert err.value.code == 2


def test_module_entry_point(r18_path):
    proc = subprocess.run(
        [sys.executable, "-m", "hybridplan", "partition", "--model", str(r18_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert "partition" in proc.stdout
