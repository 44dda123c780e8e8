"""Runner exit codes and the result-file contract, exercised in-process."""

from __future__ import annotations

import json
import os
import pickle

import pytest

kotta = pytest.importorskip("kotta")

from kotta import runner
from kotta.canning import FORMAT_VERSION, can

PAYLOAD, ARGS, RESULT = ".payload.bin", ".job.json", ".result.bin"


@pytest.fixture(autouse=True)
def sandbox(tmp_path, monkeypatch):
    """Run each test inside an empty sandbox directory, like the worker does."""
    monkeypatch.chdir(tmp_path)
    return tmp_path


def stage(blob: bytes, inputs: list[str] | None = None) -> None:
    with open(PAYLOAD, "wb") as fh:
        fh.write(blob)
    with open(ARGS, "w", encoding="utf-8") as fh:
        json.dump({"job_id": "j-test", "jobname": "t",
                   "inputs": inputs or [], "outputs": []}, fh)


def run() -> int:
    return runner.main([PAYLOAD, ARGS, RESULT])


def test_success_writes_picklable_result():
    def double(x):
        return x * 2

    stage(can(double, args=(21,)))
    assert run() == 0
    with open(RESULT, "rb") as fh:
        assert pickle.load(fh) == 42


def test_lambda_result_file():
    stage(can(lambda: 1 + 1))
    assert run() == 0
    with open(RESULT, "rb") as fh:
        assert pickle.load(fh) == 2


def test_usage_error_is_64(capsys):
    assert runner.main([]) == 64
    assert "usage" in capsys.readouterr().err


def test_version_mismatch_is_4(capsys):
    envelope = pickle.loads(can(lambda: 0))
    envelope["format_version"] = FORMAT_VERSION + 98
    stage(pickle.dumps(envelope))
    assert run() == 4
    assert "VersionMismatch" in capsys.readouterr().err
    assert not os.path.exists(RESULT)


def test_corrupted_blob_is_3(capsys):
    stage(b"\x00\x01 corrupted")
    assert run() == 3
    assert "DeserializationError" in capsys.readouterr().err
    assert not os.path.exists(RESULT)


def test_missing_staged_input_is_2(capsys):
    stage(can(lambda: 0), inputs=["s3://klab-jobs/gone.txt"])
    assert run() == 2
    err = capsys.readouterr().err
    assert "s3://klab-jobs/gone.txt" in err
    assert not os.path.exists(RESULT)


def test_staged_input_read_by_basename(sandbox):
    (sandbox / "numbers.txt").write_text("1\n2\n3\n")

    def file_sum(path):
        with open(path) as fh:
            return sum(int(line) for line in fh)

    stage(can(file_sum, args=("numbers.txt",)), inputs=["s3://klab-jobs/numbers.txt"])
    assert run() == 0
    with open(RESULT, "rb") as fh:
        assert pickle.load(fh) == 6


def test_user_exception_is_1_with_traceback(capsys):
    def explode():
        raise ValueError("runner-test-marker")

    stage(can(explode))
    assert run() == 1
    err = capsys.readouterr().err
    assert "runner-test-marker" in err
    assert "Traceback" in err
    assert not os.path.exists(RESULT)
