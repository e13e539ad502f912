from __future__ import annotations

import json
import random

import pytest

from gridllm.errors import IntegrityError, MigrationRequired, StorageError
from gridllm.store import Store, atomic_write_json, load_json


class TestEnvelope:
    def test_empty_artifact_round_trip(self, tmp_path):
        path = tmp_path / "empty.json"
        atomic_write_json(path, "thing", {})
        assert load_json(path, "thing") == {}

    def test_randomized_round_trip(self, tmp_path):
        rng = random.Random(0)
        for i in range(20):
            payload = {
                "n": rng.randint(0, 1000),
                "xs": [rng.uniform(-1, 1) for _ in range(rng.randint(0, 30))],
                "nested": {"s": "".join(chr(rng.randint(32, 126))
                                        for _ in range(rng.randint(0, 40)))},
                "flag": rng.random() > 0.5,
                "none": None,
            }
            path = tmp_path / f"artifact_{i}.json"
            atomic_write_json(path, "rand", payload)
            assert load_json(path, "rand") == payload

    def test_truncated_file_detected_with_offset(self, tmp_path):
        path = tmp_path / "x.json"
        atomic_write_json(path, "thing", {"key": list(range(100))})
        raw = path.read_text()
        path.write_text(raw[: len(raw) - 30])
        with pytest.raises(IntegrityError) as excinfo:
            load_json(path, "thing")
        assert excinfo.value.offset >= 0

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / "x.json"
        atomic_write_json(path, "alpha", 1)
        with pytest.raises(IntegrityError):
            load_json(path, "beta")

    def test_version_mismatch_requires_migration(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text(json.dumps({"format": "thing", "version": 99,
                                    "data": {}}))
        with pytest.raises(MigrationRequired) as excinfo:
            load_json(path, "thing")
        assert excinfo.value.found == 99

    def test_missing_file_is_storage_error(self, tmp_path):
        with pytest.raises(StorageError):
            load_json(tmp_path / "absent.json", "thing")

    def test_no_temp_residue_on_success(self, tmp_path):
        path = tmp_path / "x.json"
        atomic_write_json(path, "thing", {"a": 1})
        leftovers = [p for p in tmp_path.iterdir() if p.suffix == ".tmp"]
        assert leftovers == []


class TestStore:
    def test_layout_created(self, tmp_path):
        store = Store(tmp_path / "data")
        for sub in ("sessions", "runs", "indexes", "evals"):
            assert (tmp_path / "data" / sub).is_dir()
        assert store.load_run("nope") is None
        assert store.load_eval("nope") is None

    def test_run_round_trip(self, tmp_path):
        store = Store(tmp_path)
        payload = {"id": "r1", "status": "done", "record": {"steps": []}}
        store.save_run("r1", payload)
        assert store.load_run("r1") == payload

    def test_eval_round_trip(self, tmp_path):
        store = Store(tmp_path)
        payload = {"id": "e1", "status": "done", "report": {"rounds": []}}
        store.save_eval("e1", payload)
        assert store.load_eval("e1") == payload
