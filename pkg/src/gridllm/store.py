"""File-backed persistence for runs, sessions, evaluations, and indexes.

Every artifact is written atomically (temp file + rename) inside a versioned
envelope; loading validates the format header before touching the payload.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Optional, Union

from .errors import IntegrityError, MigrationRequired, StorageError

ENVELOPE_VERSION = 1


def atomic_write_json(path: Union[str, Path], kind: str, data: object,
                      version: int = ENVELOPE_VERSION) -> None:
    """Write {format, version, data} to `path` via a same-directory temp file."""
    path = Path(path)
    payload = {"format": kind, "version": version, "data": data}
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(payload, fh, sort_keys=True)
            os.replace(tmp_name, path)
        except BaseException:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def load_json(path: Union[str, Path], kind: str,
              version: int = ENVELOPE_VERSION) -> object:
    """Read an envelope back, checking format name and version."""
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path} is corrupt: {exc}", offset=exc.pos) from exc
    if not isinstance(payload, dict) or payload.get("format") != kind:
        raise IntegrityError(
            f"{path} holds {payload.get('format')!r}, expected {kind!r}"
            if isinstance(payload, dict) else f"{path} is not an envelope",
            offset=0,
        )
    if payload.get("version") != version:
        raise MigrationRequired(
            f"{path} has version {payload.get('version')}, expected {version}",
            found=payload.get("version"), expected=version,
        )
    return payload["data"]


class Store:
    """Data-directory layout: sessions/, runs/, indexes/, evals/."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        for sub in ("sessions", "runs", "indexes", "evals"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    # -- runs ---------------------------------------------------------------

    def run_path(self, run_id: str) -> Path:
        return self.root / "runs" / f"{run_id}.json"

    def save_run(self, run_id: str, payload: dict) -> None:
        atomic_write_json(self.run_path(run_id), "opro-run", payload)

    def load_run(self, run_id: str) -> Optional[dict]:
        path = self.run_path(run_id)
        if not path.exists():
            return None
        return load_json(path, "opro-run")

    # -- evaluations ----------------------------------------------------------

    def eval_path(self, eval_id: str) -> Path:
        return self.root / "evals" / f"{eval_id}.json"

    def save_eval(self, eval_id: str, payload: dict) -> None:
        atomic_write_json(self.eval_path(eval_id), "sa-eval", payload)

    def load_eval(self, eval_id: str) -> Optional[dict]:
        path = self.eval_path(eval_id)
        if not path.exists():
            return None
        return load_json(path, "sa-eval")

    # -- sessions -------------------------------------------------------------

    @property
    def sessions_dir(self) -> Path:
        return self.root / "sessions"

    def session_path(self, session_id: str) -> Path:
        return self.sessions_dir / f"{session_id}.jsonl"

    # -- indexes --------------------------------------------------------------

    def index_path(self, doc_id: str) -> Path:
        return self.root / "indexes" / f"{doc_id}.json"
