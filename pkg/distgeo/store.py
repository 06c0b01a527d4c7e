from __future__ import annotations

import hashlib
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import orjson
import pandas as pd

from .errors import StoreError

MANIFEST = "manifest.json"
JSON_OPTS = orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY | orjson.OPT_NON_STR_KEYS


def _now() -> str:
    return datetime.now(tz=timezone.utc).isoformat()


def dumps_json(obj: Any) -> bytes:
    return orjson.dumps(obj, option=JSON_OPTS) + b"\n"


def file_digest(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunStore:
    """
    One output directory of a pipeline run. Every artifact is written atomically
    (temp file + rename) and its sha256 digest is recorded, so the manifest written
    at the end can be verified against the files on disk.
    """

    def __init__(self, root: Union[str, Path], manifest_name: str = MANIFEST) -> None:
        self.root = Path(root)
        self.manifest_name = manifest_name
        self.digests: Dict[str, str] = {}
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise StoreError(f"cannot create output directory {self.root}: {e}") from e

    # ---------- paths ----------
    def _path(self, name: str) -> Path:
        return self.root / name

    def _path_manifest(self) -> Path:
        return self.root / self.manifest_name

    # ---------- file io ----------
    def _put(self, name: str, data: bytes) -> Path:
        target = self._path(name)
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
            try:
                with os.fdopen(fd, "wb") as f:
                    f.write(data)
                os.replace(tmp, target)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
        except OSError as e:
            raise StoreError(f"write failed for {target}: {e}") from e
        self.digests[name] = hashlib.sha256(data).hexdigest()
        return target

    def _get(self, name: str) -> Optional[bytes]:
        try:
            return self._path(name).read_bytes()
        except FileNotFoundError:
            return None
        except OSError as e:
            raise StoreError(f"read failed for {self._path(name)}: {e}") from e

    # ---------- public API ----------
    def put_bytes(self, name: str, data: bytes) -> Path:
        return self._put(name, data)

    def put_json(self, name: str, obj: Any) -> Path:
        return self._put(name, dumps_json(obj))

    def put_csv(self, name: str, frame: pd.DataFrame, **kwargs: Any) -> Path:
        text = frame.to_csv(index=False, float_format="%.17g", lineterminator="\n", **kwargs)
        return self._put(name, text.encode("utf-8"))

    def get_json(self, name: str) -> Optional[Any]:
        raw = self._get(name)
        if raw is None:
            return None
        try:
            return orjson.loads(raw)
        except orjson.JSONDecodeError as e:
            raise StoreError(f"{self._path(name)} is not valid JSON: {e}") from e

    def list(self) -> Iterator[Tuple[str, str]]:
        for name in sorted(self.digests):
            yield name, self.digests[name]

    def write_manifest(self, manifest: Dict[str, Any]) -> Path:
        """Written last; carries the digests of everything put before it."""
        body = dict(manifest)
        body["digests"] = dict(sorted(self.digests.items()))
        body["written_at"] = _now()
        path = self._put(self.manifest_name, dumps_json(body))
        self.digests.pop(self.manifest_name, None)
        return path

    def verify(self) -> List[str]:
        """Names whose on-disk digest differs from the manifest (missing files included)."""
        manifest = self.get_json(self.manifest_name)
        if manifest is None:
            raise StoreError(f"no {self.manifest_name} in {self.root}")
        problems: List[str] = []
        for name, digest in (manifest.get("digests") or {}).items():
            path = self._path(name)
            if not path.exists() or file_digest(path) != digest:
                problems.append(name)
        return problems
