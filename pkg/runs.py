import errno
import hashlib
import json
import logging
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import BaseModel

from errors import MissingInputError, RunLockedError

logger = logging.getLogger(__name__)

SUBDIRS = ["checkpoints", "metrics", "reports"]
MANIFESTS = "manifests"


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds").replace("+00:00", "Z")


def hash_path(path: str) -> str:
    """sha256 of a file, or of every file below a directory in sorted relative order."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"cannot hash missing path {path}")
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    digest = hashlib.sha256()
    for file in files:
        if path.is_dir():
            digest.update(str(file.relative_to(path)).encode())
        with open(file, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                digest.update(chunk)
    return digest.hexdigest()


def atomic_write(path: str, text: str):
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as f:
        f.write(text)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


class RunManifest(BaseModel):
    run_id: str
    command: str
    config: dict
    seeds: Dict[str, int] = {}
    inputs: Dict[str, str] = {}  # name -> content hash
    outputs: Dict[str, str] = {}  # path relative to the run directory -> content hash
    started: str = ""
    finished: str = ""

    def save(self, path: str):
        atomic_write(path, self.json(indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str):
        with open(path) as f:
            return cls(**json.load(f))


class RunDirectory:
    """runs/<run_id>/{manifest.json, manifests/, config.snapshot, checkpoints/, metrics/, reports/}.

    Writers hold `.lock` (created with O_EXCL) for the lifetime of the run.
    """

    def __init__(self, root: str, run_id: str):
        self.path = Path(root) / run_id
        self.run_id = run_id
        self.lock_path = self.path / ".lock"
        self.locked = False

    def sub(self, name: str) -> Path:
        return self.path / name

    def resolve(self, path: str, default_dir: str = "") -> Path:
        """Relative output paths land inside the run directory."""
        p = Path(path)
        if p.is_absolute():
            return p
        return self.path / default_dir / p if default_dir else self.path / p

    def create(self):
        for name in SUBDIRS:
            self.sub(name).mkdir(exist_ok=True, parents=True)
        return self

    def acquire(self):
        self.path.mkdir(exist_ok=True, parents=True)
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except OSError as e:
            if e.errno == errno.EEXIST:
                raise RunLockedError(f"run directory {self.path} is locked by another writer")
            raise
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        self.locked = True
        return self

    def release(self):
        if self.locked:
            self.lock_path.unlink(missing_ok=True)
            self.locked = False

    def __enter__(self):
        self.acquire()
        return self.create()

    def __exit__(self, *exc):
        self.release()
        return False

    def write_snapshot(self, text: str):
        atomic_write(self.path / "config.snapshot", text)

    def list_outputs(self, skip: Optional[List[str]] = None) -> Dict[str, str]:
        skip = set(skip or ["manifest.json", ".lock"])
        outputs = {}
        for p in sorted(self.path.rglob("*")):
            rel = str(p.relative_to(self.path))
            if rel.startswith(MANIFESTS + os.sep):
                continue
            if p.is_file() and rel not in skip and not rel.endswith((".tmp", ".log")):
                outputs[rel] = hash_path(p)
        return outputs

    def history(self) -> List[RunManifest]:
        """Every command's manifest, oldest first."""
        return [RunManifest.load(str(p)) for p in sorted(self.sub(MANIFESTS).glob("*.json"))]

    def append_history(self, manifest: RunManifest) -> Path:
        folder = self.sub(MANIFESTS)
        folder.mkdir(exist_ok=True, parents=True)
        index = len(list(folder.glob("*.json")))
        while True:
            path = folder / f"{index:04d}_{manifest.command}.json"
            try:
                with open(path, "x") as f:
                    f.write(manifest.json(indent=2, sort_keys=True) + "\n")
                return path
            except FileExistsError:
                index += 1

    def write_manifest(self, manifest: RunManifest, latest: bool = True):
        """Appends to manifests/ and, for writers, replaces manifest.json with this entry."""
        manifest.finished = utc_now()
        manifest.outputs = self.list_outputs()
        path = self.append_history(manifest)
        if latest:
            manifest.save(str(self.path / "manifest.json"))
        logger.info(str(dict(manifest=str(path), n_outputs=len(manifest.outputs))))
        return manifest
