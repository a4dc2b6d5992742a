"""
Run manifests: what a command read, how it was configured and what it wrote
"""

import hashlib
import logging
import os
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, List, Optional

import psutil
from pydantic import BaseModel, Field

from .. import __version__

logger = logging.getLogger(__name__)

MANIFEST_NAME = "run_manifest.json"


def file_checksum(path) -> str:
    """SHA256 of a file's bytes"""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def tree_checksums(path) -> Dict[str, str]:
    """Checksums of a file, or of every file under a directory, by relative path"""
    path = Path(path)
    if path.is_file():
        return {path.name: file_checksum(path)}
    return {
        str(p.relative_to(path)): file_checksum(p)
        for p in sorted(path.rglob("*"))
        if p.is_file() and p.name != MANIFEST_NAME
    }


def peak_rss_mb() -> float:
    info = psutil.Process(os.getpid()).memory_info()
    return round(getattr(info, "peak_wset", info.rss) / (1024 * 1024), 2)


class RunManifest(BaseModel):
    command: str
    tool_version: str = __version__
    config: Dict[str, Any] = Field(default_factory=dict)
    inputs: Dict[str, Dict[str, str]] = Field(default_factory=dict)
    seeds: List[int] = Field(default_factory=list)
    stage_timings: Dict[str, float] = Field(default_factory=dict)
    outputs: List[str] = Field(default_factory=list)
    peak_rss_mb: Optional[float] = None

    def add_input(self, label: str, path) -> "RunManifest":
        self.inputs[label] = tree_checksums(path)
        return self

    @contextmanager
    def stage(self, name: str):
        started = time.perf_counter()
        try:
            yield
        finally:
            self.stage_timings[name] = round(time.perf_counter() - started, 4)
            logger.info(f"Stage '{name}' took {self.stage_timings[name]:.2f}s")

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.peak_rss_mb = peak_rss_mb()
        path = out_dir / MANIFEST_NAME
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path
