"""Run manifests: what a command read, how long each stage took, what it wrote."""

import hashlib
import json
import os
import tempfile
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field

from genanalysis.utils.logger import setup_logger
from genanalysis.utils.responses import to_jsonable, metrics_summary

logger = setup_logger(__name__)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


class StageTiming(BaseModel):
    name: str
    seconds: float


class RunManifest(BaseModel):
    command: str
    created_at: str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    spec_sha256: Optional[str] = None
    config_sha256: Optional[str] = None
    config: Dict[str, Any] = Field(default_factory=dict)
    parameters: Dict[str, Any] = Field(default_factory=dict)
    stages: List[StageTiming] = Field(default_factory=list)
    outputs: List[str] = Field(default_factory=list)
    metrics: Dict[str, Any] = Field(default_factory=dict)

    @classmethod
    def start(cls, command: str, spec_text: Optional[str] = None, config=None, **parameters) -> "RunManifest":
        manifest = cls(command=command, parameters=to_jsonable(parameters))
        if spec_text is not None:
            manifest.spec_sha256 = sha256_text(spec_text)
        if config is not None:
            canonical = config.canonical_json()
            manifest.config_sha256 = sha256_text(canonical)
            manifest.config = json.loads(canonical)
        return manifest

    @contextmanager
    def stage(self, name: str):
        """Time a block and record it as a stage."""
        started = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - started
            self.stages.append(StageTiming(name=name, seconds=round(elapsed, 6)))
            logger.info(f"Stage '{name}' took {elapsed:.2f}s")

    def add_output(self, path: str) -> str:
        self.outputs.append(os.path.abspath(path))
        return path

    def add_metrics(self, metrics: Dict[str, Any]):
        self.metrics.update(metrics_summary(to_jsonable(metrics)))

    def write(self, path: str) -> str:
        """Write atomically through a temp file in the target directory."""
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=".manifest-", suffix=".json", dir=directory)
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                f.write(self.model_dump_json(indent=2))
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.remove(tmp)
            raise
        return path


def write_json_atomic(data: Any, path: str) -> str:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".out-", suffix=".json", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(to_jsonable(data), f, indent=2)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    return path
