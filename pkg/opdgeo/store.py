"""Run directories, checkpoint archives and metric tables on disk.

Layout under the output root::

    <run_id>/manifest.json
    <run_id>/ckpt/<step>.json      tensor manifest
    <run_id>/ckpt/<step>.bin       float32 little-endian blob, row-major
    <run_id>/metrics/*.csv
    <run_id>/events.jsonl          EffOPD runs only
    <run_id>/teacher/0.json        frozen teacher, same archive format

Parameters are float64 in memory and float32 on disk; loading promotes back to
float64.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Mapping

import numpy as np
import pandas as pd

from .config import ExperimentConfig, config_digest
from .errors import MissingCheckpointError, StoreError
from .geometry import UpdateDelta

if TYPE_CHECKING:
    from .toylab.trainer import TrainRun

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DTYPE = "f32"
DISK_DTYPE = np.dtype("<f4")
MANIFEST_NAME = "manifest.json"
EVENTS_NAME = "events.jsonl"


def _dump_json(data: Any) -> bytes:
    return (json.dumps(data, indent=2, sort_keys=True) + "\n").encode("utf-8")


def _write_bytes(path: Path, payload: bytes) -> None:
    """Write through a temporary sibling and rename over the target."""
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(payload)
        tmp.replace(path)
    except OSError as exc:
        raise StoreError(f"cannot write {path}: {exc}") from exc


def _read_bytes(path: Path, description: str) -> bytes:
    if not path.is_file():
        raise FileNotFoundError(f"{description} not found: {path}")
    try:
        return path.read_bytes()
    except OSError as exc:
        raise StoreError(f"cannot read {path}: {exc}") from exc


@dataclass(frozen=True)
class TensorEntry:
    name: str
    shape: tuple[int, ...]
    byte_offset: int
    byte_length: int
    dtype: str = DTYPE

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "shape": list(self.shape),
            "dtype": self.dtype,
            "byte_offset": self.byte_offset,
            "byte_length": self.byte_length,
        }


@dataclass(frozen=True)
class TensorArchive:
    """Reference to one checkpoint on disk: manifest and blob paths."""

    manifest_path: Path
    step: int
    tensors: tuple[TensorEntry, ...]

    @property
    def blob_path(self) -> Path:
        return self.manifest_path.with_suffix(".bin")


def encode_params(params: Mapping[str, np.ndarray]) -> tuple[list[TensorEntry], bytes]:
    """Concatenate every tensor as float32 little-endian, in mapping order."""
    entries = []
    chunks = []
    offset = 0
    for name, value in params.items():
        data = np.ascontiguousarray(value).astype(DISK_DTYPE).tobytes()
        entries.append(TensorEntry(name, tuple(int(d) for d in np.shape(value)), offset, len(data)))
        chunks.append(data)
        offset += len(data)
    return entries, b"".join(chunks)


def save_params(
        params: Mapping[str, np.ndarray],
        directory: Path,
        step: int,
        seed: int,
        config: Mapping[str, Any] | None = None,
        digest: str | None = None,
) -> TensorArchive:
    """Write ``<directory>/<step>.bin`` then ``<directory>/<step>.json``.

    The manifest carries ``config_digest`` only when ``digest`` is given.

    Raises:
        StoreError: on any I/O failure, naming the path.
    """
    entries, blob = encode_params(params)
    manifest = {
        "format_version": FORMAT_VERSION,
        "tensors": [entry.to_dict() for entry in entries],
        "config": dict(config or {}),
        "seed": seed,
        "step": step,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    if digest is not None:
        manifest["config_digest"] = digest
    manifest_path = directory / f"{step}.json"
    _write_bytes(manifest_path.with_suffix(".bin"), blob)
    _write_bytes(manifest_path, _dump_json(manifest))
    return TensorArchive(manifest_path=manifest_path, step=step, tensors=tuple(entries))


def save_checkpoint(
        policy: Any,
        step: int,
        run_dir: Path,
        seed: int,
        config: Mapping[str, Any] | None = None,
        digest: str | None = None,
) -> TensorArchive:
    """Archive a policy (anything with get_params()) or a parameter mapping."""
    params = policy.get_params() if hasattr(policy, "get_params") else policy
    return save_params(params, run_dir / "ckpt", step, seed, config, digest)


def _parse_entries(manifest: Mapping[str, Any], where: Path, blob_size: int) -> list[TensorEntry]:
    if manifest.get("format_version") != FORMAT_VERSION:
        raise StoreError(f"{where}: unsupported format_version {manifest.get('format_version')}")
    entries = []
    expected_offset = 0
    for raw in manifest["tensors"]:
        entry = TensorEntry(
            name=raw["name"],
            shape=tuple(int(d) for d in raw["shape"]),
            byte_offset=int(raw["byte_offset"]),
            byte_length=int(raw["byte_length"]),
            dtype=raw["dtype"],
        )
        if entry.dtype != DTYPE:
            raise StoreError(f"{where}: tensor '{entry.name}' has dtype {entry.dtype}")
        if entry.byte_offset != expected_offset:
            raise StoreError(f"{where}: tensor '{entry.name}' is not contiguous")
        if entry.byte_length != 4 * math.prod(entry.shape):
            raise StoreError(f"{where}: tensor '{entry.name}' has a wrong byte_length")
        expected_offset += entry.byte_length
        entries.append(entry)
    if expected_offset != blob_size:
        raise StoreError(f"{where}: blob holds {blob_size} bytes, manifest describes {expected_offset}")
    return entries


def read_archive(manifest_path: Path) -> dict[str, np.ndarray]:
    """Load an archive as float64 arrays keyed by tensor name.

    Raises:
        FileNotFoundError: if the manifest or blob is missing.
        StoreError: if the manifest is malformed or the blob digest does not match.
    """
    manifest = json.loads(_read_bytes(manifest_path, "checkpoint manifest"))
    blob = _read_bytes(manifest_path.with_suffix(".bin"), "checkpoint blob")
    if hashlib.sha256(blob).hexdigest() != manifest.get("blob_sha256"):
        raise StoreError(f"{manifest_path}: blob digest mismatch")
    params = {}
    for entry in _parse_entries(manifest, manifest_path, len(blob)):
        chunk = blob[entry.byte_offset : entry.byte_offset + entry.byte_length]
        params[entry.name] = (
            np.frombuffer(chunk, dtype=DISK_DTYPE).reshape(entry.shape).astype(np.float64)
        )
    return params


def archive_digest(manifest_path: Path) -> str:
    """SHA-256 over the manifest bytes followed by the blob bytes."""
    digest = hashlib.sha256()
    digest.update(_read_bytes(manifest_path, "checkpoint manifest"))
    digest.update(_read_bytes(manifest_path.with_suffix(".bin"), "checkpoint blob"))
    return digest.hexdigest()


@dataclass(frozen=True)
class CheckpointRef:
    step: int
    path: str
    digest: str


@dataclass
class RunManifest:
    """Index of a run directory."""

    run_id: str
    mode: str
    seed: int
    config_digest: str
    config: dict[str, Any]
    checkpoints: list[CheckpointRef]
    metrics: list[str] = field(default_factory=list)
    events: str | None = None
    teacher: str | None = None
    directory: Path | None = None

    def __post_init__(self) -> None:
        steps = [ref.step for ref in self.checkpoints]
        if not steps or steps[0] != 0:
            raise StoreError(f"run {self.run_id}: step 0 checkpoint missing")
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise StoreError(f"run {self.run_id}: checkpoint steps are not strictly increasing")

    @property
    def steps(self) -> list[int]:
        return [ref.step for ref in self.checkpoints]

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "mode": self.mode,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "config": self.config,
            "checkpoints": [
                {"step": ref.step, "path": ref.path, "digest": ref.digest} for ref in self.checkpoints
            ],
            "metrics": list(self.metrics),
            "events": self.events,
            "teacher": self.teacher,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], directory: Path | None = None) -> "RunManifest":
        return cls(
            run_id=data["run_id"],
            mode=data["mode"],
            seed=int(data["seed"]),
            config_digest=data["config_digest"],
            config=dict(data["config"]),
            checkpoints=[CheckpointRef(int(c["step"]), c["path"], c["digest"]) for c in data["checkpoints"]],
            metrics=list(data.get("metrics", [])),
            events=data.get("events"),
            teacher=data.get("teacher"),
            directory=directory,
        )

    def experiment_config(self) -> ExperimentConfig:
        """The resolved configuration this run was produced with."""
        from .config import parse_config

        return parse_config(json.dumps(self.config), source=f"{self.run_id}/{MANIFEST_NAME}")


def run_id_for(mode: str, seed: int, digest: str) -> str:
    return f"{mode}-s{seed}-{digest[:12]}"


def with_provenance(frame: pd.DataFrame, digest: str, seed: int) -> pd.DataFrame:
    """Prepend config_digest and seed columns."""
    out = frame.copy()
    out.insert(0, "seed", seed)
    out.insert(0, "config_digest", digest)
    return out


def write_table(frame: pd.DataFrame, path: Path) -> Path:
    """Write a CSV table, creating parent directories."""
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
    except OSError as exc:
        raise StoreError(f"cannot write {path}: {exc}") from exc
    return path


def write_run(
        run: "TrainRun",
        cfg: ExperimentConfig,
        root: Path,
        teacher: Mapping[str, np.ndarray] | None = None,
) -> RunManifest:
    """Persist every checkpoint, the metric table and the event log of a run.

    The teacher, when given, is archived under ``teacher/0.json``.

    Returns:
        The manifest, also written to ``<root>/<run_id>/manifest.json``.
    """
    from .effopd import write_events

    digest = config_digest(cfg)
    run_id = run_id_for(run.mode, run.seed, digest)
    run_dir = root / run_id
    echo = {"model": cfg.to_dict()["model"], "task": cfg.to_dict()["task"]}

    refs = []
    for step in sorted(run.checkpoints):
        archive = save_checkpoint(run.checkpoints[step], step, run_dir, run.seed, echo, digest)
        refs.append(
            CheckpointRef(
                step=step,
                path=archive.manifest_path.relative_to(run_dir).as_posix(),
                digest=archive_digest(archive.manifest_path),
            )
        )

    metrics_path = write_table(
        with_provenance(run.metrics, digest, run.seed), run_dir / "metrics" / "train.csv"
    )
    events = None
    if run.mode == "effopd":
        write_events(run.events, run_dir / EVENTS_NAME, digest, run.seed)
        events = EVENTS_NAME
    teacher_path = None
    if teacher is not None:
        archive = save_params(teacher, run_dir / "teacher", 0, run.seed, echo, digest)
        teacher_path = archive.manifest_path.relative_to(run_dir).as_posix()

    manifest = RunManifest(
        run_id=run_id,
        mode=run.mode,
        seed=run.seed,
        config_digest=digest,
        config=cfg.to_dict(),
        checkpoints=refs,
        metrics=[metrics_path.relative_to(run_dir).as_posix()],
        events=events,
        teacher=teacher_path,
        directory=run_dir,
    )
    _write_bytes(run_dir / MANIFEST_NAME, _dump_json(manifest.to_dict()))
    logger.info("run %s written with %d checkpoints", run_id, len(refs))
    return manifest


def open_run(path: Path) -> RunManifest:
    """Read a run manifest from a run directory or the manifest file itself."""
    manifest_path = path if path.name == MANIFEST_NAME else path / MANIFEST_NAME
    data = json.loads(_read_bytes(manifest_path, "run manifest"))
    return RunManifest.from_dict(data, directory=manifest_path.parent)


def manifest_digest(path: Path) -> str:
    """SHA-256 of a run's manifest.json."""
    manifest_path = path if path.name == MANIFEST_NAME else path / MANIFEST_NAME
    return hashlib.sha256(_read_bytes(manifest_path, "run manifest")).hexdigest()


def require_steps(run: RunManifest, steps: list[int]) -> None:
    """Raise MissingCheckpointError naming every absent step."""
    missing = [step for step in steps if step not in run.steps]
    if missing:
        raise MissingCheckpointError(missing, f"run {run.run_id}")


def load_checkpoint(run: RunManifest, step: int) -> dict[str, np.ndarray]:
    """Parameters of one checkpoint as float64."""
    require_steps(run, [step])
    ref = next(ref for ref in run.checkpoints if ref.step == step)
    return read_archive(run.directory / ref.path)


def load_delta(run: RunManifest, step_a: int, step_b: int) -> UpdateDelta:
    """W_b − W_a after promotion to float64.

    Raises:
        MissingCheckpointError: if either step is absent.
        ArchitectureMismatchError: if the two archives hold different tensors.
    """
    require_steps(run, [step_a, step_b])
    return UpdateDelta.from_params(load_checkpoint(run, step_b), load_checkpoint(run, step_a))


def load_metrics(run: RunManifest, name: str = "train.csv") -> pd.DataFrame:
    """One of the run's metric tables."""
    path = run.directory / "metrics" / name
    if not path.is_file():
        raise FileNotFoundError(f"metric table not found: {path}")
    return pd.read_csv(path)


def load_teacher(run: RunManifest) -> dict[str, np.ndarray] | None:
    """Archived teacher parameters, None when the run stored no teacher."""
    if run.teacher is None:
        return None
    return read_archive(run.directory / run.teacher)
