"""On-disk checkpoints and the per-timestep model registry.

Layout of a run directory::

    <run>/manifest.json          run-level provenance
    <run>/t<tau>.manifest.json   per-model manifest (tau is an int or "all")
    <run>/t<tau>.weights.bin     float64 little-endian parameter blob
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .denoiser import DenoiserModel, param_count
from .errors import (
    ChecksumError,
    DuplicateTauError,
    FingerprintMismatchError,
    MissingTauError,
    NumericError,
    TSpaceError,
)

FORMAT_VERSION = 1
RUN_MANIFEST = "manifest.json"


def blob_checksum(blob: bytes) -> str:
    """64-bit BLAKE2b digest of a weight blob, as 16 hex digits."""
    return hashlib.blake2b(blob, digest_size=8).hexdigest()


def fingerprint_hex(fp: int) -> str:
    return f"{fp:016x}"


def params_to_blob(params: np.ndarray) -> bytes:
    return np.ascontiguousarray(params, dtype="<f8").tobytes()


def atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: Path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


@dataclass
class CheckpointManifest:
    schedule_fingerprint: str
    regime: str
    tau: int | str
    layer_sizes: list[int]
    activation: str
    time_embed_dim: int
    label_dim: int
    T: int
    data_dim: int
    iterations: int
    init_seed: int
    run_seed: int
    blob_bytes: int
    blob_checksum: str
    weights_file: str
    trained_taus: list[int] | None = None
    format_version: int = FORMAT_VERSION

    @property
    def fingerprint(self) -> int:
        return int(self.schedule_fingerprint, 16)

    @classmethod
    def from_dict(cls, d: dict) -> "CheckpointManifest":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


def checkpoint_stem(tau) -> str:
    return f"t{tau}"


def save_checkpoint(
    model: DenoiserModel,
    directory,
    *,
    tau: int | str,
    fingerprint: int,
    regime: str,
    iterations: int,
    run_seed: int = 0,
) -> CheckpointManifest:
    """Write ``t<tau>.weights.bin`` then ``t<tau>.manifest.json``, each atomically."""
    if not np.all(np.isfinite(model.params)):
        raise NumericError(f"refusing to save non-finite weights for tau={tau}", tau=tau)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = checkpoint_stem(tau)
    blob = params_to_blob(model.params)
    manifest = CheckpointManifest(
        schedule_fingerprint=fingerprint_hex(fingerprint),
        regime=regime,
        tau=tau,
        layer_sizes=list(model.layer_sizes),
        activation=model.activation,
        time_embed_dim=model.time_embed_dim,
        label_dim=model.label_dim,
        T=model.T,
        data_dim=model.data_dim,
        iterations=int(iterations),
        init_seed=model.init_seed,
        run_seed=int(run_seed),
        blob_bytes=len(blob),
        blob_checksum=blob_checksum(blob),
        weights_file=f"{stem}.weights.bin",
        trained_taus=None if model.trained_taus is None else list(model.trained_taus),
    )
    atomic_write(directory / manifest.weights_file, blob)
    write_json(directory / f"{stem}.manifest.json", asdict(manifest))
    return manifest


def read_manifest(path) -> CheckpointManifest:
    with open(path) as fh:
        return CheckpointManifest.from_dict(json.load(fh))


def _read_blob(directory: Path, manifest: CheckpointManifest, verify: bool = True) -> bytes:
    blob = (directory / manifest.weights_file).read_bytes()
    expected = 8 * param_count(manifest.layer_sizes)
    if len(blob) != manifest.blob_bytes or len(blob) != expected:
        raise ChecksumError(
            f"{manifest.weights_file}: blob length {len(blob)} != expected {expected}"
        )
    if verify and blob_checksum(blob) != manifest.blob_checksum:
        raise ChecksumError(f"{manifest.weights_file}: checksum mismatch")
    return blob


def model_from_blob(manifest: CheckpointManifest, blob: bytes) -> DenoiserModel:
    params = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    return DenoiserModel(
        manifest.layer_sizes,
        activation=manifest.activation,
        time_embed_dim=manifest.time_embed_dim,
        label_dim=manifest.label_dim,
        T=manifest.T,
        init_seed=manifest.init_seed,
        data_dim=manifest.data_dim,
        params=params,
        trained_taus=manifest.trained_taus,
    )


def load_checkpoint(directory, tau: int | str = "all", expected_fingerprint: int | None = None):
    """Load one checkpoint; returns ``(model, manifest)``."""
    directory = Path(directory)
    manifest = read_manifest(directory / f"{checkpoint_stem(tau)}.manifest.json")
    if expected_fingerprint is not None and manifest.fingerprint != expected_fingerprint:
        raise FingerprintMismatchError(expected_fingerprint, manifest.fingerprint)
    return model_from_blob(manifest, _read_blob(directory, manifest)), manifest


class _Entry:
    __slots__ = ("manifest", "model", "lock", "blob")

    def __init__(self, manifest=None, model=None, blob=None):
        self.manifest = manifest
        self.model = model
        self.blob = blob
        self.lock = threading.Lock()


class ModelRegistry:
    """Map from timestep to a frozen model, stamped with a schedule fingerprint.

    Models from disk are built on first :meth:`resolve`; the first touch of
    each timestep is serialized by a per-entry lock.
    """

    def __init__(self, fingerprint: int, entries: Mapping[int, _Entry] | None = None, directory=None):
        self.fingerprint = int(fingerprint)
        self.directory = None if directory is None else Path(directory)
        self._entries: dict[int, _Entry] = dict(entries or {})

    @classmethod
    def from_models(cls, models: Mapping[int, DenoiserModel], fingerprint: int) -> "ModelRegistry":
        entries = {}
        for tau, model in models.items():
            entries[int(tau)] = _Entry(model=model.freeze() if not model.frozen else model)
        return cls(fingerprint, entries)

    @property
    def taus(self) -> tuple[int, ...]:
        return tuple(sorted(self._entries))

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, tau) -> bool:
        return tau in self._entries

    def manifest(self, tau: int) -> CheckpointManifest | None:
        return self._entry(tau).manifest

    def _entry(self, tau) -> _Entry:
        try:
            return self._entries[tau]
        except KeyError:
            raise MissingTauError(tau) from None

    def resolve(self, tau: int) -> DenoiserModel:
        entry = self._entry(tau)
        model = entry.model
        if model is not None:
            return model
        with entry.lock:
            if entry.model is None:
                blob = entry.blob
                if blob is None:
                    blob = _read_blob(self.directory, entry.manifest)
                entry.model = model_from_blob(entry.manifest, blob).freeze()
                entry.blob = None
            return entry.model

    def loaded(self) -> tuple[int, ...]:
        return tuple(t for t, e in sorted(self._entries.items()) if e.model is not None)

    def save(self, directory, *, regime: str = "disentangled", iterations=None, run_seed: int = 0):
        """Write every model as ``t<tau>.*``; ``iterations`` maps tau to a count."""
        out = {}
        for tau in self.taus:
            iters = 0 if iterations is None else int(iterations[tau])
            out[tau] = save_checkpoint(
                self.resolve(tau), directory, tau=tau, fingerprint=self.fingerprint,
                regime=regime, iterations=iters, run_seed=run_seed,
            )
        return out


def resolve(registry: ModelRegistry, tau: int) -> DenoiserModel:
    return registry.resolve(tau)


def load_registry(
    path,
    expected_fingerprint: int | None = None,
    *,
    verify_checksums: bool = True,
    allow_fingerprint_mismatch: bool = False,
) -> ModelRegistry:
    """Index every per-timestep checkpoint under ``path``.

    Fingerprints and blob checksums are verified up front; models themselves
    are only built when first resolved. ``expected_fingerprint=None`` adopts
    the fingerprint of the first manifest found.
    """
    path = Path(path)
    if not path.is_dir():
        raise TSpaceError(f"registry directory {path} does not exist")
    entries: dict[int, _Entry] = {}
    fingerprint = expected_fingerprint
    for mpath in sorted(path.glob("t*.manifest.json")):
        manifest = read_manifest(mpath)
        if manifest.tau == "all" or isinstance(manifest.tau, str):
            continue
        if fingerprint is None:
            fingerprint = manifest.fingerprint
        if manifest.fingerprint != fingerprint and not allow_fingerprint_mismatch:
            raise FingerprintMismatchError(fingerprint, manifest.fingerprint)
        tau = int(manifest.tau)
        if tau in entries:
            raise DuplicateTauError(f"two checkpoints claim tau={tau} (second: {mpath.name})")
        # length is always checked; the checksum only when asked
        _read_blob(path, manifest, verify=verify_checksums)
        entries[tau] = _Entry(manifest=manifest)
    return ModelRegistry(0 if fingerprint is None else fingerprint, entries, directory=path)
