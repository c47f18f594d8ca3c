"""Volumes, the VOL3 file format, CSV manifests and task relabeling.

A volume is a dense ``(channels, depth, height, width)`` array stored
channel-major then z-major. On disk it is::

    b"VOL3" | uint32 channels, depth, height, width (little-endian) | float32 LE data
"""

from __future__ import annotations

import csv
import enum
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"VOL3"
_HEADER = struct.Struct("<4s4I")


class VolumeError(ValueError):
    """Invalid volume contents or shape."""


class VolumeFormatError(VolumeError):
    """Base class for malformed VOL3 files."""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedVolumeError(VolumeFormatError):
    pass


class ZeroExtentError(VolumeFormatError):
    pass


class ManifestError(ValueError):
    pass


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class Shape4:
    channels: int
    depth: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("channels", "depth", "height", "width"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise VolumeError(f"{name} must be a positive integer, got {v!r}")

    @property
    def size(self) -> int:
        return self.channels * self.depth * self.height * self.width

    @property
    def spatial(self) -> tuple[int, int, int]:
        return (self.depth, self.height, self.width)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.channels, self.depth, self.height, self.width)


class Volume:
    """Immutable 4D voxel array.

    ``data`` is a read-only float array of shape ``(C, D, H, W)``. Any numpy
    function accepts a Volume directly through ``__array__``.
    """

    __slots__ = ("_data",)

    def __init__(self, data, dtype=np.float32):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4:
            raise VolumeError(f"volume must be 3D or 4D, got {arr.ndim} dims")
        Shape4(*arr.shape)
        if not np.all(np.isfinite(arr)):
            bad = np.unravel_index(int(np.flatnonzero(~np.isfinite(arr))[0]), arr.shape)
            raise VolumeError(f"non-finite voxel at index {tuple(int(i) for i in bad)}")
        arr.setflags(write=False)
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Shape4:
        return Shape4(*self._data.shape)

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._data
        return self._data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self._data.shape == other._data.shape and np.array_equal(self._data, other._data)

    def __hash__(self):
        return hash((self._data.shape, self._data.tobytes()))

    def __repr__(self):
        return f"Volume(shape={self._data.shape}, dtype={self._data.dtype})"


def save_volume(v, path) -> None:
    arr = np.asarray(v)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise VolumeError(f"volume must be 4D, got shape {arr.shape}")
    finite = np.isfinite(arr)
    if not finite.all():
        bad = np.unravel_index(int(np.flatnonzero(~finite)[0]), arr.shape)
        raise VolumeError(f"non-finite voxel at index {tuple(int(i) for i in bad)}")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, *arr.shape))
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write volume to {os.fspath(path)!r}: {exc.strerror}") from exc


def load_volume(path) -> Volume:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read volume {os.fspath(path)!r}: {exc.strerror}") from exc
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{os.fspath(path)!r}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedVolumeError(f"{os.fspath(path)!r}: header truncated")
    _, *dims = _HEADER.unpack_from(raw)
    if min(dims) == 0:
        raise ZeroExtentError(f"{os.fspath(path)!r}: zero extent in shape {tuple(dims)}")
    count = int(np.prod(dims, dtype=np.int64))
    expected = _HEADER.size + 4 * count
    if len(raw) < expected:
        have = (len(raw) - _HEADER.size) // 4
        raise TruncatedVolumeError(
            f"{os.fspath(path)!r}: header declares {count} voxels, found {have}")
    if len(raw) > expected:
        raise VolumeFormatError(f"{os.fspath(path)!r}: {len(raw) - expected} trailing bytes")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=_HEADER.size)
    return Volume(data.reshape(dims).astype(np.float32))


class Label(enum.Enum):
    AD = "AD"
    MCI = "MCI"
    NC = "NC"

    @property
    def code(self) -> int:
        return _LABEL_CODES[self]


_LABEL_CODES = {Label.AD: 0, Label.MCI: 1, Label.NC: 2}


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: Label
    subject_id: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    provenance: str = "target"

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def class_counts(self) -> dict[Label, int]:
        counts = {lab: 0 for lab in Label}
        for e in self.entries:
            counts[e.label] += 1
        return counts

    @property
    def labels(self) -> list[Label]:
        return [e.label for e in self.entries]


def _read_shape(path: Path) -> tuple[int, ...]:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size or head[:4] != MAGIC:
        raise ManifestError(f"{os.fspath(path)!r} is not a VOL3 file")
    return tuple(_HEADER.unpack(head)[1:])


def load_manifest(path, provenance: str = "target", check_shapes: bool = True) -> DatasetManifest:
    """Parse a ``path,label,subject_id`` CSV manifest.

    Relative volume paths are resolved against the manifest's directory. A
    first line reading ``path,label,subject_id`` is treated as a header.
    """
    path = Path(path)
    entries = []
    seen = set()
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            row = [c.strip() for c in row]
            if lineno == 1 and [c.lower() for c in row] == ["path", "label", "subject_id"]:
                continue
            if len(row) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            vol_path, token, subject = row
            try:
                label = Label(token.upper())
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: unknown label {token!r}") from None
            resolved = str((path.parent / vol_path) if not os.path.isabs(vol_path) else Path(vol_path))
            if resolved in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate path {vol_path!r}")
            seen.add(resolved)
            entries.append(ManifestEntry(resolved, label, subject))
    if check_shapes and entries:
        ref = _read_shape(Path(entries[0].path))
        for e in entries[1:]:
            shape = _read_shape(Path(e.path))
            if shape != ref:
                raise ManifestError(
                    f"shape mismatch: {e.path!r} has {shape}, {entries[0].path!r} has {ref}")
    return DatasetManifest(tuple(entries), provenance)


def write_manifest(manifest: DatasetManifest, path, relative_to=None) -> None:
    base = Path(relative_to) if relative_to is not None else Path(path).parent
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "subject_id"])
        for e in manifest.entries:
            p = Path(e.path)
            try:
                p = p.relative_to(base)
            except ValueError:
                pass
            w.writerow([p.as_posix(), e.label.value, e.subject_id])


@dataclass(frozen=True)
class TaskSpec:
    """A classification task: which labels take part and which class each maps to."""

    name: str
    class_map: dict

    @property
    def n_classes(self) -> int:
        return len({c for c in self.class_map.values() if c is not None})

    @property
    def class_names(self) -> list[str]:
        names = []
        for idx in range(self.n_classes):
            names.append("+".join(lab.value for lab, c in self.class_map.items() if c == idx))
        return names

    @property
    def is_binary(self) -> bool:
        return self.n_classes == 2


TASKS = {
    "ad-mci-nc": TaskSpec("ad-mci-nc", {Label.AD: 0, Label.MCI: 1, Label.NC: 2}),
    "admci-nc": TaskSpec("admci-nc", {Label.AD: 0, Label.MCI: 0, Label.NC: 1}),
    "ad-nc": TaskSpec("ad-nc", {Label.AD: 0, Label.MCI: None, Label.NC: 1}),
    "ad-mci": TaskSpec("ad-mci", {Label.AD: 0, Label.MCI: 1, Label.NC: None}),
    "mci-nc": TaskSpec("mci-nc", {Label.AD: None, Label.MCI: 0, Label.NC: 1}),
}
_ALIASES = {
    "ternary": "ad-mci-nc", "ad/mci/nc": "ad-mci-nc",
    "ad+mci/nc": "admci-nc", "ad+mci-nc": "admci-nc",
    "ad/nc": "ad-nc", "ad/mci": "ad-mci", "mci/nc": "mci-nc",
}


def get_task(name: str) -> TaskSpec:
    key = name.strip().lower()
    key = _ALIASES.get(key, key)
    try:
        return TASKS[key]
    except KeyError:
        raise TaskError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None


def apply_task(manifest, task: TaskSpec) -> list[tuple[str, int]]:
    out = [(e.path, task.class_map[e.label]) for e in manifest
           if task.class_map[e.label] is not None]
    if not out:
        raise TaskError(f"task {task.name!r} excludes every manifest entry")
    return out
