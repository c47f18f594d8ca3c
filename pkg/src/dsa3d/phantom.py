"""Synthetic concentric-ellipsoid phantoms with class-controlled geometry.

Each phantom is a single-channel cubic volume: an outer ellipsoid ("brain")
at intensity 1.0 whose outer shell ("cortex") is brighter at 1.5, with a
dark central cavity ("ventricles") at 0.2, on a zero background, plus
optional Gaussian noise. Class signal lives in the shell thickness and the
cavity radius: AD has the largest cavity and thinnest shell, NC the reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .volume import DatasetManifest, Label, ManifestEntry, Volume, save_volume

BACKGROUND = 0.0
INTERIOR = 1.0
SHELL = 1.5
CAVITY = 0.2

# semi-axis ratios (z, y, x) of the outer ellipsoid
ASPECT = (1.0, 0.85, 0.75)


class PhantomGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Dist:
    """Normal distribution over a geometric parameter (std 0 means a point mass)."""

    mean: float
    std: float = 0.0

    def draw(self, rng: np.random.Generator) -> float:
        return float(self.mean + self.std * rng.standard_normal()) if self.std > 0 else float(self.mean)


def _defaults(ad, mci, nc, std):
    return {Label.AD: Dist(ad, std), Label.MCI: Dist(mci, std), Label.NC: Dist(nc, std)}


@dataclass(frozen=True)
class PhantomParams:
    grid: int = 32
    outer_radius: dict = field(default_factory=lambda: _defaults(11.5, 12.0, 12.5, 0.4))
    shell_thickness: dict = field(default_factory=lambda: _defaults(1.6, 2.4, 3.2, 0.15))
    cavity_radius: dict = field(default_factory=lambda: _defaults(5.5, 4.25, 3.0, 0.25))
    center_jitter: float = 1.0
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.grid < 4:
            raise PhantomGeometryError(f"grid must be >= 4, got {self.grid}")
        if self.noise < 0:
            raise PhantomGeometryError(f"noise must be nonnegative, got {self.noise}")
        for name in ("outer_radius", "shell_thickness", "cavity_radius"):
            table = getattr(self, name)
            if set(table) != set(Label):
                raise PhantomGeometryError(f"{name} needs one distribution per label")
            for lab, d in table.items():
                if d.mean <= 0 or d.std < 0:
                    raise PhantomGeometryError(f"{name}[{lab.value}] must have mean > 0, std >= 0")
        cav = self.cavity_radius
        shell = self.shell_thickness
        if not cav[Label.AD].mean > cav[Label.MCI].mean > cav[Label.NC].mean:
            raise PhantomGeometryError("cavity radius means must be ordered AD > MCI > NC")
        if not shell[Label.AD].mean < shell[Label.MCI].mean < shell[Label.NC].mean:
            raise PhantomGeometryError("shell thickness means must be ordered AD < MCI < NC")
        for lab in Label:
            _check_geometry(self.grid, self.outer_radius[lab].mean, shell[lab].mean,
                            cav[lab].mean, self.center_jitter)


def _check_geometry(grid, outer, thickness, cavity, jitter):
    half = grid / 2.0
    if outer + abs(jitter) > half - 0.5:
        raise PhantomGeometryError(
            f"outer radius {outer:.3f} (+ jitter {jitter}) exceeds grid half-width {half - 0.5}")
    inner = outer * min(ASPECT) - thickness
    if thickness <= 0 or cavity <= 0:
        raise PhantomGeometryError("shell thickness and cavity radius must be positive")
    if cavity >= inner:
        raise PhantomGeometryError(
            f"cavity radius {cavity:.3f} does not fit inside the shell (inner semi-axis {inner:.3f})")


def _rng(seed: int, label: Label, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, label.code, int(index)])


def generate_phantom(p: PhantomParams, label: Label, index: int = 0) -> Volume:
    """Draw phantom number ``index`` of class ``label``; deterministic in (params, label, index)."""
    rng = _rng(p.seed, label, index)
    outer = p.outer_radius[label].draw(rng)
    thickness = p.shell_thickness[label].draw(rng)
    cavity = p.cavity_radius[label].draw(rng)
    offset = rng.uniform(-p.center_jitter, p.center_jitter, size=3) if p.center_jitter > 0 else np.zeros(3)
    _check_geometry(p.grid, outer, thickness, cavity, p.center_jitter)

    center = (p.grid - 1) / 2.0 + offset
    z, y, x = np.meshgrid(*(np.arange(p.grid, dtype=np.float64) - c for c in center), indexing="ij")
    semi = np.array(ASPECT) * outer
    inner_semi = semi - thickness
    outer_rho = (z / semi[0]) ** 2 + (y / semi[1]) ** 2 + (x / semi[2]) ** 2
    inner_rho = (z / inner_semi[0]) ** 2 + (y / inner_semi[1]) ** 2 + (x / inner_semi[2]) ** 2

    vol = np.full((p.grid,) * 3, BACKGROUND, dtype=np.float32)
    vol[outer_rho <= 1.0] = SHELL
    vol[inner_rho <= 1.0] = INTERIOR
    vol[z * z + y * y + x * x <= cavity * cavity] = CAVITY
    if p.noise > 0:
        vol += (p.noise * rng.standard_normal(vol.shape)).astype(np.float32)
    return Volume(vol[None])


def cavity_voxel_count(v) -> int:
    """Voxels at exactly the cavity intensity (meaningful for noise-free phantoms)."""
    return int(np.count_nonzero(np.asarray(v) == np.float32(CAVITY)))


def generate_set(p: PhantomParams, per_class: int, start: int = 0):
    """Balanced list of ``(volume, label, subject_id)``, classes interleaved AD, MCI, NC."""
    out = []
    for i in range(start, start + per_class):
        for lab in Label:
            out.append((generate_phantom(p, lab, i), lab, f"{lab.value}-{i:04d}"))
    return out


def write_set(samples, directory, provenance: str = "target") -> DatasetManifest:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for vol, lab, subject in samples:
        path = directory / f"{subject}.vol"
        save_volume(vol, path)
        entries.append(ManifestEntry(str(path), lab, subject))
    return DatasetManifest(tuple(entries), provenance)
