"""Spatio-spectral feature images: scalp interpolation of band powers.

Grid convention: row 0 is the anterior edge (y = +1, nose up), column 0 the
left edge (x = -1). Cell centres tile [-1, 1]^2 uniformly.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

from .eeg_io import BAND_NAMES, CHANNELS

GRID = 64

# Idealised spherical positions (signed polar angle from Cz in degrees, azimuth
# in degrees); negative polar angle is the left hemisphere. The outer ring
# (Fp/F7/T7/P7/O) sits at 90 degrees.
SPHERICAL_1020: dict[str, tuple[float, float]] = {
    "AF3": (-74.0, -65.0),
    "F7": (-90.0, -36.0),
    "F3": (-60.0, -51.0),
    "FC5": (-72.0, -21.0),
    "T7": (-90.0, 0.0),
    "P7": (-90.0, 36.0),
    "O1": (-90.0, 72.0),
    "O2": (90.0, -72.0),
    "P8": (90.0, -36.0),
    "T8": (90.0, 0.0),
    "FC6": (72.0, 21.0),
    "F4": (60.0, 51.0),
    "F8": (90.0, 36.0),
    "AF4": (74.0, 65.0),
}


@dataclass(frozen=True)
class MontageLayout:
    names: tuple[str, ...]
    xy: np.ndarray  # (14, 2)

    def position(self, name: str) -> np.ndarray:
        return self.xy[self.names.index(name)]


def _project(theta: float, phi: float) -> tuple[float, float]:
    # azimuthal-equidistant: radius proportional to polar angle, 90 deg -> 1
    r = abs(theta) / 90.0
    s = 1.0 if theta >= 0 else -1.0
    ph = np.deg2rad(phi)
    return r * s * np.cos(ph), r * s * np.sin(ph)


@lru_cache(maxsize=None)
def project_montage() -> MontageLayout:
    xy = np.array([_project(*SPHERICAL_1020[name]) for name in CHANNELS])
    xy.setflags(write=False)
    return MontageLayout(CHANNELS, xy)


def grid_coords(size: int = GRID) -> tuple[np.ndarray, np.ndarray]:
    """Cell-centre coordinates ``(xs, ys)``; ys decreases down the rows."""
    h = 2.0 / size
    xs = -1.0 + h / 2 + h * np.arange(size)
    ys = xs[::-1].copy()
    return xs, ys


def _tps_kernel(r: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = r * r * np.log(r)
    return np.where(r > 0, out, 0.0)


class Interpolator:
    """Thin-plate spline with affine part, factorised once for a fixed layout.

    The interpolant is ``f(p) = sum_i w_i phi(|p - p_i|) + a0 + a1 x + a2 y``
    with ``phi(r) = r^2 log r``; solving the bordered (n+3) system gives the
    weights. For a fixed grid the whole value->grid map is linear, so it is
    precomputed as a (size*size, n) matrix.
    """

    def __init__(self, layout: MontageLayout | None = None, size: int = GRID):
        self.layout = layout or project_montage()
        self.size = size
        pts = self.layout.xy
        n = len(pts)
        if len({tuple(p) for p in np.round(pts, 12)}) != n:
            raise ValueError("coincident electrode positions make the system singular")
        d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        system = np.zeros((n + 3, n + 3))
        system[:n, :n] = _tps_kernel(d)
        poly = np.column_stack([np.ones(n), pts])
        system[:n, n:] = poly
        system[n:, :n] = poly.T
        self._lu = linalg.lu_factor(system)
        self._n = n
        xs, ys = grid_coords(size)
        gx, gy = np.meshgrid(xs, ys)
        grid_pts = np.column_stack([gx.ravel(), gy.ravel()])
        # columns of the inverse restricted to the data block give the
        # value -> (weights, affine) map
        rhs = np.zeros((n + 3, n))
        rhs[:n, :n] = np.eye(n)
        coef = linalg.lu_solve(self._lu, rhs)
        self._grid_map = self._design(grid_pts) @ coef  # (size*size, n)

    def _design(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        d = np.linalg.norm(points[:, None, :] - self.layout.xy[None, :, :], axis=-1)
        return np.hstack([_tps_kernel(d), np.ones((len(points), 1)), points])

    def coefficients(self, values: np.ndarray) -> np.ndarray:
        values = self._check(values)
        rhs = np.concatenate([values, np.zeros(3)])
        return linalg.lu_solve(self._lu, rhs)

    def evaluate(self, values: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Interpolant at arbitrary (x, y) points."""
        return self._design(points) @ self.coefficients(values)

    def grid(self, values: np.ndarray) -> np.ndarray:
        values = self._check(values)
        return (self._grid_map @ values).reshape(self.size, self.size)

    def grids(self, values: np.ndarray) -> np.ndarray:
        """Batch form: (..., 14) -> (..., size, size)."""
        values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise ValueError("electrode values must be finite")
        out = values @ self._grid_map.T
        return out.reshape(values.shape[:-1] + (self.size, self.size))

    def _check(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self._n,):
            raise ValueError(f"expected {self._n} electrode values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("electrode values must be finite")
        return values


@lru_cache(maxsize=8)
def get_interpolator(size: int = GRID) -> Interpolator:
    return Interpolator(project_montage(), size)


def interpolate_band(values, layout: MontageLayout | None = None, size: int = GRID) -> np.ndarray:
    interp = get_interpolator(size) if layout is None else Interpolator(layout, size)
    return interp.grid(values)


def build_ssfi(features, layout: MontageLayout | None = None, size: int = GRID) -> np.ndarray:
    """84 band-major powers (or an (N, 84) stack) -> (size, size, 6) image(s)."""
    values = getattr(features, "values", features)
    values = np.asarray(values, dtype=np.float64)
    n_bands, n_ch = len(BAND_NAMES), len(CHANNELS)
    if values.shape[-1] != n_bands * n_ch:
        raise ValueError(f"expected {n_bands * n_ch} features, got {values.shape[-1]}")
    interp = get_interpolator(size) if layout is None else Interpolator(layout, size)
    blocks = values.reshape(values.shape[:-1] + (n_bands, n_ch))
    grids = interp.grids(blocks)  # (..., 6, size, size)
    return np.moveaxis(grids, -3, -1)


# --------------------------------------------------------------------------
# normalization

STD_FLOOR = 1e-8


@dataclass
class Normalizer:
    """Per-band z-scoring with statistics frozen from a training set."""

    mean: np.ndarray
    std: np.ndarray
    source: str = "train"
    n_fit: int = 0

    def apply(self, ssfi: np.ndarray) -> np.ndarray:
        out = (np.asarray(ssfi) - self.mean) / self.std
        return out.astype(np.asarray(ssfi).dtype, copy=False)

    __call__ = apply

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std],
                "source": self.source, "n_fit": self.n_fit}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["mean"]), np.array(d["std"]), d.get("source", "train"), d.get("n_fit", 0))


def fit_normalizer(train_ssfis: np.ndarray, source: str = "train") -> Normalizer:
    x = np.asarray(train_ssfis)
    if x.ndim != 4 or x.shape[0] < 2:
        raise ValueError("need at least 2 training arrays of shape (N, H, W, bands)")
    x = x.astype(np.float64)
    mean = x.mean(axis=(0, 1, 2))
    std = np.maximum(x.std(axis=(0, 1, 2)), STD_FLOOR)
    # exactly constant band: pin the mean so the band maps to 0, not rounding noise
    flat = x.reshape(-1, x.shape[-1])
    const = flat.min(axis=0) == flat.max(axis=0)
    mean = np.where(const, flat[0], mean)
    return Normalizer(mean, std, source, x.shape[0])


def apply_normalizer(norm: Normalizer, ssfi: np.ndarray) -> np.ndarray:
    return norm.apply(ssfi)


# --------------------------------------------------------------------------
# binary format
#
#   magic "SSFI" | u16 version | u32 N | u32 D1 | u32 D2 | u32 D3
#   D3 x (u16 length, utf-8 band name) | N*D1*D2*D3 float32, row-major, LE

MAGIC = b"SSFI"
VERSION = 1


def write_ssfi(path: str | os.PathLike, arrays: np.ndarray, band_names: Sequence[str] = BAND_NAMES) -> Path:
    arr = np.asarray(arrays)
    if arr.ndim == 3:
        arr = arr[None]
    n, d1, d2, d3 = arr.shape
    if len(band_names) != d3:
        raise ValueError("one band name per channel required")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HIIII", VERSION, n, d1, d2, d3))
        for name in band_names:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def read_ssfi(path: str | os.PathLike) -> tuple[np.ndarray, tuple[str, ...]]:
    """Returns ``(arrays[N, D1, D2, D3], band_names)``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an SSFI file")
    version, n, d1, d2, d3 = struct.unpack_from("<HIIII", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported SSFI version {version}")
    off = 4 + struct.calcsize("<HIIII")
    names = []
    for _ in range(d3):
        (ln,) = struct.unpack_from("<H", data, off)
        off += 2
        names.append(data[off:off + ln].decode("utf-8"))
        off += ln
    arr = np.frombuffer(data, dtype="<f4", count=n * d1 * d2 * d3, offset=off)
    return arr.reshape(n, d1, d2, d3).astype(np.float32), tuple(names)
