"""Activation maximization, input gradients, and PPM image export."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .eeg_io import BAND_NAMES
from .nn.model import FILTERS, N_CLASSES, TAPS, CnnModel
from .ssfi import MontageLayout, project_montage


# --------------------------------------------------------------------------
# targets and gradients


@dataclass(frozen=True)
class Target:
    """A unit to maximise: ``layer`` in CNV1..CNV5, FC1, FC2, OUT.

    For conv layers the activation is the post-ReLU feature map of filter
    ``index``, averaged over space, or taken at one ``position`` (row, col).
    """

    layer: str
    index: int
    position: tuple[int, int] | None = None


def _n_units(model: CnnModel, layer: str) -> int:
    if layer.startswith("CNV"):
        return FILTERS[int(layer[3:]) - 1]
    return {"FC1": model.fc_sizes[0], "FC2": model.fc_sizes[1], "OUT": N_CLASSES}[layer]


def _check_target(model: CnnModel, target: Target):
    if target.layer not in TAPS:
        raise ValueError(f"unknown layer {target.layer!r}; expected one of {sorted(TAPS)}")
    n = _n_units(model, target.layer)
    if not 0 <= target.index < n:
        raise ValueError(f"{target.layer} has {n} units, index {target.index} out of range")
    if target.position is not None and not target.layer.startswith("CNV"):
        raise ValueError("a spatial position only applies to convolutional layers")


def _seed_grad(act: np.ndarray, target: Target) -> tuple[float, np.ndarray]:
    g = np.zeros_like(act)
    if act.ndim == 4:
        if target.position is None:
            g[0, :, :, target.index] = 1.0 / (act.shape[1] * act.shape[2])
        else:
            r, c = target.position
            if not (0 <= r < act.shape[1] and 0 <= c < act.shape[2]):
                raise ValueError(f"position {target.position} outside the {act.shape[1]}x{act.shape[2]} map")
            g[0, r, c, target.index] = 1.0
    else:
        g[0, target.index] = 1.0
    return float(np.sum(g * act)), g


def target_activation(model: CnnModel, x: np.ndarray, target: Target) -> float:
    act, _ = model.forward(x, "infer", stop=target.layer)
    return _seed_grad(act, target)[0]


def input_gradient(model: CnnModel, x: np.ndarray, target: Target) -> tuple[float, np.ndarray]:
    """Exact d(activation)/d(input) in inference mode; returns ``(activation, gradient)``."""
    _check_target(model, target)
    x = np.asarray(x, dtype=model.dtype)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.shape[0] != 1:
        raise ValueError("input_gradient works on a single input")
    act, caches = model.forward(x, "infer", stop=target.layer)
    value, g = _seed_grad(act, target)
    _, dx = model.backward(g, caches)
    return value, dx[0] if squeeze else dx


# --------------------------------------------------------------------------
# activation maximization


@dataclass
class AscentConfig:
    target: Target
    steps: int = 200
    step_size: float = 0.1
    seed: int = 0
    l2_decay: float = 0.0
    per_channel: bool = False
    max_halvings: int = 30

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")


@dataclass
class PatternResult:
    pattern: np.ndarray  # (G, G, 6)
    trace: list[float]
    target: Target
    degenerate: bool = False
    band: int | None = None


def _ascend(model: CnnModel, x0: np.ndarray, cfg: AscentConfig, mask: np.ndarray | None) -> PatternResult:
    target = cfg.target
    x = x0.copy()

    def objective(a, z):
        return a - cfg.l2_decay * float(np.sum(z * z))

    act, grad = input_gradient(model, x, target)
    if mask is not None:
        grad = grad * mask
    if not np.any(grad):
        return PatternResult(x[0], [act] * (cfg.steps + 1), target, degenerate=True)

    trace = [act]
    obj = objective(act, x)
    step = cfg.step_size
    for _ in range(cfg.steps):
        direction = grad - 2 * cfg.l2_decay * x
        if mask is not None:
            direction = direction * mask
        s = step
        accepted = False
        for _ in range(cfg.max_halvings):
            cand = x + s * direction
            a = target_activation(model, cand, target)
            o = objective(a, cand)
            if a >= act and o >= obj:
                accepted = True
                break
            s *= 0.5
        if accepted:
            x, act, obj = cand, a, o
            step = min(2 * s, cfg.step_size)
            act_new, grad = input_gradient(model, x, target)
            act = act_new
            if mask is not None:
                grad = grad * mask
        trace.append(act)
    return PatternResult(x[0], trace, target)


def activation_maximization(model: CnnModel, cfg: AscentConfig):
    """Gradient ascent on the input from a seeded uniform [0, 1) start.

    Steps are accepted only when they do not lower the activation (or the
    decayed objective), halving the step size until one does, so the trace is
    non-decreasing. With ``per_channel`` each band is optimised alone with the
    other five held at zero, and a list of six results is returned.
    """
    _check_target(model, cfg.target)
    m = model.copy(np.float64)
    g = m.grid
    rng = np.random.default_rng(cfg.seed)
    init = rng.random((1, g, g, len(BAND_NAMES)))
    if not cfg.per_channel:
        return _ascend(m, init, cfg, None)
    results = []
    for b in range(len(BAND_NAMES)):
        mask = np.zeros_like(init)
        mask[..., b] = 1.0
        res = _ascend(m, init * mask, cfg, mask)
        res.band = b
        results.append(res)
    return results


# --------------------------------------------------------------------------
# images


def write_ppm(path: str | os.PathLike, rgb: np.ndarray) -> Path:
    """Binary P6 pixmap from an (H, W, 3) uint8 array."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb).tobytes())
    return path


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PPM supported")
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def diverging_rgb(t: np.ndarray) -> np.ndarray:
    """Blue (0) -> white (0.5) -> red (1); input clipped to [0, 1]."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    lo = np.clip(2 * t, 0, 1)        # 0..0.5 ramps blue->white
    hi = np.clip(2 * t - 1, 0, 1)    # 0.5..1 ramps white->red
    r = np.where(t <= 0.5, lo, 1.0)
    g = np.where(t <= 0.5, lo, 1.0 - hi)
    b = np.where(t <= 0.5, 1.0, 1.0 - hi)
    return np.rint(np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)


def normalize_minmax(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.full(a.shape, 0.5)
    return (a - lo) / (hi - lo)


def _upscale(img: np.ndarray, k: int) -> np.ndarray:
    return np.repeat(np.repeat(img, k, axis=0), k, axis=1) if k > 1 else img


def render_topomap(grid: np.ndarray, out: str | os.PathLike | None = None, upscale: int = 1,
                   electrodes: bool = False, layout: MontageLayout | None = None) -> np.ndarray:
    """Min-max colour map of one scalp grid; returns the RGB array, writes a PPM if ``out``."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError("render_topomap takes a 2-D grid")
    if upscale < 1:
        raise ValueError("upscale must be a positive integer")
    rgb = _upscale(diverging_rgb(normalize_minmax(grid)), upscale)
    if electrodes:
        layout = layout or project_montage()
        h, w = rgb.shape[:2]
        for x, y in layout.xy:
            c = int(np.clip((x + 1) / 2 * w, 0, w - 1))
            r = int(np.clip((1 - y) / 2 * h, 0, h - 1))
            rgb[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2] = 0
    if out is not None:
        write_ppm(out, rgb)
    return rgb


def kernel_tiles(model: CnnModel, layer: str) -> np.ndarray:
    """(n_filters, n_inputs, 3, 3) kernels of a conv layer, filter-major."""
    if not layer.startswith("CNV"):
        raise ValueError("kernels exist only for CNV1..CNV5")
    w = model.params[f"conv{int(layer[3:])}_w"]  # (3, 3, Cin, F)
    return np.transpose(w, (3, 2, 0, 1))


def export_kernels(model: CnnModel, layer: str, out: str | os.PathLike | None = None,
                   scale: int = 8, bands_only: bool = True) -> tuple[np.ndarray, int]:
    """Tile 3x3 kernels into one image: a row per filter, a column per input channel.

    With ``bands_only`` only the first six input channels are drawn, giving
    filters x 6 tiles for every layer. Each tile is min-max normalized on its own; tiles are separated by a
    one-pixel grey border. Returns ``(rgb, n_tiles)``.
    """
    k = kernel_tiles(model, layer)
    if bands_only:
        k = k[:, : len(BAND_NAMES)]
    n_f, n_c = k.shape[:2]
    tile = 3 * scale
    img = np.full((n_f * (tile + 1) + 1, n_c * (tile + 1) + 1, 3), 128, dtype=np.uint8)
    for f in range(n_f):
        for c in range(n_c):
            rgb = _upscale(diverging_rgb(normalize_minmax(k[f, c])), scale)
            r0, c0 = 1 + f * (tile + 1), 1 + c * (tile + 1)
            img[r0:r0 + tile, c0:c0 + tile] = rgb
    if out is not None:
        write_ppm(out, img)
    return img, n_f * n_c


def render_matrix(acc: np.ndarray, out: str | os.PathLike | None = None, cell: int = 12) -> np.ndarray:
    """Heatmap of an accuracy matrix on a fixed [0, 1] scale."""
    rgb = _upscale(diverging_rgb(np.asarray(acc, dtype=np.float64)), cell)
    if out is not None:
        write_ppm(out, rgb)
    return rgb
