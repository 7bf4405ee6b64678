"""The five-convolution SSFI classifier.

Block layout: conv -> ReLU -> 2x2 max-pool -> batch norm -> dropout for CNV1-4,
conv -> ReLU for CNV5, then flatten -> FC1 -> ReLU -> FC2 -> ReLU -> 3 logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import layers as L

FILTERS = (32, 16, 16, 16, 16)
FC_SIZES = (64, 32)
N_CLASSES = 3
IN_CHANNELS = 6
DROPOUT = 0.3
L2 = 0.01

# public layer names -> op whose output is that layer's activation
TAPS = {
    "CNV1": "relu1", "CNV2": "relu2", "CNV3": "relu3", "CNV4": "relu4", "CNV5": "relu5",
    "FC1": "relu_fc1", "FC2": "relu_fc2", "OUT": "out",
}


@dataclass
class CnnModel:
    grid: int = 64
    fc_sizes: tuple[int, int] = FC_SIZES
    seed: int = 0
    dtype: Any = np.float32
    dropout: float = DROPOUT
    l2: float = L2
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    normalizer: Any = None
    majority: int | None = None

    def __post_init__(self):
        if self.grid % 16:
            raise ValueError("grid size must be divisible by 16 (four 2x2 pools)")
        self.dtype = np.dtype(self.dtype)
        self.fc_sizes = tuple(int(v) for v in self.fc_sizes)
        self.ops = self._build_ops()
        if not self.params:
            self._init_params()

    # -- construction -----------------------------------------------------

    @property
    def flatten_size(self) -> int:
        return (self.grid // 16) ** 2 * FILTERS[-1]

    def _build_ops(self):
        ops = []
        for k in range(1, 6):
            ops.append((f"conv{k}", "conv", k))
            ops.append((f"relu{k}", "relu", k))
            if k < 5:
                ops.append((f"pool{k}", "pool", k))
                ops.append((f"bn{k}", "bn", k))
                ops.append((f"drop{k}", "drop", k))
        ops.append(("flatten", "flatten", None))
        ops.append(("fc1", "dense", "fc1"))
        ops.append(("relu_fc1", "relu", None))
        ops.append(("fc2", "dense", "fc2"))
        ops.append(("relu_fc2", "relu", None))
        ops.append(("out", "dense", "out"))
        return ops

    def _init_params(self):
        rng = np.random.default_rng(self.seed)
        dt = self.dtype
        cin = IN_CHANNELS
        for k, f in enumerate(FILTERS, start=1):
            fan_in = 9 * cin
            self.params[f"conv{k}_w"] = (rng.standard_normal((3, 3, cin, f)) * np.sqrt(2.0 / fan_in)).astype(dt)
            self.params[f"conv{k}_b"] = np.zeros(f, dt)
            if k < 5:
                self.params[f"bn{k}_gamma"] = np.ones(f, dt)
                self.params[f"bn{k}_beta"] = np.zeros(f, dt)
                self.buffers[f"bn{k}_mean"] = np.zeros(f, dt)
                self.buffers[f"bn{k}_var"] = np.ones(f, dt)
            cin = f
        widths = [self.flatten_size, *self.fc_sizes, N_CLASSES]
        for name, din, dout in zip(("fc1", "fc2", "out"), widths[:-1], widths[1:]):
            self.params[f"{name}_w"] = (rng.standard_normal((din, dout)) * np.sqrt(2.0 / din)).astype(dt)
            self.params[f"{name}_b"] = np.zeros(dout, dt)

    def regularized_names(self) -> list[str]:
        """Hidden conv and FC weight matrices (no biases, BN, or output layer)."""
        return [f"conv{k}_w" for k in range(1, 6)] + ["fc1_w", "fc2_w"]

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self, dtype=None) -> "CnnModel":
        dt = np.dtype(dtype or self.dtype)
        return CnnModel(
            self.grid, self.fc_sizes, self.seed, dt, self.dropout, self.l2,
            {k: v.astype(dt, copy=True) for k, v in self.params.items()},
            {k: v.astype(dt, copy=True) for k, v in self.buffers.items()},
            self.normalizer, self.majority,
        )

    # -- passes -----------------------------------------------------------

    def op_index(self, name: str) -> int:
        name = TAPS.get(name, name)
        for i, (op, _, _) in enumerate(self.ops):
            if op == name:
                return i
        raise ValueError(f"unknown layer {name!r}")

    def forward(self, x, mode="infer", rng=None, stop=None, dropout=True):
        """Run the stack; returns ``(output, caches)``.

        ``stop`` names a layer (``CNV1``..``OUT`` or an op name); the pass ends
        after that op and its output is returned.
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1:] != (self.grid, self.grid, IN_CHANNELS):
            raise ValueError(f"expected input (N, {self.grid}, {self.grid}, {IN_CHANNELS}), got {x.shape}")
        last = len(self.ops) - 1 if stop is None else self.op_index(stop)
        p, caches = self.params, []
        rate = self.dropout if dropout else 0.0
        for name, kind, arg in self.ops[: last + 1]:
            if kind == "conv":
                x, c = L.conv2d_forward(x, p[f"conv{arg}_w"], p[f"conv{arg}_b"])
            elif kind == "relu":
                x, c = L.relu_forward(x)
            elif kind == "pool":
                x, c = L.maxpool_forward(x)
            elif kind == "bn":
                x, c = L.batchnorm_forward(
                    x, p[f"bn{arg}_gamma"], p[f"bn{arg}_beta"],
                    self.buffers[f"bn{arg}_mean"], self.buffers[f"bn{arg}_var"], mode)
            elif kind == "drop":
                x, c = L.dropout_forward(x, rate, mode, rng)
            elif kind == "flatten":
                c = x.shape
                x = x.reshape(x.shape[0], -1)
            else:
                x, c = L.dense_forward(x, p[f"{arg}_w"], p[f"{arg}_b"])
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite activations after {name}")
            caches.append(c)
        return x, caches

    def backward(self, dout, caches):
        """Backprop from the last op in ``caches``; returns ``(grads, dinput)``."""
        grads: dict[str, np.ndarray] = {}
        d = dout
        for (name, kind, arg), c in zip(reversed(self.ops[: len(caches)]), reversed(caches)):
            if kind == "conv":
                d, grads[f"conv{arg}_w"], grads[f"conv{arg}_b"] = L.conv2d_backward(d, c)
            elif kind == "relu":
                d = L.relu_backward(d, c)
            elif kind == "pool":
                d = L.maxpool_backward(d, c)
            elif kind == "bn":
                d, grads[f"bn{arg}_gamma"], grads[f"bn{arg}_beta"] = L.batchnorm_backward(d, c)
            elif kind == "drop":
                d = L.dropout_backward(d, c)
            elif kind == "flatten":
                d = d.reshape(c)
            else:
                d, grads[f"{arg}_w"], grads[f"{arg}_b"] = L.dense_backward(d, c)
        return grads, d

    def logits(self, x):
        return self.forward(x, "infer")[0]

    def predict_proba(self, x, batch_size=256):
        out = [L.softmax(self.logits(x[i:i + batch_size])) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, N_CLASSES), self.dtype)

    def predict(self, x, batch_size=256):
        return self.predict_proba(x, batch_size).argmax(axis=1)


def build_model(grid: int = 64, fc_sizes=FC_SIZES, seed: int = 0, dtype=np.float32) -> CnnModel:
    return CnnModel(grid=grid, fc_sizes=fc_sizes, seed=seed, dtype=dtype)


def l2_penalty(model: CnnModel, lam: float | None = None):
    """``lam * sum ||W||^2`` over hidden weights, plus its gradient ``2 lam W``."""
    lam = model.l2 if lam is None else lam
    total = 0.0
    grads = {}
    for name in model.regularized_names():
        w = model.params[name]
        total += float(np.sum(w.astype(np.float64) ** 2))
        grads[name] = (2 * lam * w).astype(w.dtype)
    return lam * total, grads


def loss_and_grads(model: CnnModel, x, labels, mode="train", rng=None, dropout=True):
    """Cross-entropy plus l2 penalty; returns ``(loss, grads, logits)``."""
    logits, caches = model.forward(x, mode, rng, dropout=dropout)
    ce, dlogits = L.softmax_cross_entropy(logits, labels)
    grads, _ = model.backward(dlogits.astype(model.dtype, copy=False), caches)
    pen, pgrads = l2_penalty(model)
    for k, g in pgrads.items():
        grads[k] = grads[k] + g
    return ce + pen, grads, logits
