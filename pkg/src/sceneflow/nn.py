"""Dense neural building blocks: parameter storage, shared per-point MLPs,
the Adam optimizer and a binary checkpoint format.

Each :class:`ParameterStore` entry is one affine layer (2D weight + 1D
bias) with matching gradient slots and Adam state. Layers are grouped into
chains by a ``prefix/i`` naming convention, e.g. ``ap/0``, ``ap/1``.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .autodiff import Tensor
from .errors import (
    InvalidArgumentError,
    FormatError,
    ShapeError,
    StateError,
    TrainingDivergenceError,
)

CHECKPOINT_MAGIC = b"SFLOWCK1"
CHECKPOINT_VERSION = 1


class LinearParam:
    """One affine layer: weight (fan_in, fan_out) and bias (fan_out,)."""

    __slots__ = ("weight", "bias", "_m_w", "_v_w", "_m_b", "_v_b", "step")

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)
        self._m_w = np.zeros_like(self.weight.data)
        self._v_w = np.zeros_like(self.weight.data)
        self._m_b = np.zeros_like(self.bias.data)
        self._v_b = np.zeros_like(self.bias.data)
        self.step = 0

    @property
    def fan_in(self):
        return self.weight.data.shape[0]

    @property
    def fan_out(self):
        return self.weight.data.shape[1]


class ParameterStore:
    """Named affine layers plus optimizer state."""

    def __init__(self):
        self._entries: dict[str, LinearParam] = {}

    # -- construction ----------------------------------------------------
    def add_linear(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> LinearParam:
        if name in self._entries:
            raise InvalidArgumentError(f"duplicate parameter entry {name!r}")
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = np.zeros(fan_out)
        entry = LinearParam(w, b)
        self._entries[name] = entry
        return entry

    def add_chain(self, prefix: str, widths: list[int], rng: np.random.Generator) -> None:
        """Create an MLP chain ``prefix/0 .. prefix/n-1`` with the given widths."""
        if len(widths) < 2:
            raise InvalidArgumentError("an MLP chain needs at least two widths")
        for i in range(len(widths) - 1):
            self.add_linear(f"{prefix}/{i}", widths[i], widths[i + 1], rng)

    def chain(self, prefix: str) -> list[LinearParam]:
        layers = []
        i = 0
        while f"{prefix}/{i}" in self._entries:
            layers.append(self._entries[f"{prefix}/{i}"])
            i += 1
        if not layers:
            raise StateError(f"no layers under prefix {prefix!r}")
        return layers

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name) -> LinearParam:
        return self._entries[name]

    def names(self) -> list[str]:
        return list(self._entries)

    def tensors(self):
        """All trainable tensors in a canonical (name, tensor) order."""
        out = []
        for name, e in self._entries.items():
            out.append((name + ".weight", e.weight))
            out.append((name + ".bias", e.bias))
        return out

    # -- gradients / optimizer -------------------------------------------
    def zero_grad(self) -> None:
        for _, t in self.tensors():
            t.zero_grad()

    def scale_grad(self, factor: float) -> None:
        for _, t in self.tensors():
            if t.grad is not None:
                t.grad *= factor

    def adam_step(self, lr=0.001, betas=(0.9, 0.999), eps=1e-8) -> None:
        """Standard Adam with bias correction; clears gradients afterward.

        Entries with no accumulated gradient this round still advance their
        moment decay (gradient treated as zero).
        """
        b1, b2 = betas
        for entry in self._entries.values():
            entry.step += 1
            t = entry.step
            for tensor, m, v in (
                (entry.weight, entry._m_w, entry._v_w),
                (entry.bias, entry._m_b, entry._v_b),
            ):
                g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
                if not np.all(np.isfinite(g)):
                    raise TrainingDivergenceError("non-finite gradient in adam_step")
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                m_hat = m / (1 - b1 ** t)
                v_hat = v / (1 - b2 ** t)
                tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
                if not np.all(np.isfinite(tensor.data)):
                    raise TrainingDivergenceError("non-finite parameter after adam_step")
        self.zero_grad()

    # -- serialization -----------------------------------------------------
    def save(self, path, config: dict | None = None) -> None:
        """Write the documented binary checkpoint.

        Layout: magic, uint32 little-endian JSON header length, UTF-8 JSON
        header (version, entry names/shapes/step, optional config block),
        then every array as row-major little-endian float64 in header order.
        """
        header = {
            "version": CHECKPOINT_VERSION,
            "entries": [
                {
                    "name": name,
                    "weight_shape": list(e.weight.data.shape),
                    "bias_shape": list(e.bias.data.shape),
                    "step": e.step,
                }
                for name, e in self._entries.items()
            ],
            "config": config,
        }
        blob = json.dumps(header).encode("utf-8")
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
        for e in self._entries.values():
            for arr in (e.weight.data, e.bias.data, e._m_w, e._v_w, e._m_b, e._v_b):
                buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        with open(path, "wb") as f:
            f.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> tuple["ParameterStore", dict | None]:
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:8] != CHECKPOINT_MAGIC:
            raise FormatError("bad checkpoint magic")
        (hlen,) = struct.unpack("<I", raw[8:12])
        try:
            header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"unreadable checkpoint header: {exc}") from exc
        if header.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {header.get('version')!r}")
        store = cls()
        off = 12 + hlen
        for spec in header["entries"]:
            wshape = tuple(spec["weight_shape"])
            bshape = tuple(spec["bias_shape"])
            arrays = []
            for shape in (wshape, bshape, wshape, wshape, bshape, bshape):
                n = int(np.prod(shape)) if shape else 1
                nbytes = n * 8
                if off + nbytes > len(raw):
                    raise FormatError(f"truncated checkpoint at entry {spec['name']!r}")
                arrays.append(
                    np.frombuffer(raw, dtype="<f8", count=n, offset=off)
                    .astype(np.float64)
                    .reshape(shape)
                )
                off += nbytes
            entry = LinearParam(arrays[0], arrays[1])
            entry._m_w, entry._v_w, entry._m_b, entry._v_b = (
                arrays[2],
                arrays[3],
                arrays[4].copy(),
                arrays[5].copy(),
            )
            entry.step = int(spec["step"])
            store._entries[spec["name"]] = entry
        return store, header.get("config")


# ---------------------------------------------------------------------------
# shared MLP


def shared_mlp(layers: list[LinearParam], x: Tensor, final_relu=False) -> Tensor:
    """Apply the same affine+ReLU stack to every row of `x`.

    Hidden layers use ReLU, the last layer is linear unless `final_relu`.
    `x` may have any number of leading axes; the last axis is the feature
    width. Row i of the output depends only on row i of the input.
    """
    if x.shape[-1] != layers[0].fan_in:
        raise ShapeError(
            f"input width {x.shape[-1]} != first layer fan_in {layers[0].fan_in}"
        )
    lead = x.shape[:-1]
    h = x.reshape((-1, x.shape[-1])) if x.ndim != 2 else x
    for i, layer in enumerate(layers):
        h = h.matmul(layer.weight) + layer.bias
        if i < len(layers) - 1 or final_relu:
            h = h.relu()
    if x.ndim != 2:
        h = h.reshape(lead + (h.shape[-1],))
    return h


def shared_mlp_forward(layers: list[LinearParam], inputs) -> tuple[Tensor, Tensor]:
    """Point-wise MLP over a P x D matrix.

    Returns (output tensor, tape). The tape is the output tensor itself:
    its recorded graph replays every layer exactly once during backward.
    """
    x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
    out = shared_mlp(layers, x)
    return out, out


def max_pool_rows(inputs) -> tuple[Tensor, np.ndarray]:
    """Column-wise max over the rows of a P x D matrix.

    Returns the pooled D-vector and the contributing row index per column
    (lowest row wins ties); gradient routes only to those rows.
    """
    x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
    if x.ndim != 2 or x.shape[0] < 1:
        raise InvalidArgumentError("max_pool_rows expects a non-empty P x D matrix")
    pooled = x.max(axis=0)
    return pooled, pooled._argmax  # type: ignore[attr-defined]


def backward(tape: Tensor, upstream=None) -> None:
    """Run reverse-mode accumulation from a forward tape."""
    tape.backward(upstream)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def gradient_check(build_loss, tensors, step=(1e-5, 1e-6), sample_limit=None,
                   rng=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    `build_loss` is a zero-argument callable returning a scalar Tensor; it
    must read the current values of `tensors` (name, Tensor) pairs. Each
    checked coordinate is perturbed by ±step and the loss re-evaluated.
    `step` may be a single value or a sequence; with several steps a
    coordinate scores its best-agreeing step, which keeps piecewise-smooth
    losses checkable (a grouping or argmax flip inside one step interval
    poisons that finite difference, but not the others, while a genuinely
    wrong analytic gradient disagrees at every step). When `sample_limit`
    is set, at most that many coordinates per tensor are probed (chosen by
    `rng`).
    """
    steps = (step,) if np.isscalar(step) else tuple(step)
    loss = build_loss()
    for _, t in tensors:
        t.zero_grad()
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in tensors}

    worst = 0.0
    for name, t in tensors:
        flat = t.data.reshape(-1)
        n = flat.size
        if sample_limit is not None and n > sample_limit:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=sample_limit, replace=False)
        else:
            coords = range(n)
        for j in coords:
            an = analytic[name].reshape(-1)[j]
            orig = flat[j]
            best = np.inf
            for h in steps:
                flat[j] = orig + h
                hi = float(build_loss().data)
                flat[j] = orig - h
                lo = float(build_loss().data)
                flat[j] = orig
                fd = (hi - lo) / (2 * h)
                # symmetric denominator with an absolute floor so near-zero
                # gradients are judged by absolute difference, not FD noise
                rel = abs(an - fd) / (max(abs(an), abs(fd)) + 1e-6)
                best = min(best, rel)
            if best > worst:
                worst = best
    return worst
