"""Minimal reverse-mode neural-network kernels on float64 numpy arrays.

Layers operate on batched tensors ([B, n] for dense, [B, C, H, W] for
convolutions), cache what their backward pass needs during forward, and
accumulate parameter gradients on backward. Everything is deterministic
given the init seed; there is no hidden global state.

Also provides the Adam update, the cosine learning-rate schedule, the
binary model-persistence format, and finite-difference gradient
verification used by the test suite.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DomainError, ParseError, ShapeError, StateError

Array = np.ndarray


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int) -> Array:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Layer:
    """Base layer: forward caches, backward consumes the cache exactly once."""

    name = "layer"

    def forward(self, x: Array) -> Array:
        raise NotImplementedError

    def backward(self, grad: Array) -> Array:
        raise NotImplementedError

    def parameters(self) -> dict[str, Array]:
        return {}

    def gradients(self) -> dict[str, Array]:
        return {}

    def zero_grad(self) -> None:
        for g in self.gradients().values():
            g[...] = 0.0

    def _take_cache(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise StateError(f"{self.name}: backward called before forward")
        self._cache = None
        return cache


class Dense(Layer):
    """y = x @ W^T + b with W of shape [n_out, n_in]."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str):
        self.name = name
        self.n_in, self.n_out = n_in, n_out
        self.weight = glorot_uniform(rng, (n_out, n_in), n_in, n_out)
        self.bias = np.zeros(n_out)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    def forward(self, x: Array) -> Array:
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"{self.name}: expected [B, {self.n_in}], got {x.shape}")
        self._cache = x
        return x @ self.weight.T + self.bias

    def backward(self, grad: Array) -> Array:
        x = self._take_cache()
        if grad.shape != (x.shape[0], self.n_out):
            raise ShapeError(f"{self.name}: bad grad shape {grad.shape}")
        self.grad_weight += grad.T @ x
        self.grad_bias += grad.sum(axis=0)
        return grad @ self.weight

    def parameters(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def gradients(self):
        return {f"{self.name}.weight": self.grad_weight,
                f"{self.name}.bias": self.grad_bias}


def _im2col(padded: Array, kernel: int, stride: int) -> tuple[Array, int, int]:
    """[B, C, Hp, Wp] -> ([B, Ho*Wo, C*k*k], Ho, Wo) column view."""
    windows = np.lib.stride_tricks.sliding_window_view(
        padded, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride, :, :]
    b, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kernel * kernel)
    return np.ascontiguousarray(cols), ho, wo


def _col2im_add(cols: Array, out: Array, kernel: int, stride: int,
                ho: int, wo: int) -> None:
    """Scatter-add columns back onto the padded image buffer `out`."""
    b = out.shape[0]
    c = out.shape[1]
    gc = np.ascontiguousarray(
        cols.reshape(b, ho, wo, c, kernel, kernel).transpose(0, 3, 4, 5, 1, 2))
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i:i + stride * (ho - 1) + 1:stride,
                j:j + stride * (wo - 1) + 1:stride] += gc[:, :, i, j]


class Conv2d(Layer):
    """Strided 2-D convolution, weight [C_out, C_in, k, k].

    Output spatial size is floor((H + 2p - k)/stride) + 1 per axis; the
    default (k=3, stride=2, padding=1) drives the 41x20 -> 21x10 -> 11x5
    encoder trace.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, name: str,
                 kernel: int = 3, stride: int = 2, padding: int = 1):
        self.name = name
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan = kernel * kernel
        self.weight = glorot_uniform(rng, (c_out, c_in, kernel, kernel),
                                     c_in * fan, c_out * fan)
        self.bias = np.zeros(c_out)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        if h + 2 * p < k or w + 2 * p < k:
            raise ShapeError(f"{self.name}: input {h}x{w} smaller than kernel {k}")
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x: Array) -> Array:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"{self.name}: expected [B, {self.c_in}, H, W], "
                             f"got {x.shape}")
        b, _, h, w = x.shape
        ho, wo = self.output_hw(h, w)
        p = self.padding
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols, ho2, wo2 = _im2col(padded, self.kernel, self.stride)
        assert (ho, wo) == (ho2, wo2)
        wmat = self.weight.reshape(self.c_out, -1)
        y = cols @ wmat.T + self.bias
        self._cache = (cols, x.shape, ho, wo)
        return y.transpose(0, 2, 1).reshape(b, self.c_out, ho, wo)

    def backward(self, grad: Array) -> Array:
        cols, xshape, ho, wo = self._take_cache()
        b, _, h, w = xshape
        if grad.shape != (b, self.c_out, ho, wo):
            raise ShapeError(f"{self.name}: bad grad shape {grad.shape}")
        gmat = grad.reshape(b, self.c_out, ho * wo).transpose(0, 2, 1)
        self.grad_bias += grad.sum(axis=(0, 2, 3))
        gflat = np.ascontiguousarray(gmat).reshape(b * ho * wo, self.c_out)
        self.grad_weight += (gflat.T @ cols.reshape(b * ho * wo, -1)).reshape(
            self.weight.shape)
        gcols = gmat @ self.weight.reshape(self.c_out, -1)
        p = self.padding
        gpad = np.zeros((b, self.c_in, h + 2 * p, w + 2 * p))
        _col2im_add(gcols, gpad, self.kernel, self.stride, ho, wo)
        return gpad[:, :, p:p + h, p:p + w]

    def parameters(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def gradients(self):
        return {f"{self.name}.weight": self.grad_weight,
                f"{self.name}.bias": self.grad_bias}


class ConvTranspose2d(Layer):
    """Strided transposed convolution, weight [C_in, C_out, k, k].

    Output spatial size is (H-1)*stride - 2p + k + output_padding per
    axis; output_padding is per-axis and must stay below the stride.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, name: str,
                 kernel: int = 3, stride: int = 2, padding: int = 1,
                 output_padding: tuple[int, int] = (0, 0)):
        if any(op < 0 or op >= stride for op in output_padding):
            raise DomainError(f"output_padding must be in [0, stride), "
                              f"got {output_padding}")
        self.name = name
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.output_padding = tuple(output_padding)
        fan = kernel * kernel
        self.weight = glorot_uniform(rng, (c_in, c_out, kernel, kernel),
                                     c_in * fan, c_out * fan)
        self.bias = np.zeros(c_out)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        oph, opw = self.output_padding
        ho = (h - 1) * s - 2 * p + k + oph
        wo = (w - 1) * s - 2 * p + k + opw
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: degenerate output {ho}x{wo}")
        return ho, wo

    def forward(self, x: Array) -> Array:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"{self.name}: expected [B, {self.c_in}, H, W], "
                             f"got {x.shape}")
        b, _, h, w = x.shape
        ho, wo = self.output_hw(h, w)
        p = self.padding
        xmat = x.reshape(b, self.c_in, h * w).transpose(0, 2, 1)
        cols = xmat @ self.weight.reshape(self.c_in, -1)
        buf = np.zeros((b, self.c_out, ho + 2 * p, wo + 2 * p))
        _col2im_add(cols, buf, self.kernel, self.stride, h, w)
        self._cache = (xmat, x.shape, ho, wo)
        return buf[:, :, p:p + ho, p:p + wo] + self.bias[None, :, None, None]

    def backward(self, grad: Array) -> Array:
        xmat, xshape, ho, wo = self._take_cache()
        b, _, h, w = xshape
        if grad.shape != (b, self.c_out, ho, wo):
            raise ShapeError(f"{self.name}: bad grad shape {grad.shape}")
        p = self.padding
        self.grad_bias += grad.sum(axis=(0, 2, 3))
        gpad = np.pad(grad, ((0, 0), (0, 0), (p, p), (p, p)))
        gcols, hh, ww = _im2col(gpad, self.kernel, self.stride)
        assert (hh, ww) == (h, w)
        xflat = np.ascontiguousarray(xmat).reshape(b * h * w, self.c_in)
        self.grad_weight += (xflat.T @ gcols.reshape(b * h * w, -1)).reshape(
            self.weight.shape)
        gx = gcols @ self.weight.reshape(self.c_in, -1).T
        return gx.transpose(0, 2, 1).reshape(b, self.c_in, h, w)

    def parameters(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def gradients(self):
        return {f"{self.name}.weight": self.grad_weight,
                f"{self.name}.bias": self.grad_bias}


class LeakyReLU(Layer):
    def __init__(self, slope: float = 0.01, name: str = "lrelu"):
        self.slope = slope
        self.name = name
        self._cache = None

    def forward(self, x: Array) -> Array:
        self._cache = x > 0
        return np.where(self._cache, x, self.slope * x)

    def backward(self, grad: Array) -> Array:
        mask = self._take_cache()
        if grad.shape != mask.shape:
            raise ShapeError(f"{self.name}: bad grad shape {grad.shape}")
        return np.where(mask, grad, self.slope * grad)


class Flatten(Layer):
    def __init__(self, name: str = "flatten"):
        self.name = name
        self._cache = None

    def forward(self, x: Array) -> Array:
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad: Array) -> Array:
        shape = self._take_cache()
        return grad.reshape(shape)


class Reshape(Layer):
    """[B, prod(shape)] -> [B, *shape]."""

    def __init__(self, shape: tuple[int, ...], name: str = "reshape"):
        self.shape = tuple(shape)
        self.name = name
        self._cache = None

    def forward(self, x: Array) -> Array:
        if x.ndim != 2 or x.shape[1] != int(np.prod(self.shape)):
            raise ShapeError(f"{self.name}: cannot reshape {x.shape} to {self.shape}")
        self._cache = x.shape
        return x.reshape(x.shape[0], *self.shape)

    def backward(self, grad: Array) -> Array:
        shape = self._take_cache()
        return grad.reshape(shape)


class Stack(Layer):
    """A named sequence of layers applied in order."""

    def __init__(self, layers: list[Layer], name: str = "stack"):
        self.layers = layers
        self.name = name

    def forward(self, x: Array) -> Array:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: Array) -> Array:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self):
        out: dict[str, Array] = {}
        for layer in self.layers:
            out.update(layer.parameters())
        return out

    def gradients(self):
        out: dict[str, Array] = {}
        for layer in self.layers:
            out.update(layer.gradients())
        return out

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()


def set_parameters(module: Layer, values: dict[str, Array]) -> None:
    """Copy new values into a module's parameter buffers in place."""
    params = module.parameters()
    for name, arr in params.items():
        new = values[name]
        if new.shape != arr.shape:
            raise ShapeError(f"{name}: shape {new.shape} != {arr.shape}")
        arr[...] = new


# ---------------------------------------------------------------------------
# Adam and the cosine schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    first_moment: dict[str, Array]
    second_moment: dict[str, Array]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Array], **kwargs) -> "AdamState":
        return cls(first_moment={k: np.zeros_like(v) for k, v in params.items()},
                   second_moment={k: np.zeros_like(v) for k, v in params.items()},
                   **kwargs)


def adam_step(params: dict[str, Array], grads: dict[str, Array],
              state: AdamState, lr: float) -> tuple[dict[str, Array], AdamState]:
    """One bias-corrected Adam update; pure in (params, grads, state)."""
    t = state.step_count + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    new_p: dict[str, Array] = {}
    new_m: dict[str, Array] = {}
    new_v: dict[str, Array] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != param {p.shape}")
        m = b1 * state.first_moment[name] + (1 - b1) * g
        v = b2 * state.second_moment[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_p, AdamState(new_m, new_v, t, b1, b2, eps)


@dataclass(frozen=True)
class CosineSchedule:
    lr_max: float
    lr_min: float
    total_epochs: int

    def __post_init__(self):
        if not (0 < self.lr_min <= self.lr_max):
            raise DomainError(f"need 0 < lr_min <= lr_max, got "
                              f"({self.lr_min}, {self.lr_max})")
        if self.total_epochs < 1:
            raise DomainError(f"total_epochs must be >= 1, got {self.total_epochs}")


def cosine_lr(schedule: CosineSchedule, epoch: int | float) -> float:
    """lr_min + (lr_max - lr_min) * (1 + cos(pi * epoch / total)) / 2."""
    if not 0 <= epoch <= schedule.total_epochs:
        raise DomainError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    span = schedule.lr_max - schedule.lr_min
    return schedule.lr_min + 0.5 * span * (
        1.0 + math.cos(math.pi * epoch / schedule.total_epochs))


# ---------------------------------------------------------------------------
# Model persistence
# ---------------------------------------------------------------------------

MAGIC = b"VAEP"
FORMAT_VERSION = 1


def save_params(path: str | Path, params: dict[str, Array]) -> None:
    """Binary dump: magic, u32 version, u32 entry count, then per entry
    u32 name length + name bytes, u32 rank + u32 dims, float64 LE values."""
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: str | Path) -> dict[str, Array]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ParseError(f"{path}: bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported format version {version}")
    offset = 12
    out: dict[str, Array] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", data, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        n_vals = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=n_vals, offset=offset)
        offset += 8 * n_vals
        out[name] = arr.reshape(shape).astype(np.float64)
    if offset != len(data):
        raise ParseError(f"{path}: trailing bytes after last entry")
    return out


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def finite_difference_gradients(loss_fn: Callable[[], float],
                                params: dict[str, Array],
                                h: float = 1e-5) -> dict[str, Array]:
    """Central finite differences of loss_fn w.r.t. each parameter array.

    loss_fn must recompute the loss from the live arrays; entries are
    perturbed in place and restored.
    """
    out: dict[str, Array] = {}
    for name, arr in params.items():
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out[name] = grad
    return out


def max_relative_error(analytic: dict[str, Array],
                       numeric: dict[str, Array]) -> float:
    """Max over parameters of ||a - n||_inf / max(||a||_inf, ||n||_inf)."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        scale = max(float(np.abs(a).max(initial=0.0)),
                    float(np.abs(n).max(initial=0.0)), 1e-12)
        worst = max(worst, float(np.abs(a - n).max(initial=0.0)) / scale)
    return worst
