"""Dense fields and a small define-by-run reverse-mode autodiff.

Fields are ``(channels, height, width)`` numpy arrays wrapped in
:class:`FeatureField`. Every differentiable op checks for an active
:class:`Tape` and, if one is present, records a closure that pushes the
output gradient back to its inputs. Outside a ``with Tape():`` block the
ops are plain numpy and build nothing, which is how evaluation runs.

Parameters live in :class:`ConvSpec` objects whose ``grad_weight`` and
``grad_bias`` accumulate across backward calls until :meth:`ConvSpec.zero_grad`.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

KERNELS = ("1x1", "3x3", "deconv2x2")


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class NonFiniteError(FloatingPointError):
    """Raised when weights or values contain NaN/Inf."""


class TapeError(RuntimeError):
    pass


_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "bsqueeze_active_tape", default=None
)


class FeatureField:
    """A ``channels x height x width`` real field with an optional gradient."""

    __slots__ = ("values", "grad")

    def __init__(self, values, grad=None):
        values = np.asarray(values)
        if values.ndim != 3:
            raise ShapeMismatchError(f"FeatureField needs a rank-3 array, got shape {values.shape}")
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(np.float64)
        self.values = values
        self.grad = grad

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def dtype(self):
        return self.values.dtype

    @classmethod
    def zeros(cls, channels: int, height: int, width: int, dtype=np.float64) -> "FeatureField":
        return cls(np.zeros((channels, height, width), dtype=dtype))

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.values.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"FeatureField(shape={self.shape}, dtype={self.dtype})"


class Scalar:
    """A differentiable scalar, the result of reductions and losses."""

    __slots__ = ("value", "grad")

    def __init__(self, value: float):
        self.value = float(value)
        self.grad: Optional[float] = None

    def _accumulate(self, g: float) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def __float__(self) -> float:
        return self.value

    def __repr__(self) -> str:
        return f"Scalar({self.value!r})"


@dataclass(eq=False)
class ConvSpec:
    """Weights of one convolution-like layer.

    Weight layouts: ``1x1`` is ``(out, in)``, ``3x3`` is ``(out, in, 3, 3)``
    and ``deconv2x2`` is ``(in, out, 2, 2)``. 3x3 convolutions use stride 1
    and zero padding 1; the deconvolution uses stride 2.
    """

    in_channels: int
    out_channels: int
    kernel: str
    weight: np.ndarray
    bias: np.ndarray
    grad_weight: Optional[np.ndarray] = field(default=None, repr=False)
    grad_bias: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}; expected one of {KERNELS}")
        expected = weight_shape(self.kernel, self.in_channels, self.out_channels)
        self.weight = np.asarray(self.weight)
        self.bias = np.asarray(self.bias)
        if self.weight.shape != expected:
            raise ShapeMismatchError(
                f"{self.kernel} weight shape {self.weight.shape} != expected {expected}"
            )
        if self.bias.shape != (self.out_channels,):
            raise ShapeMismatchError(f"bias shape {self.bias.shape} != ({self.out_channels},)")

    @classmethod
    def zeros(cls, in_channels: int, out_channels: int, kernel: str, dtype=np.float64) -> "ConvSpec":
        return cls(
            in_channels,
            out_channels,
            kernel,
            np.zeros(weight_shape(kernel, in_channels, out_channels), dtype=dtype),
            np.zeros(out_channels, dtype=dtype),
        )

    @classmethod
    def kaiming(cls, in_channels: int, out_channels: int, kernel: str, rng: np.random.Generator,
                dtype=np.float64) -> "ConvSpec":
        """Fan-in scaled normal init, zero bias."""
        shape = weight_shape(kernel, in_channels, out_channels)
        fan_in = in_channels * {"1x1": 1, "3x3": 9, "deconv2x2": 1}[kernel]
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        return cls(in_channels, out_channels, kernel, w.astype(dtype), np.zeros(out_channels, dtype=dtype))

    def zero_grad(self) -> None:
        self.grad_weight = None
        self.grad_bias = None

    def _accumulate(self, gw: np.ndarray, gb: np.ndarray) -> None:
        if self.grad_weight is None:
            self.grad_weight = gw.astype(self.weight.dtype, copy=True)
            self.grad_bias = gb.astype(self.bias.dtype, copy=True)
        else:
            self.grad_weight += gw
            self.grad_bias += gb

    def check_finite(self) -> None:
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise NonFiniteError(f"non-finite weights in {self.kernel} conv")


def weight_shape(kernel: str, cin: int, cout: int) -> tuple[int, ...]:
    if kernel == "1x1":
        return (cout, cin)
    if kernel == "3x3":
        return (cout, cin, 3, 3)
    if kernel == "deconv2x2":
        return (cin, cout, 2, 2)
    raise ValueError(f"unknown kernel {kernel!r}")


class Tape:
    """Ordered record of differentiable ops for one forward pass.

    Use as a context manager; ops executed inside the block are recorded.
    """

    def __init__(self):
        self._records: list[tuple[tuple, Callable[[], None]]] = []
        self._consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._records)

    def record(self, outputs: tuple, backward_fn: Callable[[], None]) -> None:
        if self._consumed:
            raise TapeError("cannot record onto a tape after backward; call reset() first")
        self._records.append((outputs, backward_fn))

    def backward(self, loss: Scalar) -> None:
        backward(loss, self)

    def reset(self) -> None:
        """Clear gradients on recorded outputs so backward may run again."""
        for outputs, _ in self._records:
            for out in outputs:
                out.grad = None
        self._consumed = False


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def backward(loss: Scalar, tape: Tape) -> None:
    """Seed ``loss`` with gradient 1 and replay ``tape`` in reverse."""
    if not isinstance(loss, Scalar):
        raise TypeError("backward needs a Scalar loss")
    if tape._consumed:
        raise TapeError("backward already called on this tape; call reset() first")
    if not any(loss in outs for outs, _ in tape._records):
        raise TapeError("loss was not produced on this tape")
    tape._consumed = True
    loss.grad = 1.0
    for outputs, fn in reversed(tape._records):
        if all(o.grad is None for o in outputs):
            continue
        fn()


def _record(outputs: tuple, fn: Callable[[], None]) -> None:
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        tape.record(outputs, fn)


def _check_finite_field(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")


# --- layers -----------------------------------------------------------------

def _pad1(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    out = np.zeros((c, h + 2, w + 2), dtype=x.dtype)
    out[:, 1:-1, 1:-1] = x
    return out


def _im2col3(x: np.ndarray) -> np.ndarray:
    """``(c, h, w)`` -> ``(c * 9, h * w)`` patch matrix for a padded 3x3 window."""
    c, h, w = x.shape
    xp = _pad1(x)
    cols = np.empty((c, 9, h, w), dtype=x.dtype)
    for a in range(3):
        for b in range(3):
            cols[:, 3 * a + b] = xp[:, a:a + h, b:b + w]
    return cols.reshape(c * 9, h * w)


def conv_forward(x: FeatureField, spec: ConvSpec) -> FeatureField:
    """Apply a 1x1, 3x3 (pad 1) or 2x2 stride-2 transposed convolution."""
    if x.channels != spec.in_channels:
        raise ShapeMismatchError(
            f"input has {x.channels} channels, {spec.kernel} conv expects {spec.in_channels}"
        )
    spec.check_finite()
    c, h, w = x.shape
    o = spec.out_channels
    xv = x.values

    if spec.kernel == "1x1":
        flat = xv.reshape(c, h * w)
        out = (spec.weight @ flat + spec.bias[:, None]).reshape(o, h, w)
    elif spec.kernel == "3x3":
        cols = _im2col3(xv)
        wm = spec.weight.reshape(o, c * 9)
        out = (wm @ cols + spec.bias[:, None]).reshape(o, h, w)
    else:
        flat = xv.reshape(c, h * w)
        wm = spec.weight.reshape(c, o * 4).T  # (o*4, c)
        y = (wm @ flat).reshape(o, 2, 2, h, w).transpose(0, 3, 1, 4, 2).reshape(o, 2 * h, 2 * w)
        out = y + spec.bias[:, None, None]

    result = FeatureField(out)

    def _backward():
        g = result.grad
        if spec.kernel == "1x1":
            g2 = g.reshape(o, h * w)
            spec._accumulate(g2 @ flat.T, g2.sum(axis=1))
            x._accumulate((spec.weight.T @ g2).reshape(c, h, w))
        elif spec.kernel == "3x3":
            g2 = g.reshape(o, h * w)
            spec._accumulate((g2 @ cols.T).reshape(spec.weight.shape), g2.sum(axis=1))
            # input gradient = correlation of g with the spatially flipped kernel
            wflip = spec.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * 9)
            x._accumulate((wflip @ _im2col3(g)).reshape(c, h, w))
        else:
            gb = g.sum(axis=(1, 2))
            # (o, 2h, 2w) -> (o*4, h*w) matching the forward layout
            g4 = g.reshape(o, h, 2, w, 2).transpose(0, 2, 4, 1, 3).reshape(o * 4, h * w)
            gw = (g4 @ flat.T).T.reshape(c, o, 2, 2)
            spec._accumulate(gw, gb)
            x._accumulate((wm.T @ g4).reshape(c, h, w))

    _record((result,), _backward)
    return result


def relu_forward(x: FeatureField) -> FeatureField:
    pos = x.values > 0
    result = FeatureField(np.maximum(x.values, 0.0))

    def _backward():
        x._accumulate(result.grad * pos)

    _record((result,), _backward)
    return result


def add(a: FeatureField, b: FeatureField) -> FeatureField:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add: {a.shape} vs {b.shape}")
    result = FeatureField(a.values + b.values)

    def _backward():
        a._accumulate(result.grad)
        b._accumulate(result.grad)

    _record((result,), _backward)
    return result


def add_n(fields: Sequence[FeatureField]) -> FeatureField:
    out = fields[0]
    for f in fields[1:]:
        out = add(out, f)
    return out


def concat_channels(a: FeatureField, b: FeatureField) -> FeatureField:
    if a.shape[1:] != b.shape[1:]:
        raise ShapeMismatchError(f"concat: spatial {a.shape[1:]} vs {b.shape[1:]}")
    ca = a.channels
    result = FeatureField(np.concatenate([a.values, b.values], axis=0))

    def _backward():
        a._accumulate(result.grad[:ca])
        b._accumulate(result.grad[ca:])

    _record((result,), _backward)
    return result


def split_channels(x: FeatureField, index: int) -> tuple[FeatureField, FeatureField]:
    """Inverse of :func:`concat_channels`: channels ``[:index]`` and ``[index:]``."""
    if not 0 <= index <= x.channels:
        raise ShapeMismatchError(f"split index {index} outside [0, {x.channels}]")
    first = FeatureField(x.values[:index].copy())
    second = FeatureField(x.values[index:].copy())

    def _backward():
        g = np.zeros_like(x.values)
        if first.grad is not None:
            g[:index] += first.grad
        if second.grad is not None:
            g[index:] += second.grad
        x._accumulate(g)

    _record((first, second), _backward)
    return first, second


def avg_pool2(x: FeatureField) -> FeatureField:
    """Non-overlapping 2x2 average pooling; H and W must be even."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError(f"avg_pool2 needs even spatial size, got {h}x{w}")
    result = FeatureField(x.values.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4)))

    def _backward():
        g = np.repeat(np.repeat(result.grad, 2, axis=1), 2, axis=2) * 0.25
        x._accumulate(g)

    _record((result,), _backward)
    return result


def field_sum(x: FeatureField) -> Scalar:
    result = Scalar(x.values.sum())

    def _backward():
        x._accumulate(np.full_like(x.values, result.grad))

    _record((result,), _backward)
    return result


def field_dot(x: FeatureField, weights: np.ndarray) -> Scalar:
    """``sum(x * weights)`` with ``weights`` held constant."""
    weights = np.asarray(weights)
    if weights.shape != x.shape:
        raise ShapeMismatchError(f"field_dot: {x.shape} vs {weights.shape}")
    result = Scalar((x.values * weights).sum())

    def _backward():
        x._accumulate(weights * result.grad)

    _record((result,), _backward)
    return result


def scalar_add(*terms: Scalar) -> Scalar:
    result = Scalar(sum(t.value for t in terms))

    def _backward():
        for t in terms:
            t._accumulate(result.grad)

    _record((result,), _backward)
    return result


def scalar_scale(a: Scalar, factor: float) -> Scalar:
    result = Scalar(a.value * factor)

    def _backward():
        a._accumulate(result.grad * factor)

    _record((result,), _backward)
    return result


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function."""
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out
