"""Tensor container, error types and execution-mode control.

All image tensors are laid out ``(batch, channels, height, width)``.
"""
from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

THREADS_ENV = "ROCKSR_NUM_THREADS"


class DimensionError(ValueError):
    """Raised when an array does not have the expected size along an axis."""

    def __init__(self, message, axis=None, expected=None, got=None):
        super().__init__(message)
        self.axis = axis
        self.expected = expected
        self.got = got


class DegenerateFilterError(ValueError):
    """A weight-normalised filter has a zero direction vector."""


class UninitializedStatisticsError(RuntimeError):
    """Batch-norm inference was requested before any training statistics exist."""


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or inf; the optimiser step was aborted."""

    def __init__(self, name):
        super().__init__(f"non-finite gradient in parameter {name!r}; step aborted")
        self.name = name


@dataclass
class Tensor:
    """A dense array with optional gradient storage.

    Used for learnable parameters; activations flow through the layer
    functions as bare ndarrays.
    """

    data: np.ndarray
    grad: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise DimensionError(
                f"grad shape {self.grad.shape} != data shape {self.data.shape}",
                expected=self.data.shape,
                got=self.grad.shape,
            )

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g):
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} != parameter shape {self.data.shape}",
                expected=self.data.shape,
                got=g.shape,
            )
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g


_AXES = ("batch", "channels", "height", "width")


def check_4d(x, name="input"):
    x = np.asarray(x)
    if x.ndim != 4:
        raise DimensionError(f"{name} must be 4-D (batch, channels, height, width), got {x.ndim}-D",
                             expected=4, got=x.ndim)
    return x


def check_axis(x, axis, expected, name="input"):
    got = x.shape[axis]
    if got != expected:
        raise DimensionError(
            f"{name}: {_AXES[axis]} axis has size {got}, expected {expected}",
            axis=_AXES[axis],
            expected=expected,
            got=got,
        )


def configured_threads():
    """Thread count from ``ROCKSR_NUM_THREADS`` (default: all cores)."""
    value = os.environ.get(THREADS_ENV)
    if value is None or value == "":
        return os.cpu_count() or 1
    return max(1, int(value))


@contextlib.contextmanager
def sequential():
    """Run the enclosed block with single-threaded BLAS.

    Bit-for-bit reproducibility is only promised inside this context.
    """
    with threadpool_limits(limits=1):
        yield


@contextlib.contextmanager
def threads(n=None):
    n = configured_threads() if n is None else n
    with threadpool_limits(limits=n):
        yield
