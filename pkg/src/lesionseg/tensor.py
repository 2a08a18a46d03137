"""Tensor helpers, explicit random streams and the finite-difference oracle.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 laid out
row-major (C order).  Nothing here keeps global random state: every
function that needs randomness takes a ``numpy.random.Generator``.
"""
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, NumericError, ShapeError

DTYPE = np.float32

DEBUG = os.environ.get("LESIONSEG_DEBUG", "") not in ("", "0")


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: need at least one extent, all >= 1")
    return shape


def tensor_new(shape, fill=0.0):
    return np.full(_check_shape(shape), fill, dtype=DTYPE)


def make_rng(seed):
    """Return a PCG64 generator; the stream is identical on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def child_rng(seed, source_id="", variant=0):
    """Generator derived from (run seed, sample id, variant index).

    Used for per-sample augmentation so the output does not depend on the
    order in which samples are processed.
    """
    tag = zlib.crc32(str(source_id).encode("utf-8"))
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, tag, int(variant) & 0xFFFFFFFF])
    return np.random.Generator(np.random.PCG64(ss))


def randn(shape, mean=0.0, stddev=1.0, rng=None):
    if stddev < 0:
        raise InvalidArgumentError(f"stddev must be >= 0, got {stddev}")
    if rng is None:
        raise InvalidArgumentError("randn needs an explicit rng")
    shape = _check_shape(shape)
    out = rng.standard_normal(shape, dtype=DTYPE)
    out *= DTYPE(stddev)
    out += DTYPE(mean)
    return out


@dataclass
class DualSlot:
    """A parameter value together with its accumulated gradient."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self):
        self.grad[...] = 0


def assert_finite(x, what="tensor"):
    """Debug-mode finiteness check; a no-op unless LESIONSEG_DEBUG is set."""
    if DEBUG and not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")


def finite_difference_grad(f, x, h=1e-3):
    """Central-difference gradient of the scalar function ``f`` at ``x``.

    The step actually taken is measured after rounding to ``x.dtype``, so
    float32 inputs do not pick up a systematic step-size error.
    """
    if not h > 0:
        raise InvalidArgumentError(f"h must be positive, got {h}")
    x = np.array(x, copy=True)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        xp = float(flat[i])
        fp = float(f(x))
        flat[i] = orig - h
        xm = float(flat[i])
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"f is not finite around element {i}")
        grad.reshape(-1)[i] = (fp - fm) / (xp - xm)
    return grad


def relative_error(a, b, floor=1e-12):
    """Norm-wise relative error ``|a-b| / max(|a|, |b|)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
