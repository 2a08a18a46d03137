"""SGD with momentum and weight decay, Newton steps, and early stopping."""
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .checkpoint import Checkpoint
from .errors import ContractError, InvalidArgumentError, NumericError

# default training options
LEARNING_RATE = 0.003
MOMENTUM = 0.9
L2 = 0.0005
PATIENCE = 10
PATIENCE_STRUCTURE = 25


def decays(name):
    """Only convolution kernels are penalised, never biases or batch-norm."""
    return name.endswith(".weight")


@dataclass
class SgdmState:
    velocity: Checkpoint
    learning_rate: float = LEARNING_RATE
    momentum: float = MOMENTUM
    l2_lambda: float = L2
    l1_lambda: float = 0.0
    lr_decay: float = 1.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InvalidArgumentError(f"learning rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise InvalidArgumentError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.l2_lambda < 0 or self.l1_lambda < 0:
            raise InvalidArgumentError("regularisation strengths must be >= 0")

    @classmethod
    def for_params(cls, params, names=None, **kw):
        names = params.names() if names is None else names
        return cls(Checkpoint({n: np.zeros_like(params[n]) for n in names}), **kw)

    def end_epoch(self):
        self.learning_rate *= self.lr_decay


def sgdm_step(params, grads, state):
    """In-place update ``v <- mu v + g'``, ``w <- w - lr v`` and return params.

    ``g' = g + l2 * w + l1 * sign(w)`` for kernels, ``g' = g`` otherwise.
    """
    if set(grads.names()) != set(state.velocity.names()):
        missing = set(grads.names()) ^ set(state.velocity.names())
        raise ContractError(f"gradient and velocity names differ: {sorted(missing)[:5]}")
    lr = params[next(iter(grads))].dtype.type(state.learning_rate) if len(grads) else 0.0
    mu = state.momentum
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        w = params[name]
        v = state.velocity[name]
        if g.shape != w.shape or v.shape != w.shape:
            raise ContractError(f"shape mismatch for {name!r}: param {w.shape}, grad {g.shape}, velocity {v.shape}")
        step = g
        if decays(name):
            if state.l2_lambda:
                step = step + w.dtype.type(state.l2_lambda) * w
            if state.l1_lambda:
                step = step + w.dtype.type(state.l1_lambda) * np.sign(w)
        if mu:
            v *= w.dtype.type(mu)
            v += step
        else:
            v[...] = step
        w -= lr * v
    params.touch()
    return params


def penalty(params, l2_lambda=0.0, l1_lambda=0.0):
    """Regularisation term whose gradient :func:`sgdm_step` adds."""
    total = 0.0
    for name, w in params.items():
        if decays(name):
            w = w.astype(np.float64)
            total += 0.5 * l2_lambda * float((w * w).sum()) + l1_lambda * float(np.abs(w).sum())
    return total


def newton_step(w, grad, hessian, lr=1.0, max_condition=1e12):
    """One damped Newton update ``w - lr * H^-1 g`` via a symmetric solve."""
    w = np.asarray(w, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64).reshape(-1)
    h = np.asarray(hessian, dtype=np.float64)
    n = g.size
    if h.shape != (n, n):
        raise InvalidArgumentError(f"hessian shape {h.shape} does not match {n} parameters")
    cond = np.linalg.cond(h)
    if not np.isfinite(cond) or cond > max_condition:
        raise NumericError(f"hessian is singular or ill-conditioned (condition estimate {cond:.3g})")
    try:
        step = scipy.linalg.solve(h, g, assume_a="sym")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise NumericError(f"hessian solve failed (condition estimate {cond:.3g})") from exc
    return (w.reshape(-1) - lr * step).reshape(w.shape)


@dataclass
class EarlyStopState:
    """Patience counter over a higher-is-better validation metric."""

    patience: int = PATIENCE
    best_metric: float = -math.inf
    checks_since_best: int = 0
    best_checkpoint: Checkpoint = None
    best_check: int = -1
    checks: int = 0
    history: list = field(default_factory=list)


def early_stop_update(state, metric, params=None):
    """Record one validation check; return ``"continue"`` or ``"stop"``.

    A strict improvement resets the counter and snapshots ``params``.  The
    run stops once the counter exceeds ``patience``.
    """
    metric = float(metric)
    if math.isnan(metric):
        raise NumericError("validation metric is NaN")
    state.history.append(metric)
    state.checks += 1
    if metric > state.best_metric:
        state.best_metric = metric
        state.checks_since_best = 0
        state.best_check = state.checks
        if params is not None:
            state.best_checkpoint = params.copy()
        return "continue"
    state.checks_since_best += 1
    return "stop" if state.checks_since_best > state.patience else "continue"
