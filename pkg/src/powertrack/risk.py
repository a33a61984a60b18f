"""Windowed, regularized empirical dual risk.

    R(mu) = (1/M) sum_j Lhat_j(mu) + (alpha V/2) ||mu||^2 - beta V sum_i log_eps(mu_i)

where ``Lhat_j`` is the sample mean of the dual loss over batch ``j`` of the
window.  Batches are averaged individually and then across the window, so
batches of different size carry equal weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import dual_core
from .model import SystemModel


@dataclass(frozen=True)
class RegParams:
    alpha: float = 1.0
    beta: float = 1.0
    eps: float = 1e-3
    v_hat: float = 0.03

    def __post_init__(self):
        for name in ("alpha", "beta", "v_hat"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")

    @property
    def strong_convexity(self) -> float:
        return self.alpha * self.v_hat

    @property
    def smoothness_const(self) -> float:
        """alpha + beta / eps^2, the regularizers' curvature bound per unit V."""
        return self.alpha + self.beta / self.eps ** 2

    @property
    def exit_threshold(self) -> float:
        """Gradient norm below which strong convexity certifies V-accuracy."""
        return np.sqrt(2.0 * self.alpha) * self.v_hat


def log_eps(x, eps):
    """log(x) for x >= eps, its second-order Taylor expansion at eps below."""
    x = np.asarray(x, dtype=float)
    d = x - eps
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(x >= eps, np.log(np.maximum(x, eps)),
                       np.log(eps) + d / eps - d * d / (2 * eps * eps))
    return float(out) if out.ndim == 0 else out


def log_eps_d1(x, eps):
    x = np.asarray(x, dtype=float)
    out = np.where(x >= eps, 1.0 / np.maximum(x, eps), 1.0 / eps - (x - eps) / eps ** 2)
    return float(out) if out.ndim == 0 else out


def log_eps_d2(x, eps):
    x = np.asarray(x, dtype=float)
    out = np.where(x >= eps, -1.0 / np.maximum(x, eps) ** 2, -1.0 / eps ** 2)
    return float(out) if out.ndim == 0 else out


class SampleWindow:
    """The most recent ``max_window`` batches of channel vectors, oldest first.

    Batches are stored read-only; pushing onto a full window drops the oldest
    batch and leaves the others untouched.
    """

    def __init__(self, max_window: int, batches=()):
        if max_window < 1:
            raise ValueError("max_window must be >= 1")
        self.max_window = int(max_window)
        self._batches: list[tuple[int, np.ndarray]] = []
        for epoch, batch in batches:
            self.push(epoch, batch)

    def push(self, epoch: int, batch) -> None:
        batch = np.asarray(batch, dtype=float)
        if batch.ndim != 2 or batch.shape[0] < 1:
            raise ValueError("batch must have shape (n, m) with n >= 1")
        if self._batches:
            if epoch <= self._batches[-1][0]:
                raise ValueError("epoch tags must be strictly increasing")
            if batch.shape[1] != self.m:
                raise ValueError("all channel vectors must have the same length")
        if batch.flags.writeable:
            batch = batch.copy()
            batch.setflags(write=False)
        self._batches.append((int(epoch), batch))
        if len(self._batches) > self.max_window:
            del self._batches[0]

    def replace_last(self, epoch: int, batch) -> None:
        """Swap the newest batch (same epoch tag) for a fresh one."""
        if not self._batches or self._batches[-1][0] != epoch:
            raise ValueError(f"newest batch is not from epoch {epoch}")
        last = self._batches.pop()
        try:
            self.push(epoch, batch)
        except ValueError:
            self._batches.append(last)
            raise

    def view(self, size: int) -> "SampleWindow":
        """Window over the newest ``size`` batches (shares batch arrays)."""
        size = max(1, min(int(size), len(self._batches)))
        out = SampleWindow(size)
        out._batches = list(self._batches[-size:])
        return out

    @property
    def batches(self) -> tuple[tuple[int, np.ndarray], ...]:
        return tuple(self._batches)

    @property
    def epochs(self) -> list[int]:
        return [e for e, _ in self._batches]

    @property
    def m(self) -> int:
        return self._batches[0][1].shape[1]

    @property
    def total_samples(self) -> int:
        return sum(b.shape[0] for _, b in self._batches)

    def __len__(self):
        return len(self._batches)

    def __repr__(self):
        sizes = [b.shape[0] for _, b in self._batches]
        return f"SampleWindow(max_window={self.max_window}, epochs={self.epochs}, sizes={sizes})"


class RiskEval(NamedTuple):
    value: float
    grad: np.ndarray | None
    hess: np.ndarray | None


def _check(window: SampleWindow):
    if len(window) == 0:
        raise ValueError("sample window is empty")


def windowed_terms(mu, window: SampleWindow, model: SystemModel, order: int = 2) -> RiskEval:
    """Unregularized windowed loss with derivatives up to ``order``."""
    _check(window)
    mu = np.asarray(mu, dtype=float)
    vals, grads, hesses = [], [], []
    for _, batch in window.batches:
        rec = dual_core.recover(mu, batch, model)
        vals.append(np.mean(dual_core.dual_loss(mu, batch, model, rec)))
        if order >= 1:
            grads.append(np.mean(dual_core.dual_loss_grad(mu, batch, model, rec), axis=0))
        if order >= 2:
            hesses.append(np.mean(dual_core.dual_loss_hess(mu, batch, model, rec), axis=0))
    value = float(np.mean(vals))
    grad = np.mean(grads, axis=0) if order >= 1 else None
    hess = np.mean(hesses, axis=0) if order >= 2 else None
    return RiskEval(value, grad, hess)


def regularizer_terms(mu, reg: RegParams, order: int = 2) -> RiskEval:
    mu = np.asarray(mu, dtype=float)
    s = reg.v_hat
    value = 0.5 * reg.alpha * s * float(mu @ mu) - reg.beta * s * float(np.sum(log_eps(mu, reg.eps)))
    grad = reg.alpha * s * mu - reg.beta * s * log_eps_d1(mu, reg.eps) if order >= 1 else None
    hess = (np.diag(reg.alpha * s - reg.beta * s * log_eps_d2(mu, reg.eps))
            if order >= 2 else None)
    return RiskEval(value, grad, hess)


def evaluate(mu, window: SampleWindow, reg: RegParams, model: SystemModel,
             order: int = 2) -> RiskEval:
    """Value, gradient and Hessian of the regularized windowed risk in one pass."""
    loss = windowed_terms(mu, window, model, order)
    regs = regularizer_terms(mu, reg, order)
    value = loss.value + regs.value
    grad = loss.grad + regs.grad if order >= 1 else None
    hess = loss.hess + regs.hess if order >= 2 else None
    if hess is not None:
        hess = 0.5 * (hess + hess.T)
    return RiskEval(value, grad, hess)


def windowed_loss(mu, window: SampleWindow, model: SystemModel) -> float:
    return windowed_terms(mu, window, model, order=0).value


def reg_risk(mu, window: SampleWindow, reg: RegParams, model: SystemModel) -> float:
    return evaluate(mu, window, reg, model, order=0).value


def reg_risk_grad(mu, window: SampleWindow, reg: RegParams, model: SystemModel) -> np.ndarray:
    return evaluate(mu, window, reg, model, order=1).grad


def reg_risk_hess(mu, window: SampleWindow, reg: RegParams, model: SystemModel) -> np.ndarray:
    return evaluate(mu, window, reg, model, order=2).hess
