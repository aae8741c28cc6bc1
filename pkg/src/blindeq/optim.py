"""Adam, step-wise learning-rate schedule, gradient checking and the training loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .elbo import LinearChannelModel, SymbolPrior, VolterraChannelModel, vae_loss_and_grad
from .equalizers import (
    FfeEqualizer,
    SoftDemapper,
    VolterraEqualizer,
    equalize,
    equalize_backward,
    hard_decision_euclidean,
    hard_decision_map,
    soft_demap,
    soft_demap_backward,
    supervised_loss,
    supervised_loss_grad,
)
from .qstats import PAM4, Constellation

log = logging.getLogger(__name__)

__all__ = [
    "AdamState",
    "adam_step",
    "StepSchedule",
    "schedule_lr",
    "grad_check",
    "TrainConfig",
    "Trainer",
    "TrainingDiverged",
    "train",
    "write_trace_csv",
    "METHODS",
]

METHODS = ("ffe", "volterra", "vae", "v2vae")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """One bias-corrected Adam update; returns new parameter arrays (inputs are not modified)."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {k!r}")
        if np.shape(g) != np.shape(params[k]):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {k!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = dict(params)
    for k, g in grads.items():
        m = state.m.get(k, np.zeros_like(g))
        v = state.v.get(k, np.zeros_like(g))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        out[k] = params[k] - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


@dataclass(frozen=True)
class StepSchedule:
    """Piecewise-constant decay over `n_segments` equal segments to `final_ratio` * base_lr."""

    base_lr: float
    n_iter: int
    n_segments: int = 10
    final_ratio: float = 0.1
    enabled: bool = True

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")


def schedule_lr(iteration: int, schedule: StepSchedule) -> float:
    """Geometric decay: segment k uses base_lr * final_ratio**(k / (n_segments - 1))."""
    if not schedule.enabled or schedule.n_segments == 1:
        return schedule.base_lr
    k = min(schedule.n_segments - 1, (iteration * schedule.n_segments) // schedule.n_iter)
    return schedule.base_lr * schedule.final_ratio ** (k / (schedule.n_segments - 1))


def grad_check(loss: Callable[[np.ndarray], float], grad: np.ndarray, x: np.ndarray,
               coords=None, rel_step: float = 1e-6) -> float:
    """Worst relative error between `grad` and central differences of `loss` at `x`.

    The step for coordinate i is ``rel_step * max(1, |x_i|)``.  Relative error
    is ``|a - n| / max(|a|, |n|, 1e-4 * max_j |n_j|)`` so near-zero
    coordinates are judged against the scale of the whole gradient.
    """
    x = np.asarray(x, dtype=float)
    grad = np.asarray(grad, dtype=float).ravel()
    idx = np.arange(x.size) if coords is None else np.asarray(coords)
    num = np.empty(idx.size)
    for j, i in enumerate(idx):
        step = rel_step * max(1.0, abs(x.flat[i]))
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        num[j] = (loss(xp) - loss(xm)) / (2.0 * step)
    ana = grad[idx]
    floor = 1e-4 * max(np.max(np.abs(num)), np.max(np.abs(ana)), 1e-300)
    err = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
    return float(np.max(err))


@dataclass
class TrainConfig:
    method: str = "vae"
    lr: float = 5e-3
    batch_size: int = 1000
    n_epochs: int = 1
    schedule: bool = True
    n_taps1: int = 25
    n_taps2: int = 15
    n_channel: int = 25
    sps: int = 2
    sigma2_init: float = 1.0
    beta_floor: float = 1e-3
    constellation: Constellation = PAM4

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.batch_size < 1 or self.n_epochs < 1:
            raise ValueError("batch_size and n_epochs must be positive")


class Trainer:
    """Stateful trainer for one equalizer.

    Each batch: equalize -> soft-demap (blind methods) -> loss and sigma^2
    plug-in -> gradients -> Adam step.  The demapper uses the plug-in value
    from the previous batch and treats it as a constant.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        A = cfg.constellation
        if cfg.method == "ffe":
            self.eq = FfeEqualizer.identity(cfg.n_taps1, cfg.sps)
        else:
            self.eq = VolterraEqualizer.identity(cfg.n_taps1, cfg.n_taps2, cfg.sps)
        self.blind = cfg.method in ("vae", "v2vae")
        self.demapper = SoftDemapper.flat(A.size) if self.blind else None
        if cfg.method == "vae":
            self.channel = LinearChannelModel.identity(cfg.n_channel)
        elif cfg.method == "v2vae":
            self.channel = VolterraChannelModel.identity(cfg.n_channel)
        else:
            self.channel = None
        self.prior = SymbolPrior.flat(A.size)
        self.sigma2 = cfg.sigma2_init
        self.adam = AdamState()
        self.iteration = 0
        self.trace: list[tuple[int, float, float, float]] = []

    # parameter plumbing -------------------------------------------------
    def params(self) -> dict:
        p = dict(self.eq.params())
        if self.blind:
            p["beta"] = self.demapper.beta
            p["h"] = self.channel.h
            if isinstance(self.channel, VolterraChannelModel):
                p["h2"] = self.channel.h2
        return p

    def set_params(self, p: dict) -> None:
        self.eq.w1 = p["w1"]
        if "w2" in p:
            self.eq.w2 = p["w2"]
        if self.blind:
            self.demapper.beta = np.maximum(p["beta"], self.cfg.beta_floor)
            self.channel.h = p["h"]
            if "h2" in p:
                self.channel.h2 = p["h2"]

    # single batch -------------------------------------------------------
    def loss_and_grads(self, rx, start: int, n_sym: int, symbols=None):
        """Loss and parameter gradients for symbols [start, start + n_sym) of `rx`."""
        cfg = self.cfg
        xhat = equalize(rx, self.eq, start=start, count=n_sym)
        if not self.blind:
            target = symbols[start : start + n_sym]
            loss = supervised_loss(xhat, target)
            gx = supervised_loss_grad(xhat, target)
            return loss, equalize_backward(rx, self.eq, gx, start), float("nan")
        A = cfg.constellation
        probs = soft_demap(xhat, A, self.sigma2, self.demapper)
        y = np.asarray(rx[cfg.sps * start : cfg.sps * (start + n_sym)], dtype=float)
        res = vae_loss_and_grad(probs, y, self.channel, self.prior, A, cfg.sps)
        gx, gb = soft_demap_backward(xhat, A, self.sigma2, self.demapper, probs, res.grad_probs)
        grads = equalize_backward(rx, self.eq, gx, start)
        grads["beta"] = gb
        grads["h"] = res.grad_h
        if res.grad_h2 is not None:
            grads["h2"] = res.grad_h2
        return res.loss, grads, res.sigma2

    def step(self, rx, start: int, n_sym: int, lr: float, symbols=None) -> float:
        loss, grads, sigma2 = self.loss_and_grads(rx, start, n_sym, symbols)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at iteration {self.iteration}")
        if self.blind:
            self.sigma2 = sigma2
            self.channel.sigma2 = sigma2
        try:
            self.set_params(adam_step(self.params(), grads, self.adam, lr))
        except FloatingPointError as exc:
            raise TrainingDiverged(str(exc)) from exc
        self.trace.append((self.iteration, lr, float(loss), float(sigma2)))
        self.iteration += 1
        return loss

    def fit(self, rx, symbols=None, schedule: StepSchedule | None = None) -> "Trainer":
        """Consecutive non-overlapping batches over `rx`, `cfg.n_epochs` passes."""
        cfg = self.cfg
        if not self.blind and symbols is None:
            raise ValueError(f"method {cfg.method!r} needs pilot symbols")
        n_sym = len(rx) // cfg.sps
        n_batches = n_sym // cfg.batch_size
        if n_batches < 1:
            raise ValueError("signal shorter than one batch")
        if schedule is None:
            schedule = StepSchedule(cfg.lr, n_batches * cfg.n_epochs, enabled=cfg.schedule)
        it0 = self.iteration
        for _ in range(cfg.n_epochs):
            for b in range(n_batches):
                lr = schedule_lr(self.iteration - it0, schedule)
                self.step(rx, b * cfg.batch_size, cfg.batch_size, lr, symbols)
        return self

    # evaluation ---------------------------------------------------------
    def probabilities(self, rx) -> np.ndarray:
        xhat = equalize(rx, self.eq)
        return soft_demap(xhat, self.cfg.constellation, self.sigma2, self.demapper)

    def decide(self, rx) -> np.ndarray:
        """Symbol indices: MAP on Q for blind methods, nearest point otherwise."""
        if self.blind:
            return hard_decision_map(self.probabilities(rx))
        return hard_decision_euclidean(equalize(rx, self.eq), self.cfg.constellation)


def train(rx, cfg: TrainConfig, symbols=None) -> Trainer:
    return Trainer(cfg).fit(rx, symbols)


def write_trace_csv(path, trace) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "lr", "loss", "sigma2"])
        for it, lr, loss, s2 in trace:
            w.writerow([it, repr(lr), repr(loss), repr(s2)])
