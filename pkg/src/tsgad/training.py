"""Losses, two-task gradient balancing, Adam, and the training loop.

The two heads produce one loss each; every step either balances them with the
closed-form two-task weighting (computed from gradients at the tagged trunk
output), combines them with fixed weights, or alternates between them by
epoch. The balanced parameter gradient is assembled by linearity from the two
per-task backward passes, so the balanced update shares its code path with
the fixed-weight mode.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numgrad as ng
from . import vae_head as vh
from .model import Detector, ForwardPass
from .numgrad import NumericError, ShapeError, Tensor

GradMap = dict[str, dict[str, np.ndarray]]


@dataclass(frozen=True)
class LossPair:
    l_pred: float
    l_recon: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.l_pred) and np.isfinite(self.l_recon)):
            raise NumericError(f"non-finite losses {self.l_pred}, {self.l_recon}")


def loss_pred(pred: Tensor, target: Tensor) -> Tensor:
    """Squared L2 forecast error per window, averaged over the batch."""
    if pred.shape != target.shape:
        raise ShapeError(f"forecast {pred.shape} vs target {target.shape}")
    batch = pred.shape[0] if pred.ndim > 1 else 1
    return ng.scale(ng.sq_l2_norm(ng.sub(pred, target)), 1.0 / batch)


def loss_recon(recon: Tensor, window_dxn: Tensor, sample: vh.LatentSample) -> Tensor:
    """KL term plus window L1 reconstruction error, averaged over the batch."""
    if recon.shape != window_dxn.shape:
        raise ShapeError(f"reconstruction {recon.shape} vs window {window_dxn.shape}")
    batch = recon.shape[0] if recon.ndim > 2 else 1
    l1 = ng.scale(ng.l1_norm(ng.sub(recon, window_dxn)), 1.0 / batch)
    return ng.add(vh.kl_term(sample.mu, sample.logvar), l1)


def mgda_alpha(g_pred: np.ndarray, g_recon: np.ndarray) -> float:
    """Forecast-loss weight minimizing ||a*g_pred + (1-a)*g_recon||^2 on [0,1].

    Returns 0.5 when the two gradients (near-)coincide: the objective is flat
    there, and the symmetric choice keeps runs deterministic.
    """
    g1 = np.asarray(g_pred, dtype=np.float64).ravel()
    g2 = np.asarray(g_recon, dtype=np.float64).ravel()
    if g1.shape != g2.shape:
        raise ShapeError(f"gradient lengths differ: {g1.shape} vs {g2.shape}")
    if not (np.all(np.isfinite(g1)) and np.all(np.isfinite(g2))):
        raise NumericError("non-finite task gradients")
    diff = g1 - g2
    denom = float(diff @ diff)
    if denom < 1e-12:
        return 0.5
    a = float((g2 - g1) @ g2) / denom
    return min(max(a, 0.0), 1.0)


def pareto_dominates(a: LossPair, b: LossPair) -> bool:
    """True iff `a` is at least as good on both losses and better on one."""
    return (
        a.l_pred <= b.l_pred
        and a.l_recon <= b.l_recon
        and (a.l_pred, a.l_recon) != (b.l_pred, b.l_recon)
    )


@dataclass(frozen=True)
class CombinationMode:
    """How the two task losses combine into one update.

    kind "mgda_ub": per-step closed-form weighting from trunk-output
    gradients. kind "fixed": constant convex weights. kind "alternating":
    epochs take turns backpropagating a single head (trunk included),
    switching every `period` epochs.
    """

    kind: str
    c_pred: float = 0.5
    c_recon: float = 0.5
    period: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("mgda_ub", "fixed", "alternating"):
            raise ValueError(f"unknown combination mode '{self.kind}'")
        if self.kind == "fixed":
            if self.c_pred < 0 or self.c_recon < 0:
                raise ValueError("fixed weights must be nonnegative")
            if abs(self.c_pred + self.c_recon - 1.0) > 1e-12:
                raise ValueError("fixed weights must sum to 1")
        if self.kind == "alternating" and self.period < 1:
            raise ValueError("alternating period must be >= 1")


class Adam:
    """Standard bias-corrected Adam with one step counter per parameter.

    Parameters absent from an update's gradient map (frozen partitions in
    alternating mode) keep their moments and counter untouched.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[tuple[str, str], np.ndarray] = {}
        self._v: dict[tuple[str, str], np.ndarray] = {}
        self._t: dict[tuple[str, str], int] = {}

    def update(self, store: ng.ParamStore, grads: GradMap) -> None:
        for group, tensors in grads.items():
            for name, g in tensors.items():
                arr = store.groups[group][name]
                if g.shape != arr.shape:
                    raise ShapeError(
                        f"gradient shape {g.shape} != param shape {arr.shape} "
                        f"for {group}/{name}"
                    )
                key = (group, name)
                if key not in self._m:
                    self._m[key] = np.zeros_like(arr)
                    self._v[key] = np.zeros_like(arr)
                    self._t[key] = 0
                self._t[key] += 1
                t = self._t[key]
                m = self._m[key]
                v = self._v[key]
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                m_hat = m / (1 - self.beta1**t)
                v_hat = v / (1 - self.beta2**t)
                arr -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _combine_maps(a: GradMap, wa: float, b: GradMap, wb: float) -> GradMap:
    return {
        group: {name: wa * a[group][name] + wb * b[group][name] for name in a[group]}
        for group in a
    }


def _scale_map(a: GradMap, w: float) -> GradMap:
    return {g: {n: w * arr for n, arr in ts.items()} for g, ts in a.items()}


def _restrict(a: GradMap, groups: tuple[str, ...]) -> GradMap:
    return {g: ts for g, ts in a.items() if g in groups}


@dataclass
class StepStats:
    losses: LossPair
    alpha: float


def forward_losses(
    det: Detector, windows: np.ndarray, targets: np.ndarray | None, eps: np.ndarray | None
) -> tuple[ForwardPass, Tensor | None, Tensor | None]:
    """One forward pass plus whichever loss nodes the config enables."""
    out = det.forward(windows, eps=eps)
    lp = lr_ = None
    if out.pred is not None:
        lp = loss_pred(out.pred, out.tape.leaf(targets))
    if out.recon is not None:
        lr_ = loss_recon(out.recon, ng.transpose(out.window), out.sample)
    return out, lp, lr_


def combined_step(
    det: Detector,
    windows: np.ndarray,
    targets: np.ndarray,
    mode: CombinationMode,
    adam: Adam,
    epoch: int = 0,
    eps: np.ndarray | None = None,
) -> StepStats:
    """One optimization step over a batch under the given combination mode."""
    out, lp, lr_ = forward_losses(det, windows, targets, eps)
    tape = out.tape

    # single-head ablations reduce every mode to plain single-task descent
    if lp is None or lr_ is None:
        only = lp if lr_ is None else lr_
        grads = ng.param_grads(tape.backward(only), out.bound)
        adam.update(det.store, grads)
        alpha = 1.0 if lr_ is None else 0.0
        return StepStats(
            LossPair(lp.item() if lp else 0.0, lr_.item() if lr_ else 0.0), alpha
        )

    losses = LossPair(lp.item(), lr_.item())

    if mode.kind == "alternating":
        use_pred = (epoch // mode.period) % 2 == 0
        head = "pred" if use_pred else "recon"
        grads = ng.param_grads(tape.backward(lp if use_pred else lr_), out.bound)
        adam.update(det.store, _restrict(grads, ("shared", head)))
        return StepStats(losses, 1.0 if use_pred else 0.0)

    grads_p = tape.backward(lp)
    gp_map = ng.param_grads(grads_p, out.bound)
    grads_r = tape.backward(lr_)
    gr_map = ng.param_grads(grads_r, out.bound)

    if mode.kind == "fixed":
        alpha = mode.c_pred
    else:  # mgda_ub
        gz_p = grads_p.at_tag("Z").mean(axis=0).ravel()
        gz_r = grads_r.at_tag("Z").mean(axis=0).ravel()
        alpha = mgda_alpha(gz_p, gz_r)

    adam.update(det.store, _combine_maps(gp_map, alpha, gr_map, 1.0 - alpha))
    return StepStats(losses, alpha)


@dataclass
class EpochStats:
    epoch: int
    l_pred: float
    l_recon: float
    alpha: float
    wall_s: float

    def line(self) -> str:
        return (
            f"epoch={self.epoch} l_pred={self.l_pred:.6f} "
            f"l_recon={self.l_recon:.6f} alpha={self.alpha:.4f} "
            f"wall_s={self.wall_s:.2f}"
        )


def train(
    det: Detector,
    windows: np.ndarray,
    targets: np.ndarray,
    *,
    epochs: int,
    batch_size: int = 32,
    lr: float = 1e-3,
    mode: CombinationMode = CombinationMode("mgda_ub"),
    seed: int = 0,
    log: Callable[[str], None] | None = None,
) -> list[EpochStats]:
    """Mini-batch training over (M, N, d) windows and (M, N) one-step targets.

    Shuffling and latent sampling draw from independent streams spawned off
    `seed`, so trajectories are reproducible for a fixed (seed, data, config).
    """
    m_total = windows.shape[0]
    if m_total == 0:
        raise ValueError("no training windows")
    shuffle_ss, eps_ss = np.random.SeedSequence(seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    eps_rng = np.random.default_rng(eps_ss)
    adam = Adam(lr=lr)
    sample_latent = not det.config.no_recon
    history: list[EpochStats] = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(m_total)
        sums = np.zeros(3)
        steps = 0
        for start in range(0, m_total, batch_size):
            idx = order[start : start + batch_size]
            eps = (
                eps_rng.normal(size=(len(idx), det.config.latent))
                if sample_latent
                else None
            )
            try:
                stats = combined_step(
                    det, windows[idx], targets[idx], mode, adam, epoch=epoch, eps=eps
                )
            except NumericError as exc:
                raise NumericError(
                    f"training diverged at epoch {epoch}, step {steps}: {exc}"
                ) from exc
            sums += (stats.losses.l_pred, stats.losses.l_recon, stats.alpha)
            steps += 1
        ep = EpochStats(
            epoch,
            sums[0] / steps,
            sums[1] / steps,
            sums[2] / steps,
            time.perf_counter() - t0,
        )
        history.append(ep)
        if log is not None:
            log(ep.line())
    return history
