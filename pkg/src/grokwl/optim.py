"""Full-batch training drivers: AdamW and the Wang-Landau optimizer (WanD).

WanD treats training as Langevin dynamics in parameter space driven by a
running 1-D entropy estimate S(ln L_train).  Each step it

1. evaluates ln L_train and its gradient on the training set only,
2. forms the force ``-(dS/dlnL + dS_bias/dlnL) * grad lnL``,
3. applies the friction/noise velocity update and moves the parameters,
4. deposits a Wang-Landau increment at the visited ln-loss bin.

Test data never enters steps 1-4; it is evaluated afterwards for the record.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from . import transformer as tf
from .modular_tasks import SplitDataset

log = logging.getLogger(__name__)

__all__ = [
    "DivergenceError",
    "TrainRecord",
    "AdamWConfig",
    "AdamState",
    "adamw_step",
    "train_adamw",
    "WandConfig",
    "Entropy1D",
    "WandState",
    "wl_factor",
    "init_wand",
    "wand_1d_entropy_update",
    "wand_step",
    "train_wand",
    "grokking_gap",
    "first_step",
    "write_records_csv",
    "read_records_csv",
    "RECORD_HEADER",
]


class DivergenceError(RuntimeError):
    """Raised when a run goes non-finite.  ``records`` holds what was logged."""

    def __init__(self, msg: str, records: Optional[list] = None):
        super().__init__(msg)
        self.records = records if records is not None else []


# -- records ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainRecord:
    step: int
    train_loss: float
    test_loss: float
    train_acc: float
    test_acc: float
    weight_norm: float


RECORD_HEADER = [f.name for f in fields(TrainRecord)]


def write_records_csv(path, records: Iterable[TrainRecord]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_HEADER)
        for r in records:
            w.writerow([r.step, repr(r.train_loss), repr(r.test_loss),
                        repr(r.train_acc), repr(r.test_acc), repr(r.weight_norm)])
    return path


def read_records_csv(path) -> list[TrainRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != RECORD_HEADER:
        raise ValueError(f"unexpected header {rows[0]}")
    return [TrainRecord(int(r[0]), *(float(v) for v in r[1:])) for r in rows[1:]]


def first_step(records: list[TrainRecord], attr: str, threshold: float) -> Optional[int]:
    for r in records:
        if getattr(r, attr) >= threshold:
            return r.step
    return None


def grokking_gap(records: list[TrainRecord], train_thr: float = 0.99,
                 test_thr: float = 0.95) -> Optional[int]:
    """Steps between train acc first reaching ``train_thr`` and test acc
    first reaching ``test_thr``; ``None`` if either never happens.

    Negative when the test threshold is crossed first.
    """
    a = first_step(records, "train_acc", train_thr)
    b = first_step(records, "test_acc", test_thr)
    if a is None or b is None:
        return None
    return b - a


def _evaluate(params: tf.ParamVector, train: tf.Batch, test: tf.Batch, step: int,
              train_loss: float, train_logits: np.ndarray) -> TrainRecord:
    test_logits = tf.forward_logits(params, test)
    return TrainRecord(
        step=step,
        train_loss=train_loss,
        test_loss=tf.cross_entropy(test_logits, test.targets),
        train_acc=tf.accuracy(train_logits, train.targets),
        test_acc=tf.accuracy(test_logits, test.targets),
        weight_norm=tf.weight_norm(params),
    )


StepHook = Callable[[int, object], None]


# -- AdamW --------------------------------------------------------------------

@dataclass(frozen=True)
class AdamWConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-8
    steps: int = 10_000
    fixed_norm: Optional[float] = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.fixed_norm is not None and self.fixed_norm <= 0:
            raise ValueError("fixed_norm must be positive")


@dataclass
class AdamState:
    params: tf.ParamVector
    m: np.ndarray
    v: np.ndarray
    step: int = 0          # updates applied so far

    @classmethod
    def fresh(cls, params: tf.ParamVector) -> "AdamState":
        return cls(params, np.zeros_like(params.flat), np.zeros_like(params.flat), 0)


def adamw_step(params: np.ndarray, grads: np.ndarray, m: np.ndarray, v: np.ndarray,
               cfg: AdamWConfig, step: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One decoupled-weight-decay Adam update (the ``step``-th, 1-based).

    Returns new ``(params, m, v)``; inputs are not modified.
    """
    if step < 1:
        raise ValueError("step counts from 1")
    if params.shape != grads.shape or m.shape != params.shape or v.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(grads)):
        raise DivergenceError(f"non-finite gradient at step {step}")
    b1, b2 = cfg.beta1, cfg.beta2
    m = b1 * m + (1.0 - b1) * grads
    v = b2 * v + (1.0 - b2) * grads * grads
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    new = params * (1.0 - cfg.learning_rate * cfg.weight_decay)
    new = new - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
    if cfg.fixed_norm is not None:
        new = tf.rescale_to_norm(new, cfg.fixed_norm)
    return new, m, v


def train_adamw(split: SplitDataset, model: tf.ModelConfig, cfg: AdamWConfig,
                init_seed: int = 0, *, state: Optional[AdamState] = None,
                on_step: Optional[StepHook] = None,
                stop: Optional[Callable[[list], bool]] = None) -> list[TrainRecord]:
    """Full-batch AdamW.

    One record per step ``t = start .. cfg.steps`` where record ``t``
    describes the parameters after ``t`` updates.  Pass ``state`` to resume;
    ``on_step(t, state)`` fires after each update (checkpointing hook);
    ``stop(records)`` may end the run early.
    """
    train, test = tf.Batch.from_split(split, "train"), tf.Batch.from_split(split, "test")
    if state is None:
        params = tf.init_params(model, init_seed)
        if cfg.fixed_norm is not None:
            params = tf.rescale_to_norm(params, cfg.fixed_norm)
        state = AdamState.fresh(params)
    records: list[TrainRecord] = []
    t = state.step
    while True:
        loss, grad, logits = tf.loss_and_grad(state.params, train)
        if not math.isfinite(loss) or not np.all(np.isfinite(state.params.flat)):
            raise DivergenceError(f"non-finite loss at step {t}", records)
        records.append(_evaluate(state.params, train, test, t, loss, logits))
        if t >= cfg.steps or (stop is not None and stop(records)):
            break
        try:
            flat, m, v = adamw_step(state.params.flat, grad, state.m, state.v, cfg, t + 1)
        except DivergenceError as exc:
            raise DivergenceError(str(exc), records) from None
        t += 1
        state = AdamState(state.params.with_flat(flat), m, v, t)
        if on_step is not None:
            on_step(t, state)
    return records


# -- WanD ---------------------------------------------------------------------

def wl_factor(t: float, F_WL: float, t_WL: float) -> float:
    """Wang-Landau deposit height ``F_WL * min(t/t_WL, t_WL/t)``."""
    if t <= 0:
        raise ValueError("time must be positive")
    return F_WL * min(t / t_WL, t_WL / t)


@dataclass(frozen=True)
class WandConfig:
    # Langevin time step; plays the role of the learning rate
    learning_rate: float = 3e-3
    friction: float = 0.1
    kT: float = 1.0
    lnl_min: float = -10.0
    lnl_max: float = 2.5
    bins: int = 125
    deposit_width: float = 0.2      # in bins
    F_WL: float = 0.5
    t_WL: float = 500.0
    bias_L0: float = math.log(2.0)  # threshold on the biased coordinate
    bias_beta: float = 1.0
    bias_on_log: bool = True        # False: quadratic in raw loss
    force_clip: float = 1e3
    steps: int = 5_000
    seed: int = 0
    entropy_updates: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.friction <= 2:
            raise ValueError("friction must lie in [0, 2]")
        if self.lnl_max <= self.lnl_min or self.bins < 2:
            raise ValueError("bad ln-loss axis")
        if self.kT < 0 or self.F_WL < 0 or self.t_WL <= 0:
            raise ValueError("kT, F_WL must be >= 0 and t_WL > 0")


def _gauss_bin_mass(edges: np.ndarray, center: float, sigma: float) -> np.ndarray:
    """Mass of a unit Gaussian falling in each bin; reflected at both ends
    so a fully in-range deposit conserves mass."""
    from scipy.special import ndtr

    lo, hi = edges[0], edges[-1]
    c = min(max(center, lo), hi)
    n = edges.size - 1
    if sigma <= 0:
        k = int(np.clip(np.searchsorted(edges, c, side="right") - 1, 0, n - 1))
        out = np.zeros(n)
        out[k] = 1.0
        return out
    out = np.zeros(n)
    for mu in (c, 2 * lo - c, 2 * hi - c):
        cdf = ndtr((edges - mu) / sigma)
        out += np.diff(cdf)
    return out


@dataclass
class Entropy1D:
    """Binned entropy estimate along the ln-loss axis."""

    edges: np.ndarray
    values: np.ndarray
    visits: np.ndarray

    @classmethod
    def empty(cls, lo: float, hi: float, bins: int) -> "Entropy1D":
        return cls(np.linspace(lo, hi, bins + 1), np.zeros(bins), np.zeros(bins, dtype=np.int64))

    @property
    def width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    def index(self, x: float) -> int:
        k = int(np.floor((x - self.edges[0]) / self.width))
        return min(max(k, 0), self.values.size - 1)

    def gradient(self, x: float) -> float:
        """dS/dx at the bin holding ``x``; central difference, one-sided at
        the ends, unvisited neighbours read as zero."""
        k = self.index(x)
        s = np.where(self.visits > 0, self.values, 0.0)
        n = s.size
        if k == 0:
            return float((s[1] - s[0]) / self.width)
        if k == n - 1:
            return float((s[-1] - s[-2]) / self.width)
        return float((s[k + 1] - s[k - 1]) / (2 * self.width))


@dataclass
class WandState:
    params: tf.ParamVector
    velocities: np.ndarray
    entropy1d: Entropy1D
    config: WandConfig
    rng: np.random.Generator
    t: int = 0

    def __post_init__(self):
        if self.velocities.shape != self.params.flat.shape:
            raise ValueError("velocities must match parameters")


def init_wand(model: tf.ModelConfig, cfg: WandConfig, init_seed: int = 0) -> WandState:
    """Initial parameters from ``init_seed``; Maxwell-Boltzmann velocities
    and all later noise from ``cfg.seed``."""
    params = tf.init_params(model, init_seed)
    rng = np.random.default_rng(cfg.seed)
    vel = rng.standard_normal(params.flat.size) * math.sqrt(cfg.kT)
    ent = Entropy1D.empty(cfg.lnl_min, cfg.lnl_max, cfg.bins)
    return WandState(params, vel, ent, cfg, rng, 0)


def wand_1d_entropy_update(state: WandState, lnL: float) -> WandState:
    """Deposit ``f_WL(t)`` at ``lnL`` (Gaussian, width in bins) and advance
    the clock.  Updates ``state`` in place and returns it."""
    cfg = state.config
    state.t += 1
    ent = state.entropy1d
    f = wl_factor(state.t, cfg.F_WL, cfg.t_WL)
    ent.values += f * _gauss_bin_mass(ent.edges, lnL, cfg.deposit_width * ent.width)
    ent.visits[ent.index(lnL)] += 1
    return state


def _bias_slope(cfg: WandConfig, lnL: float) -> float:
    """d S_bias / d lnL for the quadratic bias above the threshold."""
    if cfg.bias_on_log:
        x = lnL
        return 2.0 * cfg.bias_beta * (x - cfg.bias_L0) if x > cfg.bias_L0 else 0.0
    L = math.exp(lnL)
    # chain rule: d/dlnL of beta (L - L0)^2 = 2 beta (L - L0) L
    return 2.0 * cfg.bias_beta * (L - cfg.bias_L0) * L if L > cfg.bias_L0 else 0.0


def wand_step(state: WandState, grad_lnL: np.ndarray, lnL: float) -> WandState:
    """One Langevin update of parameters and velocities (in place)."""
    cfg = state.config
    slope = state.entropy1d.gradient(lnL) + _bias_slope(cfg, lnL)
    acc = -slope * grad_lnL
    norm = float(np.linalg.norm(acc))
    if not math.isfinite(norm):
        raise DivergenceError(f"non-finite force at step {state.t}")
    if norm > cfg.force_clip:
        acc *= cfg.force_clip / norm
    dt, lam = cfg.learning_rate, cfg.friction
    noise = math.sqrt(lam * (2.0 - lam) * cfg.kT)
    v = state.velocities
    v += acc * dt - lam * v
    if noise > 0:
        v += noise * state.rng.standard_normal(v.size)
    state.params = state.params.with_flat(state.params.flat + dt * v)
    if not np.all(np.isfinite(state.params.flat)):
        raise DivergenceError(f"non-finite parameters at step {state.t}")
    return state


def train_wand(split: SplitDataset, model: tf.ModelConfig, cfg: WandConfig,
               init_seed: int = 0, *, state: Optional[WandState] = None,
               on_step: Optional[StepHook] = None,
               stop: Optional[Callable[[list], bool]] = None) -> list[TrainRecord]:
    """WanD training; record ``t`` describes the parameters after ``t`` steps."""
    train, test = tf.Batch.from_split(split, "train"), tf.Batch.from_split(split, "test")
    if state is None:
        state = init_wand(model, cfg, init_seed)
    records: list[TrainRecord] = []
    while True:
        loss, grad, logits = tf.loss_and_grad(state.params, train)
        try:
            lnL, grad_lnL = tf.log_loss(loss, grad)
        except ValueError as exc:
            raise DivergenceError(f"{exc} at step {state.t}", records) from None
        records.append(_evaluate(state.params, train, test, state.t, loss, logits))
        if state.t >= cfg.steps or (stop is not None and stop(records)):
            break
        try:
            wand_step(state, grad_lnL, lnL)
        except DivergenceError as exc:
            raise DivergenceError(str(exc), records) from None
        if cfg.entropy_updates:
            wand_1d_entropy_update(state, lnL)
        else:
            state.t += 1
        if on_step is not None:
            on_step(state.t, state)
    return records
