"""Wang-Landau molecular dynamics on a 2-D observable grid.

A walker moves through parameter space under the force

    a = -dS/dx * grad(x) - dS/dy * grad(y) - dS_bias/dx * grad(x)

where ``S`` is the running entropy estimate on a rectangular grid over two
observables (ln train loss and test accuracy for the transformer), and
after every move deposits a Gaussian of height ``f_WL(t)`` at the visited
point.  Velocities follow a Langevin thermostat.  Several walkers run in
rounds and are averaged at each synchronisation point.

Two systems plug into the same loop: :class:`TransformerSystem` and the
analytic :class:`OracleSystem` (``U = |q|^2 / 2`` in ``n`` dimensions, whose
entropy ``(n/2 - 1) ln U`` is known in closed form).
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import transformer as tf
from .modular_tasks import SplitDataset, TaskKind, TaskSpec, make_split
from .optim import DivergenceError, _gauss_bin_mass, wl_factor

log = logging.getLogger(__name__)

__all__ = [
    "Constraint",
    "EntropyGrid",
    "WalkerState",
    "Observation",
    "OracleSystem",
    "TransformerSystem",
    "CampaignConfig",
    "CampaignResult",
    "wl_factor",
    "deposit",
    "entropy_gradient",
    "wlmd_force",
    "langevin_step",
    "enforce_constraint",
    "init_velocities",
    "make_walker",
    "run_walker",
    "merge_walkers",
    "normalize_grid",
    "run_campaign",
    "build_system",
    "grid_to_csv",
    "grid_from_csv",
    "write_trajectory_csv",
    "oracle_profile",
    "fit_log_slope",
    "oracle_config",
    "oracle_report",
    "OracleReport",
]


class Constraint(str, enum.Enum):
    NONE = "none"
    HYPERCUBE = "hypercube"
    NORM_SHELL = "norm_shell"


# -- grid ---------------------------------------------------------------------

@dataclass
class EntropyGrid:
    """Running entropy estimate ``S[i, j]`` over (axis-0 bin, accuracy bin).

    ``visits`` counts deposits whose centre fell in each bin; cells with zero
    visits are "unvisited" and exported as ``NA``.  Deposit widths are
    Gaussian standard deviations in axis units.
    """

    lnL_edges: np.ndarray
    acc_edges: np.ndarray
    S: np.ndarray
    visits: np.ndarray
    deposit_widths: tuple = (0.1, 0.02)
    F_WL: float = 0.5
    t_WL: float = 500.0
    bias_L0: float = math.log(2.0)
    bias_beta: float = 1.0
    bias_on_log: bool = True
    reflect: bool = True
    deposited: float = 0.0       # total f_WL handed to deposit()
    boundary_hits: int = 0

    @classmethod
    def empty(cls, lnL_range=(-10.0, 2.5), lnL_bins=125, acc_range=(0.0, 1.0),
              acc_bins=50, **kw) -> "EntropyGrid":
        lnL_edges = np.linspace(*lnL_range, lnL_bins + 1)
        acc_edges = np.linspace(*acc_range, acc_bins + 1)
        return cls(lnL_edges, acc_edges, np.zeros((lnL_bins, acc_bins)),
                   np.zeros((lnL_bins, acc_bins), dtype=np.int64), **kw)

    def __post_init__(self):
        self.lnL_edges = np.asarray(self.lnL_edges, dtype=np.float64)
        self.acc_edges = np.asarray(self.acc_edges, dtype=np.float64)
        for e in (self.lnL_edges, self.acc_edges):
            if e.ndim != 1 or e.size < 2 or np.any(np.diff(e) <= 0):
                raise ValueError("bin edges must be strictly increasing")
        shape = (self.lnL_edges.size - 1, self.acc_edges.size - 1)
        if self.S.shape != shape or self.visits.shape != shape:
            raise ValueError(f"grid arrays must have shape {shape}")
        self.deposit_widths = tuple(float(w) for w in self.deposit_widths)

    @property
    def shape(self) -> tuple:
        return self.S.shape

    @property
    def visited(self) -> np.ndarray:
        return self.visits > 0

    def copy(self) -> "EntropyGrid":
        return replace(self, S=self.S.copy(), visits=self.visits.copy())

    def same_geometry(self, other: "EntropyGrid") -> bool:
        return (self.shape == other.shape
                and np.array_equal(self.lnL_edges, other.lnL_edges)
                and np.array_equal(self.acc_edges, other.acc_edges))

    def index(self, x: float, y: float) -> tuple[int, int, bool]:
        """Containing bin of ``(x, y)``, clamped; flag says whether clamped."""
        i = int(np.searchsorted(self.lnL_edges, x, side="right") - 1)
        j = int(np.searchsorted(self.acc_edges, y, side="right") - 1)
        ni, nj = self.shape
        # the top edge belongs to the last bin
        if x == self.lnL_edges[-1]:
            i = ni - 1
        if y == self.acc_edges[-1]:
            j = nj - 1
        clamped = not (0 <= i < ni and 0 <= j < nj)
        return min(max(i, 0), ni - 1), min(max(j, 0), nj - 1), clamped

    def bias_slope(self, x: float) -> float:
        """d S_bias / dx where ``x`` is the axis-0 coordinate."""
        if self.bias_on_log:
            return 2.0 * self.bias_beta * (x - self.bias_L0) if x > self.bias_L0 else 0.0
        L = math.exp(x)
        return 2.0 * self.bias_beta * (L - self.bias_L0) * L if L > self.bias_L0 else 0.0


def deposit(grid: EntropyGrid, x: float, y: float, t: float) -> EntropyGrid:
    """Add ``f_WL(t)`` times a normalised 2-D Gaussian centred at ``(x, y)``.

    Each axis contributes the exact Gaussian mass per bin; with ``reflect``
    the tails are folded back at the grid edges so the in-grid mass is
    ``f_WL(t)``.  Points outside the grid are clamped to the edge.  Modifies
    ``grid`` in place and returns it.
    """
    f = wl_factor(t, grid.F_WL, grid.t_WL)
    i, j, clamped = grid.index(x, y)
    if clamped:
        grid.boundary_hits += 1
    wx, wy = grid.deposit_widths
    xc = min(max(x, grid.lnL_edges[0]), grid.lnL_edges[-1])
    yc = min(max(y, grid.acc_edges[0]), grid.acc_edges[-1])
    mx = _axis_mass(grid.lnL_edges, xc, wx, grid.reflect, i)
    my = _axis_mass(grid.acc_edges, yc, wy, grid.reflect, j)
    grid.S += f * np.outer(mx, my)
    grid.visits[i, j] += 1
    grid.deposited += f
    return grid


def _axis_mass(edges, c, sigma, reflect, k):
    if sigma <= 0:
        out = np.zeros(edges.size - 1)
        out[k] = 1.0
        return out
    if reflect:
        return _gauss_bin_mass(edges, c, sigma)
    from scipy.special import ndtr
    return np.diff(ndtr((edges - c) / sigma))


def entropy_gradient(grid: EntropyGrid, x: float, y: float) -> tuple[float, float]:
    """``(dS/dx, dS/dy)`` by finite differences of neighbouring bin centres.

    Central in the interior, one-sided at the edges, zero along an axis with
    a single bin.  Unvisited neighbours count as ``S = 0``.
    """
    i, j, _ = grid.index(x, y)
    ni, nj = grid.shape

    def val(a, b):
        return grid.S[a, b] if grid.visits[a, b] > 0 else 0.0

    def diff(n, k, h, get):
        if n == 1:
            return 0.0
        if k == 0:
            return (get(1) - get(0)) / h
        if k == n - 1:
            return (get(n - 1) - get(n - 2)) / h
        return (get(k + 1) - get(k - 1)) / (2 * h)

    hx = grid.lnL_edges[1] - grid.lnL_edges[0]
    hy = grid.acc_edges[1] - grid.acc_edges[0]
    dx = diff(ni, i, hx, lambda a: val(a, j))
    dy = diff(nj, j, hy, lambda b: val(i, b))
    return float(dx), float(dy)


def normalize_grid(grid: EntropyGrid) -> EntropyGrid:
    """Shift visited cells so their minimum is exactly zero (new grid)."""
    mask = grid.visited
    if not mask.any():
        raise ValueError("cannot normalise a grid with no visited bins")
    out = grid.copy()
    out.S[mask] = grid.S[mask] - grid.S[mask].min()
    return out


def merge_walkers(grids: Sequence[EntropyGrid]) -> EntropyGrid:
    """Cell-wise mean over the walkers that visited each cell.

    Summation is done on sorted values so the result does not depend on the
    order of ``grids``.  Cells nobody visited take the plain mean and stay
    unvisited.
    """
    if not grids:
        raise ValueError("nothing to merge")
    first = grids[0]
    for g in grids[1:]:
        if not first.same_geometry(g):
            raise ValueError("grids have different bin geometry")
    S = np.stack([g.S for g in grids])
    V = np.stack([g.visits for g in grids])
    masked = np.where(V > 0, S, np.nan)
    masked.sort(axis=0)
    count = (V > 0).sum(axis=0)
    visited_mean = np.nansum(masked, axis=0) / np.maximum(count, 1)
    plain = np.sort(S, axis=0).sum(axis=0) / len(grids)
    out = first.copy()
    out.S = np.where(count > 0, visited_mean, plain)
    out.visits = V.sum(axis=0)
    out.deposited = float(np.sort([g.deposited for g in grids]).sum() / len(grids))
    out.boundary_hits = int(sum(g.boundary_hits for g in grids))
    return out


# -- systems ------------------------------------------------------------------

@dataclass
class Observation:
    x: float                 # axis-0 observable (ln L_train, or U)
    y: float                 # axis-1 observable (exact test accuracy)
    grad_x: np.ndarray
    grad_y: Optional[np.ndarray]


class OracleSystem:
    """``U(q) = |q|^2 / 2`` in ``n`` dimensions.

    Its configurational density of states is proportional to
    ``U**(n/2 - 1)``, so ``S(U) = (n/2 - 1) ln U + const``.
    """

    def __init__(self, n: int):
        if n < 2:
            raise ValueError("oracle dimension must be >= 2")
        self.n = int(n)

    def dimension(self) -> int:
        return self.n

    def analytic_entropy(self, U) -> np.ndarray:
        return (self.n / 2.0 - 1.0) * np.log(U)

    def observe(self, q: np.ndarray) -> Observation:
        return Observation(0.5 * float(q @ q), 0.0, q.copy(), None)

    def initial(self, rng: np.random.Generator, U0: float = 2.0) -> np.ndarray:
        q = rng.standard_normal(self.n)
        return q * math.sqrt(2.0 * U0) / np.linalg.norm(q)


class TransformerSystem:
    """ln train loss / exact test accuracy of the transformer.

    The force along the accuracy axis uses the gradient of the sigmoid
    surrogate; binning uses the exact accuracy.
    """

    def __init__(self, split: SplitDataset, model: tf.ModelConfig,
                 sharpness: float = tf.DEFAULT_SHARPNESS):
        self.split = split
        self.model = model
        self.sharpness = sharpness
        self.train = tf.Batch.from_split(split, "train")
        self.test = tf.Batch.from_split(split, "test")
        self.layout = tf.build_layout(model)

    def dimension(self) -> int:
        return sum(g.size for g in self.layout)

    def bounds(self) -> np.ndarray:
        return tf._bounds_for(self.layout)

    def params(self, flat: np.ndarray) -> tf.ParamVector:
        return tf.ParamVector(self.model, flat, self.layout)

    def observe(self, flat: np.ndarray) -> Observation:
        pv = self.params(flat)
        loss, g_loss, _ = tf.loss_and_grad(pv, self.train)
        try:
            lnL, g_lnL = tf.log_loss(loss, g_loss)
        except ValueError as exc:
            raise DivergenceError(str(exc)) from None
        _, g_acc, logits = tf.soft_accuracy_and_grad(pv, self.test, self.sharpness)
        acc = tf.accuracy(logits, self.test.targets)
        return Observation(lnL, acc, g_lnL, g_acc)

    def initial(self, seed: int) -> np.ndarray:
        return tf.init_params(self.model, seed).flat


# -- walker dynamics ----------------------------------------------------------

@dataclass
class WalkerState:
    q: np.ndarray
    velocities: np.ndarray
    seed: int
    rng: np.random.Generator
    constraint: Constraint = Constraint.NONE
    bounds: Optional[np.ndarray] = None      # HYPERCUBE half-widths
    radius: float = 30.0                     # NORM_SHELL radius
    t: int = 0

    def __post_init__(self):
        self.constraint = Constraint(self.constraint)
        if self.velocities.shape != self.q.shape:
            raise ValueError("velocities must match coordinates")
        if self.constraint is Constraint.HYPERCUBE and (self.bounds is None or self.bounds.shape != self.q.shape):
            raise ValueError("hypercube walker needs per-coordinate bounds")

    def copy(self) -> "WalkerState":
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng.bit_generator.state
        return replace(self, q=self.q.copy(), velocities=self.velocities.copy(), rng=rng)


def init_velocities(n: int, kT: float, seed) -> np.ndarray:
    """Maxwell-Boltzmann velocities, unit mass: N(0, kT) per coordinate.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if n <= 0:
        raise ValueError("need at least one coordinate")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.standard_normal(n) * math.sqrt(kT)


def make_walker(q0: np.ndarray, seed: int, kT: float = 1.0,
                constraint: Constraint = Constraint.NONE,
                bounds: Optional[np.ndarray] = None, radius: float = 30.0) -> WalkerState:
    rng = np.random.default_rng(seed)
    v = init_velocities(q0.size, kT, rng)
    w = WalkerState(np.array(q0, dtype=np.float64), v, seed, rng, constraint, bounds, radius)
    return enforce_constraint(w)


def wlmd_force(walker: WalkerState, grid: EntropyGrid, obs: Observation) -> np.ndarray:
    """Acceleration from the entropy gradient and the entropy bias."""
    dSx, dSy = entropy_gradient(grid, obs.x, obs.y)
    slope_x = dSx + grid.bias_slope(obs.x)
    acc = -slope_x * obs.grad_x
    if obs.grad_y is not None and dSy != 0.0:
        acc = acc - dSy * obs.grad_y
    if not np.all(np.isfinite(acc)):
        raise DivergenceError(f"non-finite force at t={walker.t}")
    return acc


def langevin_step(walker: WalkerState, acceleration: np.ndarray, c_f: float,
                  dt: float, kT: float = 1.0, noise: bool = True) -> WalkerState:
    """``v <- v + a dt - c_f v + sqrt(c_f (2 - c_f) kT) xi``; ``q <- q + dt v``.

    The constraint is enforced after the move.  In place.
    """
    if not 0.0 <= c_f <= 2.0:
        raise ValueError(f"friction coefficient {c_f} outside [0, 2]")
    v = walker.velocities
    v += acceleration * dt - c_f * v
    amp = math.sqrt(c_f * (2.0 - c_f) * kT)
    if noise and amp > 0.0:
        v += amp * walker.rng.standard_normal(v.size)
    walker.q += dt * v
    return enforce_constraint(walker)


def enforce_constraint(walker: WalkerState) -> WalkerState:
    """Reflect at hypercube walls or project onto the norm shell (in place)."""
    c = walker.constraint
    if c is Constraint.HYPERCUBE:
        q, v, b = walker.q, walker.velocities, walker.bounds
        for _ in range(64):
            hi = q > b
            lo = q < -b
            if not (hi.any() or lo.any()):
                break
            q[hi] = 2.0 * b[hi] - q[hi]
            q[lo] = -2.0 * b[lo] - q[lo]
            v[hi | lo] *= -1.0
        else:
            np.clip(q, -b, b, out=q)
    elif c is Constraint.NORM_SHELL:
        norm = float(np.linalg.norm(walker.q))
        if norm == 0.0:
            raise DivergenceError("walker collapsed to the origin")
        walker.q *= walker.radius / norm
        unit = walker.q / walker.radius
        walker.velocities -= (walker.velocities @ unit) * unit
    return walker


def run_walker(walker: WalkerState, grid: EntropyGrid, system, epochs: int, *,
               dt: float = 0.02, c_f: float = 0.1, kT: float = 1.0,
               stride: int = 1, deposits: bool = True, noise: bool = True,
               trajectory: Optional[list] = None):
    """Advance one walker ``epochs`` steps, depositing into ``grid``.

    Both ``walker`` and ``grid`` are modified in place.  Rows
    ``(t, x, y)`` are appended to ``trajectory`` every ``stride`` epochs.
    Returns ``(walker, grid, trajectory)``.
    """
    if trajectory is None:
        trajectory = []
    for _ in range(epochs):
        obs = system.observe(walker.q)
        acc = wlmd_force(walker, grid, obs)
        langevin_step(walker, acc, c_f, dt, kT, noise)
        if not np.all(np.isfinite(walker.q)):
            raise DivergenceError(f"non-finite coordinates at t={walker.t}")
        walker.t += 1
        if deposits:
            deposit(grid, obs.x, obs.y, walker.t)
        if walker.t % stride == 0:
            trajectory.append((walker.t, obs.x, obs.y))
    return walker, grid, trajectory


# -- campaigns ----------------------------------------------------------------

@dataclass
class CampaignConfig:
    """Everything a WLMD campaign needs; JSON round-trippable."""

    system: str = "transformer"          # or "oracle"
    oracle_n: int = 2
    task: str = "add"
    p: int = 13
    d_model: int = 32
    n_heads: int = 4
    d_mlp: int = 128
    split_seed: int = 0
    init_seed: int = 0
    sharpness: float = tf.DEFAULT_SHARPNESS
    walkers: int = 8
    seeds: Optional[list] = None         # defaults to range(walkers)
    epochs: int = 250_000                # per walker
    round_size: int = 100_000
    stride: int = 100
    lnL_range: tuple = (-10.0, 2.5)
    lnL_bins: int = 125
    acc_range: tuple = (0.0, 1.0)
    acc_bins: int = 50
    deposit_widths: tuple = (0.1, 0.02)    # axis units
    F_WL: float = 0.5
    t_WL: float = 500.0
    bias_L0: float = math.log(2.0)
    bias_beta: float = 1.0
    bias_on_log: bool = True
    reflect: bool = True
    constraint: str = "hypercube"
    radius: float = 30.0
    dt: float = 0.02
    c_f: float = 0.1
    kT: float = 1.0

    def __post_init__(self):
        if self.walkers < 1:
            raise ValueError("need at least one walker")
        if self.seeds is None:
            self.seeds = list(range(self.walkers))
        self.seeds = [int(s) for s in self.seeds]
        if len(self.seeds) != self.walkers:
            raise ValueError("one seed per walker")
        if self.round_size < 1 or self.epochs < 0 or self.stride < 1:
            raise ValueError("round_size and stride must be >= 1, epochs >= 0")
        if self.system not in ("transformer", "oracle"):
            raise ValueError(f"unknown system {self.system!r}")
        if self.system == "oracle" and self.oracle_n < 1:
            raise ValueError("oracle dimension must be >= 1")
        for name in ("lnL_range", "acc_range", "deposit_widths"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        Constraint(self.constraint)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown campaign fields: {sorted(unknown)}")
        return cls(**d)

    def empty_grid(self) -> EntropyGrid:
        return EntropyGrid.empty(self.lnL_range, self.lnL_bins, self.acc_range, self.acc_bins,
                                 deposit_widths=self.deposit_widths, F_WL=self.F_WL,
                                 t_WL=self.t_WL, bias_L0=self.bias_L0,
                                 bias_beta=self.bias_beta, bias_on_log=self.bias_on_log,
                                 reflect=self.reflect)


def build_system(cfg: CampaignConfig):
    if cfg.system == "oracle":
        return OracleSystem(cfg.oracle_n)
    split = make_split(TaskSpec(TaskKind.parse(cfg.task), cfg.p), cfg.split_seed)
    model = tf.ModelConfig.with_width(cfg.p, cfg.d_model, cfg.d_mlp, cfg.n_heads)
    return TransformerSystem(split, model, cfg.sharpness)


def initial_walkers(cfg: CampaignConfig, system) -> list[WalkerState]:
    constraint = Constraint(cfg.constraint)
    out = []
    for seed in cfg.seeds:
        if isinstance(system, OracleSystem):
            q0 = system.initial(np.random.default_rng([seed, 1]))
            bounds = None
        else:
            q0 = system.initial(cfg.init_seed)
            bounds = system.bounds() if constraint is Constraint.HYPERCUBE else None
        out.append(make_walker(q0, seed, cfg.kT, constraint, bounds, cfg.radius))
    return out


@dataclass
class CampaignResult:
    grid: EntropyGrid                    # normalised
    raw_grid: EntropyGrid                # merged, before normalisation
    walkers: list
    trajectories: list                   # one list of (t, x, y) per walker
    failed: list = field(default_factory=list)
    epochs_done: int = 0


def run_campaign(cfg: CampaignConfig, *, system=None, resume: Optional[dict] = None,
                 on_round=None) -> CampaignResult:
    """Walkers advance in rounds of ``round_size`` epochs; after each round
    the grids are merged and the merged grid is handed back to every
    walker.  ``on_round(state_dict)`` may checkpoint; ``resume`` takes such a
    dict.
    """
    system = system if system is not None else build_system(cfg)
    if resume is not None:
        grid = resume["grid"]
        walkers = resume["walkers"]
        trajectories = resume["trajectories"]
        failed = list(resume.get("failed", []))
        done = int(resume["epochs_done"])
    else:
        grid = cfg.empty_grid()
        walkers = initial_walkers(cfg, system)
        trajectories = [[] for _ in walkers]
        failed = []
        done = 0
    while done < cfg.epochs:
        n = min(cfg.round_size, cfg.epochs - done)
        grids = []
        for k, w in enumerate(walkers):
            if k in failed:
                continue
            g = grid.copy()
            try:
                run_walker(w, g, system, n, dt=cfg.dt, c_f=cfg.c_f, kT=cfg.kT,
                           stride=cfg.stride, trajectory=trajectories[k])
            except DivergenceError as exc:
                log.warning("walker %d (seed %d) dropped: %s", k, w.seed, exc)
                failed.append(k)
                continue
            grids.append(g)
        if not grids:
            raise DivergenceError("every walker failed")
        base_hits = grid.boundary_hits
        grid = merge_walkers(grids)
        # every copy started from base_hits; count each new hit once
        grid.boundary_hits = base_hits + sum(g.boundary_hits - base_hits for g in grids)
        done += n
        log.info("campaign: %d/%d epochs per walker", done, cfg.epochs)
        if on_round is not None:
            on_round({"grid": grid, "walkers": walkers, "trajectories": trajectories,
                      "failed": failed, "epochs_done": done})
    norm = normalize_grid(grid) if grid.visited.any() else grid.copy()
    return CampaignResult(norm, grid, walkers, trajectories, failed, done)


# -- analysis helpers ---------------------------------------------------------

def oracle_profile(grid: EntropyGrid) -> tuple[np.ndarray, np.ndarray]:
    """Bin centres and S along axis 0 for visited bins (accuracy axis summed
    out by taking its first column)."""
    centres = 0.5 * (grid.lnL_edges[:-1] + grid.lnL_edges[1:])
    mask = grid.visited[:, 0]
    return centres[mask], grid.S[mask, 0]


def fit_log_slope(U: np.ndarray, S: np.ndarray) -> float:
    """Least-squares slope of ``S`` against ``ln U``."""
    return float(np.polyfit(np.log(U), S, 1)[0])


ORACLE_FIT_RANGE = (0.5, 7.5)


def oracle_config(n: int, **overrides) -> CampaignConfig:
    """Campaign settings for the quadratic oracle.

    ``U`` is binned linearly on [0, 10]; a stiff quadratic bias starts at the
    grid edge, where in-grid deposits cannot cancel it.  The WL factor is
    small so the potential changes slowly next to ``kT``; large deposits heat
    the walkers off the grid.  Friction is low because the velocity update
    samples configurations at ``kT (1 - c_f / 2)`` in the diffusive limit,
    which would tilt the recovered slope by ``c_f / 2``.
    """
    base = dict(system="oracle", oracle_n=n, walkers=4, epochs=200_000, round_size=20_000,
                stride=1000, lnL_range=(0.0, 10.0), lnL_bins=50, acc_range=(0.0, 1.0),
                acc_bins=1, deposit_widths=(0.2, 0.02), F_WL=0.05, t_WL=5000.0,
                bias_L0=10.0, bias_beta=10.0, constraint="none", dt=0.05, c_f=0.02)
    base.update(overrides)
    return CampaignConfig(**base)


@dataclass
class OracleReport:
    U: np.ndarray               # bin centres inside the fit range
    S: np.ndarray               # recovered entropy there
    analytic: np.ndarray
    slope: float
    target: float
    spread: float               # max - min of S over the fit range
    max_residual: float         # after removing the best additive constant


def oracle_report(grid: EntropyGrid, n: int, fit_range=ORACLE_FIT_RANGE) -> OracleReport:
    U, S = oracle_profile(grid)
    keep = (U > fit_range[0]) & (U < fit_range[1])
    U, S = U[keep], S[keep]
    if U.size < 3:
        raise ValueError("too few visited bins inside the fit range")
    analytic = OracleSystem(n).analytic_entropy(U)
    resid = (S - S.mean()) - (analytic - analytic.mean())
    return OracleReport(U, S, analytic, fit_log_slope(U, S), n / 2.0 - 1.0,
                        float(np.ptp(S)), float(np.abs(resid).max()))


# -- export -------------------------------------------------------------------

def grid_to_csv(grid: EntropyGrid) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lnL_edges"] + [repr(float(v)) for v in grid.lnL_edges])
    w.writerow(["acc_edges"] + [repr(float(v)) for v in grid.acc_edges])
    for i in range(grid.shape[0]):
        w.writerow([repr(float(grid.S[i, j])) if grid.visits[i, j] > 0 else "NA"
                    for j in range(grid.shape[1])])
    return buf.getvalue()


def grid_from_csv(text: str, **kw) -> EntropyGrid:
    """Parse :func:`grid_to_csv` output.  Visit counts are not stored, so
    visited cells come back with a count of one."""
    rows = list(csv.reader(io.StringIO(text)))
    if rows[0][0] != "lnL_edges" or rows[1][0] != "acc_edges":
        raise ValueError("not a grid export")
    le = np.array([float(v) for v in rows[0][1:]])
    ae = np.array([float(v) for v in rows[1][1:]])
    body = rows[2:]
    S = np.array([[0.0 if v == "NA" else float(v) for v in r] for r in body])
    V = np.array([[0 if v == "NA" else 1 for v in r] for r in body], dtype=np.int64)
    return EntropyGrid(le, ae, S, V, **kw)


def write_trajectory_csv(path, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "lnL", "acc"])
        for t, x, y in rows:
            w.writerow([int(t), repr(float(x)), repr(float(y))])
    return path
