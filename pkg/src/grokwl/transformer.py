"""One-layer decoder-only transformer for the modular-arithmetic tasks.

Layout follows the Nanda et al. grokking model: learned token and position
embeddings, one multi-head attention block, one ReLU MLP, residual
connections around both, no layer norm and no biases, and an unembedding
read at the final position only.

All parameters live in one flat float64 vector (:class:`ParamVector`) so
that optimizers and samplers can treat the network as a point in R^n.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import tensor_core as tc

__all__ = [
    "ModelConfig",
    "Group",
    "ParamVector",
    "Batch",
    "build_layout",
    "init_params",
    "forward_logits",
    "cross_entropy",
    "log_loss",
    "accuracy",
    "soft_accuracy",
    "loss_and_grad",
    "soft_accuracy_and_grad",
    "weight_norm",
    "rescale_to_norm",
    "HYPERCUBE_SCALE",
    "LOSS_FLOOR",
]

HYPERCUBE_SCALE = 3.0
LOSS_FLOOR = float(np.finfo(np.float64).tiny)
DEFAULT_SHARPNESS = 50.0


@dataclass(frozen=True)
class ModelConfig:
    p: int = 67
    d_model: int = 128
    n_heads: int = 4
    d_head: int = 32
    d_mlp: int = 512
    context: int = 3

    def __post_init__(self):
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(
                f"d_model ({self.d_model}) must equal n_heads*d_head ({self.n_heads}*{self.d_head})")
        if min(self.p, self.d_model, self.n_heads, self.d_head, self.d_mlp) <= 0:
            raise ValueError("model dimensions must be positive")
        if self.context != 3:
            raise ValueError("prompts are (x, y, =); context must be 3")

    @property
    def vocab(self) -> int:
        return self.p + 1

    @classmethod
    def with_width(cls, p: int, d_model: int, d_mlp: int, n_heads: int = 4) -> "ModelConfig":
        return cls(p=p, d_model=d_model, n_heads=n_heads, d_head=d_model // n_heads, d_mlp=d_mlp)


@dataclass(frozen=True)
class Group:
    name: str
    shape: tuple
    offset: int
    fan_in: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def bound(self) -> float:
        """Hypercube half-width ``3 / sqrt(fan_in)``."""
        return HYPERCUBE_SCALE / math.sqrt(self.fan_in)


def build_layout(cfg: ModelConfig) -> tuple[Group, ...]:
    # (name, shape, fan_in); embeddings count their one-hot input width.
    d, v = cfg.d_model, cfg.vocab
    spec = [
        ("W_E", (v, d), v),
        ("W_pos", (cfg.context, d), cfg.context),
        ("W_Q", (d, d), d),
        ("W_K", (d, d), d),
        ("W_V", (d, d), d),
        ("W_O", (d, d), d),
        ("W_in", (d, cfg.d_mlp), d),
        ("W_out", (cfg.d_mlp, d), cfg.d_mlp),
        ("W_U", (d, cfg.p), d),
    ]
    groups, off = [], 0
    for name, shape, m in spec:
        g = Group(name, shape, off, m)
        groups.append(g)
        off += g.size
    return tuple(groups)


@dataclass
class ParamVector:
    """Flat parameter array with its group layout.

    ``velocities`` is only populated by the dynamics-based methods.
    """

    config: ModelConfig
    flat: np.ndarray
    layout: tuple = field(default=None)
    velocities: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.layout is None:
            self.layout = build_layout(self.config)
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        total = sum(g.size for g in self.layout)
        if self.flat.shape != (total,):
            raise ValueError(f"flat vector has shape {self.flat.shape}, layout needs ({total},)")
        off = 0
        for g in self.layout:
            if g.offset != off:
                raise ValueError(f"layout gap or overlap at group {g.name}")
            off += g.size
        if self.velocities is not None and self.velocities.shape != self.flat.shape:
            raise ValueError("velocities must match the parameter vector")

    def __len__(self) -> int:
        return self.flat.size

    def group(self, name: str) -> np.ndarray:
        """Writable view of one group reshaped to its natural shape."""
        for g in self.layout:
            if g.name == name:
                return self.flat[g.offset:g.offset + g.size].reshape(g.shape)
        raise KeyError(name)

    def bounds(self) -> np.ndarray:
        """Per-entry hypercube half-widths."""
        return _bounds_for(self.layout)

    def copy(self) -> "ParamVector":
        vel = None if self.velocities is None else self.velocities.copy()
        return replace(self, flat=self.flat.copy(), velocities=vel)

    def with_flat(self, flat: np.ndarray) -> "ParamVector":
        return ParamVector(self.config, flat, self.layout, self.velocities)


_BOUNDS_CACHE: dict = {}


def _bounds_for(layout) -> np.ndarray:
    b = _BOUNDS_CACHE.get(layout)
    if b is None:
        b = np.concatenate([np.full(g.size, g.bound) for g in layout])
        b.setflags(write=False)
        _BOUNDS_CACHE[layout] = b
    return b


@dataclass(frozen=True)
class Batch:
    prompts: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        prompts = np.asarray(self.prompts, dtype=np.int64)
        targets = np.asarray(self.targets, dtype=np.int64)
        if prompts.ndim != 2 or prompts.shape[1] != 3 or targets.shape != (prompts.shape[0],):
            raise tc.ShapeError(f"batch: prompts {prompts.shape} / targets {targets.shape}")
        object.__setattr__(self, "prompts", prompts)
        object.__setattr__(self, "targets", targets)

    def __len__(self) -> int:
        return self.targets.shape[0]

    def check(self, cfg: ModelConfig) -> None:
        if len(self) and (self.prompts.min() < 0 or self.prompts.max() >= cfg.vocab):
            raise ValueError("prompt token outside vocabulary")
        if len(self) and (self.targets.min() < 0 or self.targets.max() >= cfg.p):
            raise ValueError("target outside [0, p)")

    @classmethod
    def from_split(cls, split, subset: str) -> "Batch":
        prompts, targets = split.arrays(subset)
        return cls(prompts, targets)


def init_params(cfg: ModelConfig, seed: int) -> ParamVector:
    """Each group i.i.d. uniform in ``[-1/sqrt(m), 1/sqrt(m)]``, m the fan-in."""
    layout = build_layout(cfg)
    rng = np.random.default_rng(seed)
    parts = [rng.uniform(-1.0, 1.0, g.size) / math.sqrt(g.fan_in) for g in layout]
    return ParamVector(cfg, np.concatenate(parts), layout)


# -- forward pass -------------------------------------------------------------

def _forward(params: ParamVector, prompts: np.ndarray, graph: Optional[tc.Graph]):
    cfg = params.config
    leaves = {}
    for g in params.layout:
        view = params.flat[g.offset:g.offset + g.size].reshape(g.shape)
        leaves[g.name] = graph.leaf(view) if graph is not None else tc.constant(view)
    n = prompts.shape[0]
    H, dh, d = cfg.n_heads, cfg.d_head, cfg.d_model

    W_E, W_pos = leaves["W_E"], leaves["W_pos"]
    final_tok = prompts[:, -1]

    def project(W):
        # (W_E[tok] + W_pos) @ W, with the projection applied to the small
        # tables before the lookup instead of to every residual row
        return tc.add(tc.embedding(tc.matmul(W_E, W), prompts), tc.matmul(W_pos, W))

    last = tc.add(tc.embedding(W_E, final_tok), tc.select(W_pos, -1, axis=0))   # (n, d)

    # Only the final query is needed; it attends to every position, so the
    # causal mask is the identity here.
    q_tab = tc.add(tc.embedding(tc.matmul(W_E, leaves["W_Q"]), final_tok),
                   tc.select(tc.matmul(W_pos, leaves["W_Q"]), -1, axis=0))
    q = tc.reshape(q_tab, (n, H, 1, dh))
    k = tc.transpose(tc.reshape(project(leaves["W_K"]), (n, 3, H, dh)), (0, 2, 3, 1))
    v = tc.transpose(tc.reshape(project(leaves["W_V"]), (n, 3, H, dh)), (0, 2, 1, 3))
    pattern = tc.softmax(tc.scale(tc.matmul(q, k), 1.0 / math.sqrt(dh)))   # (n, H, 1, 3)
    z = tc.reshape(tc.matmul(pattern, v), (n, d))
    mid = tc.add(last, tc.matmul(z, leaves["W_O"]))

    hidden = tc.relu(tc.matmul(mid, leaves["W_in"]))
    post = tc.add(mid, tc.matmul(hidden, leaves["W_out"]))
    logits = tc.matmul(post, leaves["W_U"])                               # (n, p)
    return logits, leaves


def forward_logits(params: ParamVector, batch: Batch) -> np.ndarray:
    """Logits at the final position over the ``p`` answer tokens."""
    batch.check(params.config)
    logits, _ = _forward(params, batch.prompts, None)
    return logits.values


def _flat_grad(params: ParamVector, leaves: dict) -> np.ndarray:
    out = np.zeros_like(params.flat)
    for g in params.layout:
        gr = leaves[g.name].grad
        if gr is not None:
            out[g.offset:g.offset + g.size] = gr.reshape(-1)
    return out


# -- losses and metrics -------------------------------------------------------

def cross_entropy(logits, targets):
    """Mean negative log-probability of the targets.

    Accepts a :class:`~grokwl.tensor_core.Tensor` (returns a scalar Tensor
    on the same graph) or a plain array (returns a float).
    """
    if isinstance(logits, tc.Tensor):
        return tc.scale(tc.mean_all(tc.take(tc.log_softmax(logits), targets)), -1.0)
    x = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    if x.ndim != 2 or targets.shape != (x.shape[0],):
        raise tc.ShapeError(f"cross_entropy: logits {x.shape} / targets {targets.shape}")
    ls = tc.log_softmax_array(x, 1)
    return float(-np.mean(ls[np.arange(x.shape[0]), targets]))


def log_loss(loss: float, grad: np.ndarray) -> tuple[float, np.ndarray]:
    """``ln L`` and its gradient ``grad / L``.

    A loss that underflowed to exactly zero (every margin beyond ~745) is
    read as the smallest normal float, where the gradient is zero as well.
    """
    if not (math.isfinite(loss) and loss >= 0.0):
        raise ValueError(f"bad training loss {loss}")
    L = max(loss, LOSS_FLOOR)
    return math.log(L), grad / L


def accuracy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Fraction of rows whose argmax (lowest index on ties) is the target."""
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ValueError("accuracy needs a non-empty 2-D logit matrix")
    if targets.shape != (logits.shape[0],):
        raise tc.ShapeError(f"accuracy: logits {logits.shape} / targets {targets.shape}")
    return float(np.mean(np.argmax(logits, axis=1) == targets))


def soft_accuracy(logits, targets, sharpness: float = DEFAULT_SHARPNESS):
    """Mean of ``sigmoid(k * (target logit - best other logit))``.

    Differentiable stand-in for :func:`accuracy`.  Tensor in, Tensor out;
    array in, float out.
    """
    if sharpness <= 0:
        raise ValueError("sharpness must be positive")
    if isinstance(logits, tc.Tensor):
        margin = tc.sub(tc.take(logits, targets), tc.max_excluding(logits, targets))
        return tc.mean_all(tc.sigmoid(tc.scale(margin, sharpness)))
    x = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    rows = np.arange(x.shape[0])
    other = x.copy()
    other[rows, targets] = -np.inf
    margin = x[rows, targets] - other.max(axis=1)
    z = sharpness * margin
    return float(np.mean(np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                                  np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))))


def loss_and_grad(params: ParamVector, batch: Batch) -> tuple[float, np.ndarray, np.ndarray]:
    """Cross-entropy, its gradient w.r.t. the flat vector, and the logits."""
    graph = tc.Graph()
    logits, leaves = _forward(params, batch.prompts, graph)
    loss = cross_entropy(logits, batch.targets)
    tc.backward(loss)
    grad = _flat_grad(params, leaves)
    graph.release()
    return float(loss.values), grad, logits.values


def soft_accuracy_and_grad(params: ParamVector, batch: Batch,
                           sharpness: float = DEFAULT_SHARPNESS) -> tuple[float, np.ndarray, np.ndarray]:
    graph = tc.Graph()
    logits, leaves = _forward(params, batch.prompts, graph)
    sa = soft_accuracy(logits, batch.targets, sharpness)
    tc.backward(sa)
    grad = _flat_grad(params, leaves)
    graph.release()
    return float(sa.values), grad, logits.values


def weight_norm(params) -> float:
    flat = params.flat if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)
    return float(np.sqrt(np.dot(flat, flat)))


def rescale_to_norm(params, target: float):
    """Scale the whole vector to Euclidean norm ``target``; direction kept."""
    if target <= 0:
        raise ValueError("target norm must be positive")
    current = weight_norm(params)
    if current == 0.0:
        raise ValueError("cannot rescale a zero vector")
    factor = target / current
    if isinstance(params, ParamVector):
        return params.with_flat(params.flat * factor)
    return np.asarray(params, dtype=np.float64) * factor
