"""Modular-arithmetic datasets: generation, the 50/50 split, and p x p views.

Prompts are encoded as three tokens ``(x, y, EQ)`` where ``EQ = p`` is the
single non-number token, so the vocabulary has ``p + 1`` entries.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

__all__ = [
    "TaskKind",
    "TaskSpec",
    "Example",
    "SplitDataset",
    "SplitMix64",
    "evaluate_op",
    "build_full_dataset",
    "split_dataset",
    "make_split",
    "visualize_dataset",
    "matrix_to_csv",
    "write_matrix_csv",
    "read_matrix_csv",
]


class TaskKind(str, enum.Enum):
    ADD = "add"            # x + y
    SQUARE_ADD = "square"  # x^2 + y
    CUBIC = "cubic"        # x^3 + x y^2 + y

    @classmethod
    def parse(cls, name: str) -> "TaskKind":
        key = name.strip().lower()
        aliases = {"add": cls.ADD, "x+y": cls.ADD,
                   "square": cls.SQUARE_ADD, "square_add": cls.SQUARE_ADD, "x^2+y": cls.SQUARE_ADD,
                   "cubic": cls.CUBIC, "x^3+xy^2+y": cls.CUBIC}
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown task {name!r}; expected add, square or cubic") from None


def _is_prime(n: int) -> bool:
    if n < 2:
        return False
    if n % 2 == 0:
        return n == 2
    f = 3
    while f * f <= n:
        if n % f == 0:
            return False
        f += 2
    return True


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind
    p: int = 67

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if not _is_prime(int(self.p)):
            raise ValueError(f"modulus must be prime, got {self.p}")

    @property
    def vocab(self) -> int:
        return self.p + 1

    @property
    def eq_token(self) -> int:
        return self.p


@dataclass(frozen=True)
class Example:
    x: int
    y: int
    answer: int


def evaluate_op(task: TaskSpec, x: int, y: int) -> int:
    """Answer token for the prompt ``(x, y)`` under ``task``."""
    p = task.p
    if not (0 <= x < p and 0 <= y < p):
        raise ValueError(f"operands must lie in [0, {p}), got ({x}, {y})")
    if task.kind is TaskKind.ADD:
        return (x + y) % p
    if task.kind is TaskKind.SQUARE_ADD:
        return (x * x + y) % p
    return (x ** 3 + x * y * y + y) % p


def build_full_dataset(task: TaskSpec) -> list[Example]:
    """All ``p**2`` examples in row-major ``(x, y)`` order."""
    return [Example(x, y, evaluate_op(task, x, y))
            for x in range(task.p) for y in range(task.p)]


class SplitMix64:
    """SplitMix64 generator (Steele, Lea & Flood 2014).

    Used for the dataset shuffle so the split is reproducible from the seed
    alone, independent of numpy's generator versions.
    """

    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = seed & self.MASK

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & self.MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & self.MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & self.MASK
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by rejection, so no modulo bias."""
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next()
            if r < limit:
                return r % n


@dataclass(frozen=True)
class SplitDataset:
    task: TaskSpec
    train: tuple
    test: tuple
    split_seed: int
    _arrays: dict = field(default_factory=dict, init=False, compare=False, repr=False)

    def arrays(self, subset: str) -> tuple[np.ndarray, np.ndarray]:
        """Token matrix ``(n, 3)`` and target vector ``(n,)`` for a subset."""
        if subset not in self._arrays:
            rows = self.train if subset == "train" else self.test
            if subset not in ("train", "test"):
                raise ValueError(f"unknown subset {subset!r}")
            prompts = np.array([(e.x, e.y, self.task.eq_token) for e in rows], dtype=np.int64)
            targets = np.array([e.answer for e in rows], dtype=np.int64)
            prompts.setflags(write=False)
            targets.setflags(write=False)
            self._arrays[subset] = (prompts, targets)
        return self._arrays[subset]

    def __iter__(self) -> Iterator[Example]:
        yield from self.train
        yield from self.test


def split_dataset(full: list[Example], seed: int, task: TaskSpec | None = None) -> SplitDataset:
    """Fisher-Yates shuffle driven by SplitMix64(seed); the first
    ``floor(n/2)`` shuffled examples form the training set."""
    if task is None:
        p = int(round(len(full) ** 0.5))
        if p * p != len(full):
            raise ValueError("full dataset must have p**2 entries")
        task = _infer_task(full, p)
    if len(full) != task.p ** 2:
        raise ValueError(f"expected {task.p ** 2} examples, got {len(full)}")
    order = list(range(len(full)))
    rng = SplitMix64(seed)
    for i in range(len(order) - 1, 0, -1):
        j = rng.below(i + 1)
        order[i], order[j] = order[j], order[i]
    n_train = len(full) // 2
    train = tuple(full[k] for k in order[:n_train])
    test = tuple(full[k] for k in order[n_train:])
    return SplitDataset(task, train, test, int(seed))


def _infer_task(full: list[Example], p: int) -> TaskSpec:
    for kind in TaskKind:
        task = TaskSpec(kind, p)
        if all(evaluate_op(task, e.x, e.y) == e.answer for e in full):
            return task
    raise ValueError("examples do not match any known task")


def make_split(task: TaskSpec, seed: int = 0) -> SplitDataset:
    return split_dataset(build_full_dataset(task), seed, task)


def visualize_dataset(task: TaskSpec, which: str = "full", split: SplitDataset | None = None) -> np.ndarray:
    """``p x p`` answer matrix with ``-1`` in cells outside the chosen subset."""
    which = which.lower()
    p = task.p
    mat = np.full((p, p), -1, dtype=np.int64)
    if which == "full":
        rows = build_full_dataset(task)
    elif which in ("train", "test"):
        if split is None:
            raise ValueError("train/test views need a split")
        rows = split.train if which == "train" else split.test
    else:
        raise ValueError(f"unknown subset {which!r}")
    for e in rows:
        mat[e.x, e.y] = e.answer
    return mat


def matrix_to_csv(mat: np.ndarray, task: TaskSpec, subset: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([task.p, task.kind.value, subset.lower()])
    for row in mat:
        w.writerow([int(v) for v in row])
    return buf.getvalue()


def write_matrix_csv(path, mat: np.ndarray, task: TaskSpec, subset: str) -> Path:
    path = Path(path)
    path.write_text(matrix_to_csv(mat, task, subset))
    return path


def read_matrix_csv(path) -> tuple[TaskSpec, str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    p, kind, subset = int(rows[0][0]), rows[0][1], rows[0][2]
    mat = np.array([[int(v) for v in r] for r in rows[1:]], dtype=np.int64)
    if mat.shape != (p, p):
        raise ValueError(f"matrix shape {mat.shape} does not match p={p}")
    return TaskSpec(TaskKind(kind), p), subset, mat
