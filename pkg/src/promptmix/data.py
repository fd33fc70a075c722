"""Synthetic multi-task token corpus.

Each task is an algorithmic sequence family over its own vocabulary band, so
tasks are separable by construction while selected pairs deliberately share a
band ({copy, reverse} and {sort-window, arithmetic-mod}) to model related
skills. Token 0 is the separator; tokens 1 and 2 are classification tags.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

SEP = 0
TAG_LO = 1
TAG_HI = 2

KINDS = (
    "copy",
    "reverse",
    "sort-window",
    "arithmetic-mod",
    "pattern-complete",
    "vocab-band-lm",
    "classification-tag",
)

SORT_WINDOW = 4


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    kind: str
    band_lo: int
    band_hi: int  # exclusive
    min_len: int = 6
    max_len: int = 9

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if not (2 < self.band_lo < self.band_hi):
            raise ConfigError(f"band [{self.band_lo}, {self.band_hi}) is invalid")
        if not (1 <= self.min_len <= self.max_len):
            raise ConfigError("need 1 <= min_len <= max_len")

    @property
    def width(self) -> int:
        return self.band_hi - self.band_lo


@dataclass(frozen=True)
class Sample:
    tokens: np.ndarray
    task: int
    split: str

    def __eq__(self, other):
        return (
            isinstance(other, Sample)
            and self.task == other.task
            and self.split == other.split
            and np.array_equal(self.tokens, other.tokens)
        )


@dataclass
class TaskCorpus:
    samples: list = field(default_factory=list)

    def train_samples(self) -> list:
        return [s for s in self.samples if s.split == "train"]

    def test_samples(self) -> list:
        return [s for s in self.samples if s.split == "test"]

    def labeled(self, split: str = "train") -> list:
        return [(s.tokens, s.task) for s in self.samples if s.split == split]

    @property
    def task_ids(self) -> list:
        return sorted({s.task for s in self.samples})


def default_task_specs(n_tasks: int = 7) -> list:
    """Engineered task layout; the first four form the two similar pairs."""
    layout = [
        ("copy", 8, 32),
        ("reverse", 8, 32),
        ("sort-window", 40, 64),
        ("arithmetic-mod", 40, 64),
        ("pattern-complete", 72, 96),
        ("vocab-band-lm", 104, 128),
        ("classification-tag", 136, 160),
    ]
    if not 1 <= n_tasks <= len(layout):
        raise ConfigError(f"n_tasks must be in [1, {len(layout)}], got {n_tasks}")
    return [
        TaskSpec(task_id=i, kind=kind, band_lo=lo, band_hi=hi)
        for i, (kind, lo, hi) in enumerate(layout[:n_tasks])
    ]


def _gen_tokens(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    lo, hi, w = spec.band_lo, spec.band_hi, spec.width
    k = int(rng.integers(spec.min_len, spec.max_len + 1))
    if spec.kind == "copy":
        a = rng.integers(lo, hi, size=k)
        return np.concatenate([a, [SEP], a])
    if spec.kind == "reverse":
        a = rng.integers(lo, hi, size=k)
        return np.concatenate([a, [SEP], a[::-1]])
    if spec.kind == "sort-window":
        k = max(SORT_WINDOW, (k // SORT_WINDOW) * SORT_WINDOW)
        a = rng.integers(lo, hi, size=k)
        out = np.concatenate(
            [np.sort(a[i : i + SORT_WINDOW]) for i in range(0, k, SORT_WINDOW)]
        )
        return np.concatenate([a, [SEP], out])
    if spec.kind == "arithmetic-mod":
        a = rng.integers(lo, hi, size=k)
        run = np.cumsum(a - lo) % w + lo
        return np.concatenate([a, [SEP], run])
    if spec.kind == "pattern-complete":
        period = int(rng.integers(2, 5))
        motif = rng.integers(lo, hi, size=period)
        full = np.tile(motif, (k + 2 * period) // period + 1)
        return np.concatenate([full[:k], [SEP], full[k : k + 2 * period]])
    if spec.kind == "vocab-band-lm":
        # Fixed affine successor structure: the chain is part of the task
        # definition, so every corpus seed shares the same learnable rules.
        length = k + spec.max_len
        seq = np.empty(length, dtype=np.int64)
        s = int(rng.integers(w))
        for i in range(length):
            seq[i] = lo + s
            choice = rng.random()
            if choice < 0.5:
                s = (s * 7 + 3) % w
            elif choice < 0.8:
                s = (s * 11 + 1) % w
            else:
                s = (s * 13 + 5) % w
        return seq
    if spec.kind == "classification-tag":
        a = rng.integers(lo, hi, size=k)
        upper = int((a >= lo + w // 2).sum())
        tag = TAG_HI if 2 * upper > k else TAG_LO
        return np.concatenate([a, [SEP], [tag]])
    raise ConfigError(f"unknown task kind {spec.kind!r}")


def generate_corpus(
    task_specs,
    samples_per_task: int,
    seed: int,
    vocab_size: int = 256,
    train_fraction: float = 0.9,
) -> TaskCorpus:
    """Deterministic per-seed corpus with a per-task train/test split."""
    specs = list(task_specs)
    if samples_per_task < 10:
        raise ConfigError(f"samples_per_task must be >= 10, got {samples_per_task}")
    for spec in specs:
        if spec.band_hi > vocab_size:
            raise ConfigError(
                f"task {spec.task_id} band reaches {spec.band_hi} > vocab_size {vocab_size}"
            )
    samples = []
    for spec in specs:
        rng = np.random.default_rng([seed, spec.task_id])
        n_train = int(round(train_fraction * samples_per_task))
        for i in range(samples_per_task):
            tokens = _gen_tokens(spec, rng).astype(np.int64)
            split = "train" if i < n_train else "test"
            samples.append(Sample(tokens=tokens, task=spec.task_id, split=split))
    return TaskCorpus(samples=samples)


def save_corpus(corpus: TaskCorpus, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in corpus.samples:
            fh.write(
                json.dumps(
                    {"task": int(s.task), "tokens": [int(t) for t in s.tokens], "split": s.split},
                    separators=(",", ":"),
                )
            )
            fh.write("\n")


def load_corpus(path: str) -> TaskCorpus:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                tokens = np.asarray(raw["tokens"], dtype=np.int64)
                split = raw["split"]
                task = int(raw["task"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{path}:{lineno}: malformed corpus record ({exc})") from exc
            if split not in ("train", "test"):
                raise InputError(f"{path}:{lineno}: split must be train|test, got {split!r}")
            samples.append(Sample(tokens=tokens, task=task, split=split))
    return TaskCorpus(samples=samples)
