"""Untargeted gradient attacks and robustness evaluation.

All attacks maximise the cross-entropy at the true label and keep their
output inside the domain box. Per-point random streams are derived from
``(seed, point index)`` so results do not depend on batching.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import nn
from .datagen import DOMAIN_HI, DOMAIN_LO, DOMAIN_WIDTH, CorruptionKind, DatasetSplit, corrupt


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"             # "none" | "fgsm" | "pgd"
    eps: float = 0.0
    steps: int = 10
    step_size: Optional[float] = None   # pgd default 2.5 * eps / steps
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "fgsm", "pgd"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")
        if self.kind == "pgd":
            if self.steps < 1:
                raise ValueError("pgd needs steps >= 1")
            if self.step_size is not None and self.step_size <= 0:
                raise ValueError("pgd step_size must be positive")

    @property
    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.eps / self.steps


@dataclass
class EvalResult:
    n: int
    correct: int
    accuracy: float
    per_class: Dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"n": self.n, "correct": self.correct, "accuracy": self.accuracy,
                "per_class": {str(k): v for k, v in self.per_class.items()}}


def _clip_box(X, lo=DOMAIN_LO, hi=DOMAIN_HI):
    return np.clip(X, lo, hi)


def fgsm(model: nn.ModelState, x, y, eps: float, lo=DOMAIN_LO, hi=DOMAIN_HI) -> np.ndarray:
    """``clip(x + eps * sign(grad_x CE(f(x), y)))``; works on one input or a batch."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if eps == 0:
        return x.copy()
    g = nn.input_loss_gradients(model, x, y)
    return _clip_box(x + eps * np.sign(g), lo, hi)


def _point_rngs(seed, idx):
    return [np.random.default_rng([int(seed), int(i)]) for i in idx]


def pgd(model: nn.ModelState, x, y, spec: AttackSpec, lo=DOMAIN_LO, hi=DOMAIN_HI,
        index_offset: int = 0, p=math.inf) -> np.ndarray:
    """Projected gradient ascent on the cross-entropy inside an ``l_p`` ball (``p`` is inf or 2)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X0 = np.atleast_2d(x)
    Y = np.broadcast_to(np.asarray(y), (X0.shape[0],))
    eps = spec.eps
    step = spec.resolved_step_size
    X = X0.copy()
    if eps == 0:
        return x.copy()
    if spec.random_start:
        rngs = _point_rngs(spec.seed, range(index_offset, index_offset + X0.shape[0]))
        if p == math.inf:
            noise = np.stack([r.uniform(-eps, eps, size=X0.shape[1]) for r in rngs])
        else:
            noise = np.stack([_uniform_l2_ball(r, X0.shape[1], eps) for r in rngs])
        X = _clip_box(X0 + noise, lo, hi)
    for _ in range(spec.steps):
        g = nn.input_loss_gradients(model, X, Y)
        if p == math.inf:
            X = X + step * np.sign(g)
            X = np.clip(X, X0 - eps, X0 + eps)
        else:
            norms = np.linalg.norm(g, axis=1, keepdims=True)
            X = X + step * np.divide(g, norms, out=np.zeros_like(g), where=norms > 0)
            delta = X - X0
            dn = np.linalg.norm(delta, axis=1, keepdims=True)
            X = X0 + delta * np.minimum(1.0, eps / np.maximum(dn, 1e-300))
        X = _clip_box(X, lo, hi)
    return X[0] if single else X


def _uniform_l2_ball(rng, d, eps):
    v = rng.normal(size=d)
    v /= max(np.linalg.norm(v), 1e-300)
    return v * eps * rng.random() ** (1.0 / d)


def attack(model, X, y, spec: AttackSpec) -> np.ndarray:
    if spec.kind == "none" or spec.eps == 0:
        return np.asarray(X, dtype=np.float64)
    if spec.kind == "fgsm":
        return fgsm(model, X, y, spec.eps)
    return pgd(model, X, y, spec)


def evaluate(model: nn.ModelState, split: DatasetSplit, spec: AttackSpec = AttackSpec()) -> EvalResult:
    """Accuracy of ``model`` on ``split`` after attacking every point with ``spec``."""
    X = attack(model, split.inputs, split.labels, spec)
    pred = nn.predict(model, X)
    hit = pred == split.labels
    per_class = {}
    for k in np.unique(split.labels):
        sel = split.labels == k
        per_class[int(k)] = float(hit[sel].mean())
    correct = int(hit.sum())
    return EvalResult(split.n, correct, correct / split.n, per_class)


@dataclass
class CorruptionGrid:
    """Accuracy per (kind, severity), per-kind rows and Mean/Std summary rows."""

    kinds: List[str]
    severities: List[int]
    cells: Dict[tuple, EvalResult]
    attack: AttackSpec

    def accuracy(self, kind, severity) -> float:
        return self.cells[(kind, severity)].accuracy

    def kind_rows(self) -> Dict[str, float]:
        return {k: float(np.mean([self.accuracy(k, s) for s in self.severities]))
                for k in self.kinds}

    def mean_row(self) -> Dict[int, float]:
        return {s: float(np.mean([self.accuracy(k, s) for k in self.kinds]))
                for s in self.severities}

    def std_row(self) -> Dict[int, float]:
        return {s: float(np.std([self.accuracy(k, s) for k in self.kinds]))
                for s in self.severities}

    @property
    def mean(self) -> float:
        """Grand mean over kinds (each kind averaged over severities)."""
        return float(np.mean(list(self.kind_rows().values())))

    @property
    def std(self) -> float:
        """Population std of the per-kind accuracies."""
        return float(np.std(list(self.kind_rows().values())))

    def to_dict(self) -> dict:
        return {
            "attack": asdict(self.attack),
            "kinds": list(self.kinds),
            "severities": list(self.severities),
            "cells": [{"corruption": k, "severity": s, "accuracy": self.accuracy(k, s)}
                      for k in self.kinds for s in self.severities],
            "kind_rows": self.kind_rows(),
            "mean_row": {str(s): v for s, v in self.mean_row().items()},
            "std_row": {str(s): v for s, v in self.std_row().items()},
            "mean": self.mean,
            "std": self.std,
        }


def eval_corruption_grid(model, split: DatasetSplit, kinds: Sequence = tuple(CorruptionKind),
                         severities: Sequence[int] = (1, 2, 3, 4, 5),
                         spec: AttackSpec = AttackSpec(), seed: int = 0) -> CorruptionGrid:
    """Corrupt, optionally attack, and evaluate for every (kind, severity)."""
    kinds = [CorruptionKind(k).value for k in kinds]
    cells = {}
    for ki, k in enumerate(kinds):
        for s in severities:
            bad = corrupt(split, k, s, seed=seed * 1000 + ki * 10 + s)
            cells[(k, s)] = evaluate(model, bad, spec)
    return CorruptionGrid(kinds, list(severities), cells, spec)


def min_perturbation_search(model: nn.ModelState, x, y, p=math.inf, resolution: float = 1e-3,
                            eps_max: float = DOMAIN_WIDTH / 2, steps: int = 50,
                            restarts: int = 5, seed: int = 0) -> Optional[float]:
    """Smallest ``eps`` (to ``resolution``) at which PGD flips the prediction.

    Returns 0 when ``x`` is already misclassified and ``None`` when even
    ``eps_max`` fails.
    """
    x = np.asarray(x, dtype=np.float64)
    if int(nn.predict(model, x)) != int(y):
        return 0.0
    X = np.repeat(x[None, :], restarts, axis=0)
    Y = np.full(restarts, int(y))

    def success(eps):
        spec = AttackSpec("pgd", eps, steps=steps, step_size=2.5 * eps / steps,
                          random_start=True, seed=seed)
        adv = pgd(model, X, Y, spec, p=p)
        return bool(np.any(nn.predict(model, adv) != Y))

    if not success(eps_max):
        return None
    lo, hi = 0.0, eps_max
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if success(mid):
            hi = mid
        else:
            lo = mid
    return hi
