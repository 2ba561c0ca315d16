"""Attribution-aware first-order robustness bounds.

``delta_min(x) = min_{j != y} margin_j / L_eff`` where ``L_eff`` is the dual
norm of a logit gradient with the spurious coordinates zeroed. Two flavours:

* ``"pairwise"`` uses ``grad (f_y - f_j)`` for each runner-up ``j``; for a
  linear classifier with nothing masked this is the exact minimal distortion.
* ``"as_written"`` uses ``grad f_y`` alone for every ``j``.

Both are first-order estimates, not certificates, for nonlinear models;
:func:`certify_split` can audit them against an empirical attack search.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import List, Optional

import numpy as np

from . import lime, nn
from .attacks import min_perturbation_search
from .datagen import DOMAIN_WIDTH
from .errors import DegenerateAttributionError, InputError, UndefinedAlignmentError
from .spurious import SpuriousSet


def dual_order(p: float) -> float:
    if p == math.inf:
        return 1.0
    if p == 1:
        return math.inf
    return p / (p - 1.0)


def _norm(v, q) -> float:
    if q not in (1, 2, math.inf):
        raise InputError(f"norm order {q} not supported (use 1, 2 or inf)")
    return float(np.linalg.norm(v, ord=q))


def normalized_attribution(beta) -> np.ndarray:
    a = np.abs(np.asarray(beta, dtype=np.float64))
    total = a.sum()
    if total <= 0:
        raise DegenerateAttributionError("attribution vector is all zero")
    return a / total


def alignment(grad, a) -> float:
    """Cosine similarity between a gradient and an attribution vector."""
    grad = np.asarray(grad, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    ng, na = np.linalg.norm(grad), np.linalg.norm(a)
    if ng == 0 or na == 0:
        raise UndefinedAlignmentError("alignment undefined for a zero-norm vector")
    return float(np.clip(grad @ a / (ng * na), -1.0, 1.0))


def _spurious_indicator(spurious, d) -> np.ndarray:
    if spurious is None:
        return np.zeros(d)
    if isinstance(spurious, SpuriousSet):
        return spurious.indicator
    ind = np.asarray(spurious, dtype=np.float64)
    if ind.shape != (d,):
        raise InputError(f"spurious indicator must have length {d}")
    return ind


def effective_lipschitz(grad, spurious_indicator, q=1) -> float:
    """``|| grad * (1 - m_spurious) ||_q``; ``m_spurious`` is 1 on spurious features."""
    grad = np.asarray(grad, dtype=np.float64)
    m = np.asarray(spurious_indicator, dtype=np.float64)
    if m.shape != grad.shape:
        raise InputError("gradient and mask lengths differ")
    return _norm(grad * (1.0 - m), q)


@dataclass
class LowerBound:
    delta_min: float              # inf when unbounded
    runner_up: int
    margin: float
    l_eff: float
    unbounded: bool
    as_written: float             # the other mode's value, for comparison
    max_masked_grad: float

    @property
    def value(self):
        return self.delta_min


def distortion_lower_bound(model: nn.ModelState, x, spurious=None, q=1,
                           mode: str = "pairwise") -> LowerBound:
    """Lower-bound estimate of the distortion needed to change the prediction at ``x``."""
    if mode not in ("pairwise", "as_written"):
        raise InputError("mode must be 'pairwise' or 'as_written'")
    x = np.asarray(x, dtype=np.float64)
    logits = nn.forward(model, x)
    J = nn.logit_jacobian(model, x)
    y = int(np.argmax(logits))
    m = _spurious_indicator(spurious, x.shape[0])
    keep = 1.0 - m
    others = [j for j in range(model.num_classes) if j != y]
    margins = np.array([logits[y] - logits[j] for j in others])

    l_y = _norm(J[y] * keep, q)
    with np.errstate(divide="ignore"):
        written = np.where(margins <= 0, 0.0, margins / l_y if l_y > 0 else np.inf)
        l_pair = np.array([_norm((J[y] - J[j]) * keep, q) for j in others])
        pair = np.where(margins <= 0, 0.0,
                        np.divide(margins, l_pair, out=np.full_like(margins, np.inf),
                                  where=l_pair > 0))

    vals, ls = (pair, l_pair) if mode == "pairwise" else (written, np.full(len(others), l_y))
    k = int(np.argmin(vals))
    other_mode = written if mode == "pairwise" else pair
    max_masked = float(np.max(np.abs(J[y]) * m)) if m.any() else 0.0
    return LowerBound(float(vals[k]), others[k], float(margins[k]), float(ls[k]),
                      bool(np.isinf(vals[k])), float(np.min(other_mode)), max_masked)


def first_order_sensitivity_bound(model: nn.ModelState, x, j: int, eps: float, p=math.inf,
                                  y: Optional[int] = None) -> float:
    """``eps * || grad (f_y - f_j) ||_q`` with ``q`` dual to ``p``."""
    x = np.asarray(x, dtype=np.float64)
    if y is None:
        y = int(nn.predict(model, x))
    J = nn.logit_jacobian(model, x)
    return eps * _norm(J[y] - J[j], dual_order(p))


@dataclass
class BoundRecord:
    index: int
    label: int
    predicted: int
    runner_up: int
    margin: float
    l_eff: float
    delta_min: float
    delta_min_as_written: float
    unbounded: bool
    max_masked_grad: float
    alignment: Optional[float] = None
    delta_emp: Optional[float] = None
    emp_found: Optional[bool] = None
    sound: Optional[bool] = None


@dataclass
class BoundReport:
    records: List[BoundRecord] = field(default_factory=list)
    q: float = 1.0
    mode: str = "pairwise"
    tolerance: float = 0.0

    @property
    def mean_delta_min(self) -> float:
        vals = [r.delta_min for r in self.records if not r.unbounded]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def n_sound(self) -> int:
        return sum(1 for r in self.records if r.sound)

    @property
    def violations(self) -> List[BoundRecord]:
        return [r for r in self.records if r.sound is False]

    def summary(self) -> dict:
        aligns = [r.alignment for r in self.records if r.alignment is not None]
        return {
            "n": len(self.records),
            "mean_delta_min": self.mean_delta_min,
            "n_unbounded": sum(r.unbounded for r in self.records),
            "n_audited": sum(r.sound is not None for r in self.records),
            "n_sound": self.n_sound,
            "violations": [r.index for r in self.violations],
            "mean_alignment": float(np.mean(aligns)) if aligns else None,
        }

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isinf(v) else v
        return {
            "q": _json_num(self.q),
            "mode": self.mode,
            "tolerance": self.tolerance,
            "summary": self.summary(),
            "records": [{k: clean(v) for k, v in asdict(r).items()} for r in self.records],
        }

    def write_csv(self, path) -> None:
        names = list(BoundRecord.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in self.records:
                w.writerow(["" if getattr(r, k) is None else getattr(r, k) for k in names])


def _json_num(v):
    return "inf" if v == math.inf else v


def certify_split(model: nn.ModelState, X, labels, spurious=None, q=1, mode="pairwise",
                  with_empirical=False, lime_cfg: Optional[lime.LimeConfig] = None,
                  resolution=1e-3, eps_max=DOMAIN_WIDTH / 2, tolerance=None, seed=0,
                  index_offset=0, threads=1) -> BoundReport:
    """Bound record per input; optionally audited by :func:`min_perturbation_search`.

    Misclassified points get ``delta_min = 0``. A point is ``sound`` when the
    empirical distortion is at least ``delta_min - tolerance`` (tolerance
    defaults to the search resolution); a failed search counts as sound.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    labels = np.asarray(labels)
    p = math.inf if q == 1 else (1.0 if q == math.inf else q / (q - 1.0))
    tol = resolution if tolerance is None else tolerance

    def one(i):
        x, label = X[i], int(labels[i])
        pred = int(nn.predict(model, x))
        b = distortion_lower_bound(model, x, spurious, q, mode)
        rec = BoundRecord(index_offset + i, label, pred, b.runner_up, b.margin, b.l_eff,
                          b.delta_min, b.as_written, b.unbounded, b.max_masked_grad)
        if pred != label:
            rec.delta_min = 0.0
            rec.unbounded = False
        if lime_cfg is not None:
            beta = lime.explain(model, x, lime_cfg.with_seed(seed + i)).beta
            try:
                rec.alignment = alignment(nn.logit_gradient(model, x, pred),
                                          normalized_attribution(beta))
            except ValueError:
                rec.alignment = None
        if with_empirical:
            emp = min_perturbation_search(model, x, label, p=p, resolution=resolution,
                                          eps_max=eps_max, seed=seed + i)
            rec.emp_found = emp is not None
            rec.delta_emp = emp
            rec.sound = True if emp is None else bool(emp >= rec.delta_min - tol)
        return rec

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(one, range(len(X))))
    else:
        records = [one(i) for i in range(len(X))]
    return BoundReport(records, q, mode, tol)
