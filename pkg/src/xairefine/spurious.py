"""Dataset-level detection of spurious features.

Three tests run on statistics averaged over a calibration set:

* irrelevance: large mean ``|beta_j|`` that the reference does not support,
* sensitivity: large mean ``|d f_y / d x_j|`` that the reference does not support,
* instability: large mean variance of ``beta_j`` across LIME re-runs.

A feature is spurious if any test fires; the training mask zeroes it.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from typing import List, Optional

import numpy as np

from . import lime, nn


@dataclass(frozen=True)
class Thresholds:
    """Absolute thresholds, or percentiles (0-100) when ``percentile_mode`` is set."""

    tau: float = 90.0
    eps_sens: float = 90.0
    delta: float = 90.0
    tau_ref: float = 50.0
    percentile_mode: bool = True

    def __post_init__(self):
        for name in ("tau", "eps_sens", "delta", "tau_ref"):
            v = getattr(self, name)
            if v < 0 or (self.percentile_mode and v > 100):
                raise ValueError(f"threshold {name}={v} out of range")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeatureStats:
    mean_abs_attr: np.ndarray
    mean_abs_attr_ref: np.ndarray
    mean_sensitivity: np.ndarray
    mean_instability: np.ndarray
    n_calibration: int

    @property
    def d(self) -> int:
        return len(self.mean_abs_attr)


@dataclass
class SpuriousSet:
    indices: List[int]
    irrelevant: List[int]
    sensitive: List[int]
    unstable: List[int]
    mask: np.ndarray                      # 1 = keep, 0 = spurious
    resolved: Optional[Thresholds] = None

    @classmethod
    def from_indices(cls, indices, d: int) -> "SpuriousSet":
        idx = sorted(int(j) for j in set(indices))
        mask = np.ones(d)
        mask[idx] = 0.0
        return cls(idx, idx, [], [], mask)

    @classmethod
    def empty(cls, d: int) -> "SpuriousSet":
        return cls.from_indices([], d)

    @property
    def indicator(self) -> np.ndarray:
        """1 on spurious features (the complement of ``mask``)."""
        return 1.0 - self.mask

    def __len__(self):
        return len(self.indices)

    def to_dict(self) -> dict:
        return {
            "thresholds": self.resolved.to_dict() if self.resolved else None,
            "irrelevant": list(self.irrelevant),
            "sensitive": list(self.sensitive),
            "unstable": list(self.unstable),
            "indices": list(self.indices),
            "mask": [int(v) for v in self.mask],
        }


def collect_stats(model: nn.ModelState, reference, X_cal, cfg: lime.LimeConfig, M: int = 5,
                  input_noise: float = 0.5, threads: int = 1) -> FeatureStats:
    """Average attribution, sensitivity and instability over calibration inputs.

    ``reference`` is either a relevance vector (1 on truly relevant features,
    used verbatim as the reference attribution) or a second ``ModelState``
    whose mean ``|beta|`` is computed the same way as the model's.
    Calibration row ``i`` uses LIME seed ``cfg.seed + i * (M + 1)``.
    Instability is the attribution variance over ``M`` re-runs on inputs
    jittered with std ``input_noise`` (0 gives pure LIME sampling variance).
    """
    X_cal = np.atleast_2d(np.asarray(X_cal, dtype=np.float64))
    n, d = X_cal.shape
    if n == 0:
        raise ValueError("calibration set is empty")
    ref_model = reference if isinstance(reference, nn.ModelState) else None

    def one(i):
        x = X_cal[i]
        c = cfg.with_seed(cfg.seed + i * (M + 1))
        attr = np.abs(lime.explain(model, x, c).beta)
        inst = (lime.attribution_variance(model, x, M, c, input_noise) if M >= 2
                else np.zeros(d))
        ref = np.abs(lime.explain(ref_model, x, c).beta) if ref_model is not None else None
        return attr, inst, ref

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, range(n)))
    else:
        rows = [one(i) for i in range(n)]

    y = nn.predict(model, X_cal)
    sens = np.abs(nn.logit_gradient(model, X_cal, y)).mean(axis=0)
    attr = np.mean([r[0] for r in rows], axis=0)
    inst = np.mean([r[1] for r in rows], axis=0)
    if ref_model is not None:
        ref = np.mean([r[2] for r in rows], axis=0)
    else:
        ref = np.asarray(reference, dtype=np.float64)
        if ref.shape != (d,):
            raise ValueError(f"reference relevance must have length {d}")
    return FeatureStats(attr, ref, sens, inst, n)


def flag_irrelevant(stats: FeatureStats, th: Thresholds) -> List[int]:
    hit = (stats.mean_abs_attr > th.tau) & (stats.mean_abs_attr_ref <= th.tau_ref)
    return [int(j) for j in np.flatnonzero(hit)]


def flag_sensitive(stats: FeatureStats, th: Thresholds) -> List[int]:
    hit = (stats.mean_sensitivity > th.eps_sens) & (stats.mean_abs_attr_ref <= th.tau_ref)
    return [int(j) for j in np.flatnonzero(hit)]


def flag_unstable(stats: FeatureStats, th: Thresholds) -> List[int]:
    return [int(j) for j in np.flatnonzero(stats.mean_instability > th.delta)]


def resolve_thresholds(stats: FeatureStats, th: Thresholds) -> Thresholds:
    """Turn percentile thresholds into absolute ones for these statistics."""
    if not th.percentile_mode:
        return th
    return Thresholds(
        tau=float(np.percentile(stats.mean_abs_attr, th.tau)),
        eps_sens=float(np.percentile(stats.mean_sensitivity, th.eps_sens)),
        delta=float(np.percentile(stats.mean_instability, th.delta)),
        tau_ref=float(np.percentile(stats.mean_abs_attr_ref, th.tau_ref)),
        percentile_mode=False,
    )


def identify_spurious(stats: FeatureStats, th: Thresholds) -> SpuriousSet:
    th = resolve_thresholds(stats, th)
    irr = flag_irrelevant(stats, th)
    sen = flag_sensitive(stats, th)
    uns = flag_unstable(stats, th)
    idx = sorted(set(irr) | set(sen) | set(uns))
    mask = np.ones(stats.d)
    mask[idx] = 0.0
    return SpuriousSet(idx, irr, sen, uns, mask, th)


def detection_scores(found, truth) -> dict:
    """Precision and recall of ``found`` against the planted index set."""
    found, truth = set(found), set(truth)
    tp = len(found & truth)
    precision = tp / len(found) if found else (1.0 if not truth else 0.0)
    recall = tp / len(truth) if truth else 1.0
    return {"precision": precision, "recall": recall, "true_positives": tp,
            "n_flagged": len(found), "n_planted": len(truth)}
