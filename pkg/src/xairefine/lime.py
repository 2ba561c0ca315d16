"""Local surrogate explanations over binary feature-group masks.

Perturbations switch groups of features between their value in ``x`` and a
baseline, samples are weighted by an exponential kernel on the squared
distance to ``x``, and a weighted ridge regression on the mask bits gives the
attribution. The regression target is the logit of the class the model
predicts at ``x``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from . import nn
from .errors import DegenerateDesignError, InputError


@dataclass(frozen=True)
class LimeConfig:
    """Sampling and fitting options.

    ``n_samples`` and ``kernel_width`` may be left as ``None`` and are then
    resolved per input: ``max(200, 4 * groups)`` samples and a width of
    ``0.75 * sqrt(d) * feature_std``.
    """

    n_samples: Optional[int] = None
    kernel_width: Optional[float] = None
    baseline_value: Union[float, np.ndarray] = 0.0
    ridge: float = 1e-6
    group_size: int = 1
    feature_std: float = 1.0
    seed: int = 0

    @classmethod
    def for_data(cls, X: np.ndarray, **kwargs) -> "LimeConfig":
        """Baseline = per-feature training mean; width scaled by the mean feature std."""
        X = np.asarray(X, dtype=np.float64)
        kwargs.setdefault("baseline_value", X.mean(axis=0))
        kwargs.setdefault("feature_std", float(X.std(axis=0).mean()))
        return cls(**kwargs)

    def n_groups(self, d: int) -> int:
        return -(-d // self.group_size)

    def resolved(self, d: int) -> "LimeConfig":
        if self.group_size < 1:
            raise InputError("group_size must be >= 1")
        G = self.n_groups(d)
        n = self.n_samples if self.n_samples is not None else max(200, 4 * G)
        width = self.kernel_width
        if width is None:
            width = 0.75 * np.sqrt(d) * self.feature_std
        if width <= 0:
            raise InputError("kernel_width must be positive")
        if n < G + 2:
            raise InputError(f"n_samples={n} too small for {G} groups (need >= {G + 2})")
        if self.ridge < 0:
            raise InputError("ridge must be non-negative")
        return replace(self, n_samples=int(n), kernel_width=float(width))

    def with_seed(self, seed: int) -> "LimeConfig":
        return replace(self, seed=int(seed))


@dataclass
class Attribution:
    beta0: float
    beta: np.ndarray          # per feature (group coefficient broadcast)
    r2: float
    group_beta: Optional[np.ndarray] = None

    @property
    def importance(self) -> np.ndarray:
        return np.abs(self.beta)

    def to_dict(self, input_index=None) -> dict:
        out = {"beta0": float(self.beta0), "beta": [float(b) for b in self.beta],
               "r2": float(self.r2)}
        if input_index is not None:
            out = {"input_index": int(input_index), **out}
        return out


def _group_index(d: int, group_size: int) -> np.ndarray:
    return np.arange(d) // group_size


def sample_perturbations(x, cfg: LimeConfig):
    """Return ``(masks, Z)``: ``[N, G]`` keep-bits and the ``[N, d]`` perturbed inputs.

    Row 0 keeps every group.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    cfg = cfg.resolved(d)
    G = cfg.n_groups(d)
    rng = np.random.default_rng(cfg.seed)
    masks = (rng.random((cfg.n_samples, G)) < 0.5).astype(np.float64)
    masks[0] = 1.0
    return masks, apply_group_mask(x, masks, cfg)


def apply_group_mask(x, masks, cfg: LimeConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    masks = np.atleast_2d(masks)
    keep = masks[:, _group_index(x.shape[0], cfg.group_size)] > 0
    baseline = np.broadcast_to(np.asarray(cfg.baseline_value, dtype=np.float64), x.shape)
    return np.where(keep, x[None, :], baseline[None, :])


def kernel_weight(x, z, sigma: float):
    """``exp(-||x - z||^2 / sigma^2)``; ``z`` may be a single point or rows."""
    if sigma <= 0:
        raise InputError("kernel width must be positive")
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    sq = np.sum((z - x) ** 2, axis=-1)
    return np.exp(-sq / sigma**2)


def fit_surrogate(masks, f_out, weights, ridge: float = 0.0, d: Optional[int] = None,
                  group_size: int = 1) -> Attribution:
    """Weighted ridge fit of ``f_out ~ beta0 + masks @ beta`` via the normal equations.

    The intercept is not penalised. ``d``/``group_size`` control how the group
    coefficients are broadcast back to features (default: one feature per
    mask column).
    """
    masks = np.asarray(masks, dtype=np.float64)
    f_out = np.asarray(f_out, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    N, G = masks.shape
    if ridge == 0 and len(np.unique(masks, axis=0)) < 2:
        raise DegenerateDesignError("need at least two distinct masks")
    A = np.hstack([np.ones((N, 1)), masks])
    Aw = A * w[:, None]
    normal = A.T @ Aw
    if ridge == 0:
        if np.linalg.matrix_rank(normal) < G + 1:
            raise DegenerateDesignError("singular normal matrix; set ridge > 0")
    else:
        normal = normal + ridge * np.diag(np.r_[0.0, np.ones(G)])
    coef = np.linalg.solve(normal, Aw.T @ f_out)

    resid = f_out - A @ coef
    mean_w = np.sum(w * f_out) / np.sum(w)
    ss_tot = np.sum(w * (f_out - mean_w) ** 2)
    if ss_tot <= 1e-24 * max(1.0, float(np.sum(w * f_out**2))):
        r2 = 0.0
    else:
        r2 = float(1.0 - np.sum(w * resid**2) / ss_tot)

    group_beta = coef[1:]
    if d is None:
        d = G * group_size
    beta = group_beta[_group_index(d, group_size)]
    return Attribution(float(coef[0]), beta, r2, group_beta)


def explain(model: nn.ModelState, x, cfg: LimeConfig, target: Optional[int] = None) -> Attribution:
    """Attribution of the predicted-class logit at ``x`` (or of ``target``)."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    cfg = cfg.resolved(d)
    if target is None:
        target = int(np.argmax(nn.forward(model, x)))
    masks, Z = sample_perturbations(x, cfg)
    f_out = nn.forward(model, Z)[:, target]
    w = kernel_weight(x, Z, cfg.kernel_width)
    return fit_surrogate(masks, f_out, w, cfg.ridge, d=d, group_size=cfg.group_size)


def attribution_variance(model: nn.ModelState, x, M: int, cfg: LimeConfig,
                         input_noise: float = 0.0) -> np.ndarray:
    """Population variance of each ``beta_j`` over ``M`` explanations.

    Run ``r`` (``r = 1..M``) uses LIME seed ``cfg.seed + r``. With
    ``input_noise > 0`` it also explains a jittered copy ``x + N(0, input_noise^2)``
    drawn from the same seed, so the variance reflects attribution changes
    under small input perturbations and not only sampling noise. The target
    logit stays the class predicted at ``x``.
    """
    if M < 2:
        raise InputError("attribution_variance needs M >= 2 repeats")
    if input_noise < 0:
        raise InputError("input_noise must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    target = int(np.argmax(nn.forward(model, x)))
    betas = []
    for r in range(1, M + 1):
        seed = cfg.seed + r
        xr = x
        if input_noise > 0:
            xr = x + np.random.default_rng([seed, 1]).normal(0.0, input_noise, size=x.shape)
        betas.append(explain(model, xr, cfg.with_seed(seed), target).beta)
    return np.stack(betas).var(axis=0)


def explain_many(model, X, cfg: LimeConfig, seeds=None, threads: int = 1):
    """Explain each row of ``X``; ``seeds[i]`` overrides the seed for row ``i``."""
    X = np.asarray(X, dtype=np.float64)
    seeds = [cfg.seed] * len(X) if seeds is None else list(seeds)

    def one(i):
        return explain(model, X[i], cfg.with_seed(seeds[i]))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(len(X))))
    return [one(i) for i in range(len(X))]
