"""Attribution-guided refinement: masking, sensitivity penalty, FGSM augmentation.

One refinement iteration collects attribution statistics, flags spurious
features, and retrains on

    L_total = L_task(masked x) + alpha * L_task(fgsm(masked x)) + lambda * L_reg

where ``L_reg`` is the mean squared true-class logit gradient over the flagged
features. The outer loop repeats until FGSM accuracy on the evaluation split
stops moving or the iteration budget runs out, and returns the iterate with
the best FGSM accuracy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import lime, nn
from .attacks import AttackSpec, evaluate, fgsm
from .datagen import DOMAIN_WIDTH, DatasetSplit
from .errors import InputError, NumericError, TrainingError
from .spurious import SpuriousSet, Thresholds, collect_stats, identify_spurious

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RefinementConfig:
    lam: float = 1.0
    alpha: float = 1.0
    eps_adv: float = 0.05 * DOMAIN_WIDTH
    lr: float = 0.05
    epochs_per_iter: int = 10
    batch_size: int = 64
    max_iters: int = 5
    tol: float = 0.005             # accuracy as a fraction: 0.005 == 0.5 points
    patience: int = 2
    thresholds: Thresholds = Thresholds()
    lime_repeats: int = 5
    instability_noise: float = 0.5
    calibration_size: int = 64
    eval_eps: Optional[float] = None    # defaults to eps_adv
    pgd_steps: int = 10
    alignment_points: int = 16
    reg_mode: str = "exact"        # "exact" | "fd"
    seed: int = 0

    def __post_init__(self):
        for name in ("lam", "alpha", "eps_adv"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be non-negative")
        if self.max_iters < 1:
            raise InputError("max_iters must be >= 1")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs_per_iter < 0:
            raise InputError("lr, batch_size must be positive and epochs non-negative")
        if self.reg_mode not in ("exact", "fd"):
            raise InputError("reg_mode must be 'exact' or 'fd'")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["thresholds"] = self.thresholds.to_dict()
        return out


@dataclass
class IterationRecord:
    iteration: int
    n_spurious: int
    spurious: List[int]
    clean_acc: float
    fgsm_acc: float
    pgd_acc: float
    mean_alignment: Optional[float]
    loss_curve: List[float]


@dataclass
class RefinementTrace:
    records: List[IterationRecord] = field(default_factory=list)
    initial_robust_acc: float = float("nan")
    best_iteration: int = 0
    stopped_early: bool = False
    error: Optional[str] = None
    spurious_sets: List[SpuriousSet] = field(default_factory=list, repr=False)

    def __len__(self):
        return len(self.records)

    def to_dict(self) -> dict:
        return {
            "initial_robust_acc": self.initial_robust_acc,
            "best_iteration": self.best_iteration,
            "stopped_early": self.stopped_early,
            "error": self.error,
            "records": [asdict(r) for r in self.records],
            "spurious_sets": [s.to_dict() for s in self.spurious_sets],
        }


def mask_input(x, m, baseline=0.0) -> np.ndarray:
    """Keep features where ``m == 1``; masked positions take the baseline value."""
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m)
    if m.shape[-1] != x.shape[-1]:
        raise InputError(f"mask length {m.shape[-1]} != input length {x.shape[-1]}")
    base = np.broadcast_to(np.asarray(baseline, dtype=np.float64), x.shape)
    return np.where(m > 0, x, base)


def _reg_coef(spurious: SpuriousSet, n: int) -> Optional[np.ndarray]:
    if len(spurious) == 0:
        return None
    return spurious.indicator / (len(spurious) * n)


def sensitivity_reg(model: nn.ModelState, X, y, spurious: SpuriousSet) -> float:
    """Mean over the batch of the squared true-class logit gradient, averaged over spurious features."""
    X = np.atleast_2d(X)
    coef = _reg_coef(spurious, X.shape[0])
    if coef is None:
        return 0.0
    return nn.input_gradient_penalty(model, X, y, coef).loss


def sensitivity_reg_grads(model, X, y, spurious: SpuriousSet, mode="exact", h=1e-5):
    """Parameter gradient of :func:`sensitivity_reg`.

    ``mode="fd"`` differentiates the exact penalty value by central
    differences, one parameter at a time (slow; debugging only).
    """
    X = np.atleast_2d(X)
    coef = _reg_coef(spurious, X.shape[0])
    if coef is None:
        return None
    if mode == "exact":
        return nn.input_gradient_penalty(model, X, y, coef)
    value = nn.input_gradient_penalty(model, X, y, coef).loss
    dW, db = [], []
    for li in range(model.n_layers):
        for store, arrays in ((dW, model.weights), (db, model.biases)):
            P = arrays[li]
            G = np.zeros_like(P)
            for idx in np.ndindex(P.shape):
                orig = P[idx]
                P[idx] = orig + h
                up = nn.input_gradient_penalty(model, X, y, coef).loss
                P[idx] = orig - h
                down = nn.input_gradient_penalty(model, X, y, coef).loss
                P[idx] = orig
                G[idx] = (up - down) / (2 * h)
            store.append(G)
    return nn.GradientBundle(dW, db, None, value)


def composite_loss(model: nn.ModelState, X, y, spurious: SpuriousSet, cfg: RefinementConfig,
                   baseline=0.0):
    """Value, per-term breakdown and parameter gradients of the composite objective.

    Returns ``(total, terms, grads)`` with ``terms`` holding ``task``, ``adv``
    and ``reg``. The FGSM point is built from the masked input with the
    current parameters held fixed.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y)
    Xm = mask_input(X, spurious.mask, baseline) if len(spurious) else X
    grads = nn.backward(model, Xm, y)
    terms = {"task": grads.loss, "adv": 0.0, "reg": 0.0}
    if cfg.alpha > 0:
        Xadv = fgsm(model, Xm, y, cfg.eps_adv)
        g_adv = nn.backward(model, Xadv, y)
        terms["adv"] = g_adv.loss
        grads = grads + g_adv.scaled(cfg.alpha)
    if cfg.lam > 0 and len(spurious):
        g_reg = sensitivity_reg_grads(model, Xm, y, spurious, cfg.reg_mode)
        terms["reg"] = g_reg.loss
        grads = grads + g_reg.scaled(cfg.lam)
    total = terms["task"] + cfg.alpha * terms["adv"] + cfg.lam * terms["reg"]
    grads.loss = total
    return total, terms, grads


def train_epochs(model: nn.ModelState, train: DatasetSplit, spurious: SpuriousSet,
                 cfg: RefinementConfig, baseline=0.0, seed: Optional[int] = None,
                 iteration: int = 0):
    """Mini-batch SGD on the composite loss. Returns ``(model, per-epoch mean loss)``."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    curve = []
    n = train.n
    for epoch in range(cfg.epochs_per_iter):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                loss, _, grads = composite_loss(model, train.inputs[idx], train.labels[idx],
                                                spurious, cfg, baseline)
            except NumericError as exc:
                raise TrainingError(f"iteration {iteration}, epoch {epoch}: {exc}",
                                    iteration) from exc
            if not np.isfinite(loss):
                raise TrainingError(f"iteration {iteration}, epoch {epoch}: non-finite loss",
                                    iteration)
            model = nn.sgd_step(model, grads, cfg.lr)
            total += loss * len(idx)
        curve.append(total / n)
    return model, curve


def train_standard(model, train: DatasetSplit, epochs: int, lr: float = 0.05,
                   batch_size: int = 64, seed: int = 0):
    """Plain cross-entropy SGD (no mask, no penalty, no adversarial term)."""
    cfg = RefinementConfig(lam=0.0, alpha=0.0, lr=lr, epochs_per_iter=epochs,
                           batch_size=batch_size, seed=seed)
    return train_epochs(model, train, SpuriousSet.empty(train.d), cfg)[0]


def train_adversarial(model, train: DatasetSplit, epochs: int, eps: float, lr: float = 0.05,
                      batch_size: int = 64, seed: int = 0):
    """FGSM adversarial training (alpha=1, lambda=0); used for the robust reference."""
    cfg = RefinementConfig(lam=0.0, alpha=1.0, eps_adv=eps, lr=lr, epochs_per_iter=epochs,
                           batch_size=batch_size, seed=seed)
    return train_epochs(model, train, SpuriousSet.empty(train.d), cfg)[0]


def _mean_alignment(model, X, lime_cfg, seed) -> Optional[float]:
    from .certifier import alignment, normalized_attribution
    vals = []
    for i, x in enumerate(X):
        y = int(nn.predict(model, x))
        beta = lime.explain(model, x, lime_cfg.with_seed(seed + i)).beta
        g = nn.logit_gradient(model, x, y)
        try:
            vals.append(alignment(g, normalized_attribution(beta)))
        except ValueError:
            continue
    return float(np.mean(vals)) if vals else None


def calibration_indices(n: int, size: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([int(seed), 0])
    return np.sort(rng.choice(n, size=min(size, n), replace=False))


def detect(model: nn.ModelState, reference, train: DatasetSplit, cfg: RefinementConfig,
           lime_cfg: lime.LimeConfig, threads: int = 1) -> SpuriousSet:
    """Flag spurious features of ``model`` on the configured calibration subset."""
    idx = calibration_indices(train.n, cfg.calibration_size, cfg.seed)
    stats = collect_stats(model, reference, train.inputs[idx], lime_cfg, cfg.lime_repeats,
                          cfg.instability_noise, threads)
    return identify_spurious(stats, cfg.thresholds)


def refine(model: nn.ModelState, train: DatasetSplit, eval_split: DatasetSplit, reference,
           cfg: RefinementConfig, lime_cfg: lime.LimeConfig, checkpoint_dir=None,
           threads: int = 1, trace: Optional[RefinementTrace] = None):
    """Iterate detect -> retrain -> evaluate. Returns ``(best model, trace)``.

    ``reference`` is a relevance vector or a reference model (see
    :func:`collect_stats`). ``eval_split`` drives the convergence metric (FGSM
    accuracy at ``cfg.eval_eps``). If a stage fails, the exception carries the
    partial trace as ``exc.trace``.
    """
    trace = RefinementTrace() if trace is None else trace
    eval_eps = cfg.eps_adv if cfg.eval_eps is None else cfg.eval_eps
    fgsm_spec = AttackSpec("fgsm", eval_eps)
    pgd_spec = AttackSpec("pgd", eval_eps, steps=cfg.pgd_steps, seed=cfg.seed)
    baseline = lime_cfg.baseline_value
    align_idx = calibration_indices(eval_split.n, cfg.alignment_points, cfg.seed + 1)

    prev = evaluate(model, eval_split, fgsm_spec).accuracy
    trace.initial_robust_acc = prev
    best_model, best_acc = model, -1.0
    quiet = 0
    try:
        for it in range(1, cfg.max_iters + 1):
            spurious = detect(model, reference, train, cfg, lime_cfg, threads)
            trace.spurious_sets.append(spurious)
            model, curve = train_epochs(model, train, spurious, cfg, baseline,
                                        seed=cfg.seed + it, iteration=it)
            clean = evaluate(model, eval_split).accuracy
            rob = evaluate(model, eval_split, fgsm_spec).accuracy
            pgd_acc = evaluate(model, eval_split, pgd_spec).accuracy
            align = (_mean_alignment(model, eval_split.inputs[align_idx], lime_cfg, cfg.seed)
                     if cfg.alignment_points else None)
            trace.records.append(IterationRecord(it, len(spurious), list(spurious.indices),
                                                 clean, rob, pgd_acc, align, curve))
            log.info("iteration %d: %d spurious, clean %.4f, fgsm %.4f, pgd %.4f",
                     it, len(spurious), clean, rob, pgd_acc)
            if checkpoint_dir is not None:
                nn.save_model(model, Path(checkpoint_dir) / f"model_iter{it}.json")
            if rob > best_acc:
                best_model, best_acc, trace.best_iteration = model, rob, it
            quiet = quiet + 1 if abs(rob - prev) < cfg.tol else 0
            prev = rob
            if quiet >= cfg.patience and it < cfg.max_iters:
                trace.stopped_early = True
                break
    except Exception as exc:
        trace.error = f"{type(exc).__name__}: {exc}"
        exc.trace = trace
        raise
    return best_model, trace
