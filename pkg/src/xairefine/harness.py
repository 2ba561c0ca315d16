"""End-to-end baseline-vs-refined experiment and report emission."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from . import __version__, attacks, certifier, datagen, lime, nn, refinement, spurious
from .config import ExperimentConfig
from .errors import ConfigError

log = logging.getLogger(__name__)

SCHEMA = 1


class ExperimentFailed(RuntimeError):
    """A pipeline stage raised; ``report`` holds everything computed before it."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


def _jsonable(obj):
    """Recursively convert numpy scalars/arrays and drop non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


# ---------------------------------------------------------------------------
# pipeline pieces (also used by the CLI subcommands)


def load_data(cfg: ExperimentConfig):
    """Returns ``(train, test, val, planted spec or None)``."""
    d = cfg["data"]
    if d["train_path"] is not None:
        train_full = datagen.load_split(d["train_path"])
        test = datagen.load_split(d["test_path"])
        rng = np.random.default_rng(cfg.stage_seed("val"))
        order = rng.permutation(train_full.n)
        n_val = min(d["n_val"], train_full.n // 5)
        val = train_full.subset(np.sort(order[:n_val]))
        train = train_full.subset(np.sort(order[n_val:]))
        return train, test, val, None
    spec = cfg.planted_spec()
    train, test, _ = datagen.make_planted(spec, d["n_train"], d["n_test"], cfg.stage_seed("data"))
    # validation rows follow the test-time distribution but are a separate draw
    _, val, _ = datagen.make_planted(spec, spec.K, d["n_val"], cfg.stage_seed("val"))
    return train, test, val, spec


def refinement_config(cfg: ExperimentConfig, **overrides) -> refinement.RefinementConfig:
    r = cfg["refinement"]
    th = r["thresholds"]
    kw = dict(
        lam=r["lambda"], alpha=r["alpha"], eps_adv=r["eps_adv"], lr=r["lr"],
        epochs_per_iter=r["epochs_per_iter"], batch_size=r["batch_size"],
        max_iters=max(1, r["max_iters"]), tol=r["tol"], patience=r["patience"],
        thresholds=spurious.Thresholds(th["tau"], th["eps_sens"], th["delta"], th["tau_ref"],
                                       th["percentile_mode"]),
        lime_repeats=r["lime_repeats"], instability_noise=r["instability_noise"],
        calibration_size=r["calibration_size"], pgd_steps=r["pgd_steps"],
        alignment_points=r["alignment_points"], reg_mode=r["reg_mode"],
        seed=cfg.stage_seed("refine"),
    )
    kw.update(overrides)
    return refinement.RefinementConfig(**kw)


def lime_config(cfg: ExperimentConfig, train: datagen.DatasetSplit) -> lime.LimeConfig:
    lc = cfg["refinement"]["lime"]
    return lime.LimeConfig.for_data(train.inputs, n_samples=lc["n_samples"],
                                    kernel_width=lc["kernel_width"], ridge=lc["ridge"],
                                    group_size=lc["group_size"], seed=cfg.stage_seed("lime"))


def train_baseline(cfg: ExperimentConfig, train) -> nn.ModelState:
    m = cfg["model"]
    model = nn.init_model(train.d, m["hidden"], train.num_classes, cfg.stage_seed("init"))
    return refinement.train_standard(model, train, m["epochs"], m["lr"], m["batch_size"],
                                     cfg.stage_seed("baseline"))


def build_reference(cfg: ExperimentConfig, train, spec):
    r = cfg["refinement"]
    if r["reference"] == "oracle":
        if spec is None:
            raise ConfigError("oracle reference needs planted data", "refinement.reference")
        return datagen.relevance_indicator(spec)
    m = cfg["model"]
    model = nn.init_model(train.d, m["hidden"], train.num_classes, cfg.stage_seed("ref_init"))
    return refinement.train_adversarial(model, train, r["reference_epochs"], r["eps_adv"],
                                        m["lr"], m["batch_size"], cfg.stage_seed("reference"))


def attack_sweep(cfg: ExperimentConfig, model, test) -> list:
    a = cfg["attacks"]
    rows = []
    for eps in a["fgsm_eps"]:
        res = attacks.evaluate(model, test, attacks.AttackSpec("fgsm", float(eps)))
        rows.append({"attack": "fgsm", "eps": float(eps), "accuracy": res.accuracy})
    for eps in a["pgd_eps"]:
        spec = attacks.AttackSpec("pgd", float(eps), steps=a["pgd_steps"],
                                  step_size=a["pgd_step_size"],
                                  random_start=a["pgd_random_start"], seed=cfg.stage_seed("pgd"))
        rows.append({"attack": "pgd", "eps": float(eps),
                     "accuracy": attacks.evaluate(model, test, spec).accuracy})
    return rows


def corruption_grid(cfg: ExperimentConfig, model, test) -> attacks.CorruptionGrid:
    c = cfg["corruption"]
    eps = c["eps"] if c["eps"] is not None else cfg["attacks"]["fgsm_eps"][0]
    if c["attack"] == "pgd":
        a = cfg["attacks"]
        spec = attacks.AttackSpec("pgd", float(eps), steps=a["pgd_steps"],
                                  step_size=a["pgd_step_size"],
                                  random_start=a["pgd_random_start"], seed=cfg.stage_seed("pgd"))
    else:
        spec = attacks.AttackSpec(c["attack"], float(eps) if c["attack"] != "none" else 0.0)
    return attacks.eval_corruption_grid(model, test, c["kinds"], c["severities"], spec,
                                        seed=cfg.stage_seed("corruption") % 100000)


def certify_points(cfg: ExperimentConfig, test) -> np.ndarray:
    n = min(cfg["certifier"]["n_points"], test.n)
    rng = np.random.default_rng(cfg.stage_seed("certify_points"))
    return np.sort(rng.choice(test.n, size=n, replace=False))


def certify(cfg: ExperimentConfig, model, test, spurious_set, lime_cfg, idx=None):
    """Unmasked bounds (audited empirically when enabled) and masked bounds."""
    ce = cfg["certifier"]
    idx = certify_points(cfg, test) if idx is None else idx
    X, y = test.inputs[idx], test.labels[idx]
    common = dict(q=ce["q"], resolution=ce["resolution"], eps_max=ce["eps_max"],
                  seed=cfg.stage_seed("certify"), threads=cfg["threads"])
    plain = certifier.certify_split(model, X, y, None, with_empirical=ce["with_empirical"],
                                    lime_cfg=lime_cfg if ce["alignment"] else None, **common)
    masked = certifier.certify_split(model, X, y, spurious_set, **common)
    for rec, i in zip(plain.records + masked.records, list(idx) * 2):
        rec.index = int(i)
    return plain, masked


def spurious_grad_sq(model, split, indices) -> float:
    """Mean over points and ``indices`` of the squared true-class logit gradient."""
    if len(indices) == 0:
        return 0.0
    g = nn.logit_gradient(model, split.inputs, split.labels)
    return float(np.mean(g[:, list(indices)] ** 2))


def _model_section(cfg, model, test, train, reference, rcfg, lime_cfg, truth, planted_idx):
    sec = {"clean": attacks.evaluate(model, test).to_dict()}
    sec["attacks"] = attack_sweep(cfg, model, test)
    ss = refinement.detect(model, reference, train, rcfg, lime_cfg, cfg["threads"])
    det = ss.to_dict()
    if truth is not None:
        det["scores"] = spurious.detection_scores(ss.indices, truth)
    sec["detection"] = det
    sec["spurious_grad_sq"] = spurious_grad_sq(model, test, planted_idx)
    return sec, ss


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Run the full pipeline and return the report dictionary.

    Raises :class:`ExperimentFailed` (with the partial report attached) if a
    stage fails.
    """
    t0 = time.perf_counter()
    report = {"schema": SCHEMA, "version": __version__, "complete": False, "error": None,
              "config": cfg.echo()}
    stage = "data"
    try:
        train, test, val, spec = load_data(cfg)
        truth = list(spec.spurious_indices) if spec is not None else None
        report["data"] = {"n_train": train.n, "n_test": test.n, "n_val": val.n, "d": train.d,
                          "K": train.num_classes, "planted_spurious": truth,
                          "core": list(spec.core_indices) if spec is not None else None}
        stage = "baseline"
        baseline = train_baseline(cfg, train)
        stage = "reference"
        reference = build_reference(cfg, train, spec)
        lime_cfg = lime_config(cfg, train)
        rcfg = refinement_config(cfg)

        stage = "refine"
        ckpt = None
        if out_dir is not None and cfg["output"]["checkpoints"]:
            ckpt = Path(out_dir) / "checkpoints"
            ckpt.mkdir(parents=True, exist_ok=True)
            nn.save_model(baseline, ckpt / "model_iter0.json")
        if cfg["refinement"]["max_iters"] > 0:
            try:
                refined, trace = refinement.refine(baseline, train, val, reference, rcfg,
                                                   lime_cfg, ckpt, cfg["threads"])
            except Exception as exc:
                if getattr(exc, "trace", None) is not None:
                    report["trace"] = exc.trace.to_dict()
                raise
        else:
            refined, trace = baseline, refinement.RefinementTrace()
        report["trace"] = trace.to_dict()

        stage = "evaluate"
        planted_idx = truth if truth is not None else []
        report["baseline"], base_ss = _model_section(cfg, baseline, test, train, reference,
                                                     rcfg, lime_cfg, truth, planted_idx)
        if refined is baseline:
            report["refined"], ref_ss = report["baseline"], base_ss
        else:
            report["refined"], ref_ss = _model_section(cfg, refined, test, train, reference,
                                                       rcfg, lime_cfg, truth, planted_idx)

        if cfg["ablation"]["lambda_zero_control"] and cfg["refinement"]["max_iters"] > 0:
            stage = "ablation"
            control, _ = refinement.refine(baseline, train, val, reference,
                                           refinement_config(cfg, lam=0.0), lime_cfg,
                                           None, cfg["threads"])
            report["ablation"] = {
                "lambda_zero_control": {
                    "clean": attacks.evaluate(control, test).accuracy,
                    "attacks": attack_sweep(cfg, control, test),
                    "spurious_grad_sq": spurious_grad_sq(control, test, planted_idx),
                }
            }

        if cfg["corruption"]["enabled"]:
            stage = "corruption"
            for name, model in (("baseline", baseline), ("refined", refined)):
                report[name]["corruption"] = corruption_grid(cfg, model, test).to_dict()

        if cfg["certifier"]["enabled"]:
            stage = "certify"
            idx = certify_points(cfg, test)
            for name, model, ss in (("baseline", baseline, base_ss),
                                    ("refined", refined, ref_ss)):
                plain, masked = certify(cfg, model, test, ss, lime_cfg, idx)
                report[name]["bounds"] = plain.to_dict()
                report[name]["bounds_masked"] = masked.to_dict()
                report[name]["alignment"] = plain.summary()["mean_alignment"]

        report["claims"] = summarize_claims(report)
        report["complete"] = True
    except Exception as exc:
        report["error"] = f"stage {stage}: {type(exc).__name__}: {exc}"
        report["wall_clock"] = time.perf_counter() - t0
        raise ExperimentFailed(report["error"], _jsonable(report)) from exc
    report["wall_clock"] = time.perf_counter() - t0
    return _jsonable(report)


def summarize_claims(report: dict) -> dict:
    """Directional baseline-vs-refined comparisons computed from the report."""
    base, ref = report["baseline"], report["refined"]
    out = {"attack_gaps": []}
    for b, r in zip(base["attacks"], ref["attacks"]):
        out["attack_gaps"].append({"attack": b["attack"], "eps": b["eps"],
                                   "baseline": b["accuracy"], "refined": r["accuracy"],
                                   "gap": r["accuracy"] - b["accuracy"]})
    if "corruption" in base and "corruption" in ref:
        out["corruption"] = {"baseline_mean": base["corruption"]["mean"],
                             "refined_mean": ref["corruption"]["mean"],
                             "baseline_std": base["corruption"]["std"],
                             "refined_std": ref["corruption"]["std"]}
    if "bounds" in base and "bounds" in ref:
        out["bounds"] = {
            "baseline_mean_delta_min": base["bounds"]["summary"]["mean_delta_min"],
            "refined_mean_delta_min": ref["bounds"]["summary"]["mean_delta_min"],
            "baseline_mean_delta_min_masked": base["bounds_masked"]["summary"]["mean_delta_min"],
            "refined_mean_delta_min_masked": ref["bounds_masked"]["summary"]["mean_delta_min"],
        }
    if "ablation" in report:
        ctl = report["ablation"]["lambda_zero_control"]["spurious_grad_sq"]
        out["regularizer"] = {"refined_grad_sq": ref["spurious_grad_sq"],
                              "lambda_zero_grad_sq": ctl,
                              "ratio": ref["spurious_grad_sq"] / ctl if ctl > 0 else None}
    return out


# ---------------------------------------------------------------------------
# output


def report_bytes(report: dict, include_timing: bool = True) -> bytes:
    obj = report if include_timing else {k: v for k, v in report.items() if k != "wall_clock"}
    return json.dumps(obj, indent=2, allow_nan=False).encode()


def emit_report(report: dict, json_path, csv_dir) -> dict:
    """Write the JSON report and plot-ready CSV files; returns the written paths."""
    json_path, csv_dir = Path(json_path), Path(csv_dir)
    try:
        json_path.parent.mkdir(parents=True, exist_ok=True)
        csv_dir.mkdir(parents=True, exist_ok=True)
        json_path.write_bytes(report_bytes(report))
        paths = {"report": str(json_path)}

        if "baseline" in report and "attacks" in report["baseline"]:
            p = csv_dir / "attack_sweep.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["eps", "attack", "model", "accuracy"])
                for name in ("baseline", "refined"):
                    for row in report[name]["attacks"]:
                        w.writerow([repr(row["eps"]), row["attack"], name, repr(row["accuracy"])])
            paths["attack_sweep"] = str(p)

        if "corruption" in report.get("baseline", {}):
            p = csv_dir / "corruption_grid.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["corruption", "severity", "attack", "eps", "model", "accuracy"])
                for name in ("baseline", "refined"):
                    grid = report[name]["corruption"]
                    for cell in grid["cells"]:
                        w.writerow([cell["corruption"], cell["severity"], grid["attack"]["kind"],
                                    repr(grid["attack"]["eps"]), name, repr(cell["accuracy"])])
            paths["corruption_grid"] = str(p)

        if "bounds" in report.get("baseline", {}):
            p = csv_dir / "bounds.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                fields = ["index", "label", "predicted", "runner_up", "margin", "l_eff",
                          "delta_min", "delta_min_as_written", "unbounded", "max_masked_grad",
                          "alignment", "delta_emp", "emp_found", "sound"]
                w.writerow(["model", "mask", *fields])
                for name in ("baseline", "refined"):
                    for key, tag in (("bounds", "none"), ("bounds_masked", "spurious")):
                        for rec in report[name][key]["records"]:
                            w.writerow([name, tag, *["" if rec[f] is None else rec[f]
                                                     for f in fields]])
            paths["bounds"] = str(p)
    except OSError as exc:
        raise OSError(f"could not write report files ({json_path}, {csv_dir}): {exc}") from exc
    return paths
