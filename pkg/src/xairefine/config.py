"""Experiment configuration: JSON file -> fully defaulted, validated config.

Every key has a default in :data:`DEFAULTS`; unknown keys are rejected. The
merged dictionary is echoed verbatim into the report, so a run can be
reproduced from its own report.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

from .datagen import DOMAIN_WIDTH, CorruptionKind, PlantedSpec
from .errors import ConfigError

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "data": {
        "d": 64,
        "K": 2,
        "core_indices": list(range(8)),
        "spurious_indices": list(range(8, 13)),
        "train_correlation": 0.95,
        "test_correlation": 0.5,
        "signal_scale": 2.0,
        "noise_std": 1.0,
        "n_train": 4000,
        "n_test": 2000,
        "n_val": 1000,
        "train_path": None,
        "test_path": None,
    },
    "model": {
        "hidden": [32],
        "epochs": 20,
        "lr": 0.05,
        "batch_size": 64,
    },
    "refinement": {
        "lambda": 1.0,
        "alpha": 1.0,
        "eps_adv": 0.05 * DOMAIN_WIDTH,
        "lr": 0.05,
        "epochs_per_iter": 10,
        "batch_size": 64,
        "max_iters": 5,
        "tol": 0.005,
        "patience": 2,
        "reference": "oracle",
        "reference_epochs": 20,
        "calibration_size": 64,
        "lime_repeats": 5,
        "instability_noise": 0.5,
        "pgd_steps": 10,
        "alignment_points": 16,
        "reg_mode": "exact",
        "thresholds": {
            "tau": 90.0,
            "eps_sens": 90.0,
            "delta": 90.0,
            "tau_ref": 50.0,
            "percentile_mode": True,
        },
        "lime": {
            "n_samples": None,
            "kernel_width": None,
            "ridge": 1e-6,
            "group_size": 1,
        },
    },
    "attacks": {
        "fgsm_eps": [0.04, 0.08, 0.12],
        "pgd_eps": [0.04, 0.08, 0.12],
        "pgd_steps": 10,
        "pgd_step_size": None,
        "pgd_random_start": True,
    },
    "corruption": {
        "enabled": True,
        "kinds": [k.value for k in CorruptionKind],
        "severities": [1, 2, 3, 4, 5],
        "attack": "fgsm",
        "eps": None,
    },
    "certifier": {
        "enabled": True,
        "n_points": 100,
        "q": 1,
        "with_empirical": True,
        "resolution": 1e-3,
        "eps_max": DOMAIN_WIDTH / 2,
        "alignment": True,
    },
    "ablation": {
        "lambda_zero_control": True,
    },
    "output": {
        "dir": "out",
        "checkpoints": True,
    },
}

# keys whose value may be null in addition to the default's type
_NULLABLE = {"data.train_path", "data.test_path", "refinement.lime.n_samples",
             "refinement.lime.kernel_width", "attacks.pgd_step_size", "corruption.eps"}
_NUMBER_FOR_NULL = {"refinement.lime.n_samples": int, "refinement.lime.kernel_width": float,
                    "attacks.pgd_step_size": float, "corruption.eps": float}


def _merge(defaults, user, path=""):
    if not isinstance(user, dict):
        raise ConfigError("expected an object", path or "<root>")
    out = copy.deepcopy(defaults)
    for key, val in user.items():
        kp = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError("unknown key", kp)
        ref = defaults[key]
        if isinstance(ref, dict):
            out[key] = _merge(ref, val, kp)
        else:
            out[key] = _check_type(val, ref, kp)
    return out


def _check_type(val, ref, kp):
    if val is None:
        if kp in _NULLABLE:
            return None
        raise ConfigError("must not be null", kp)
    if ref is None:
        want = _NUMBER_FOR_NULL.get(kp, str)
        if want is str and not isinstance(val, str):
            raise ConfigError("expected a string", kp)
        if want is not str and (isinstance(val, bool) or not isinstance(val, (int, float))):
            raise ConfigError("expected a number", kp)
        return val
    if isinstance(ref, bool):
        if not isinstance(val, bool):
            raise ConfigError("expected true/false", kp)
    elif isinstance(ref, int):
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError("expected an integer", kp)
    elif isinstance(ref, float):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError("expected a number", kp)
        val = float(val)
    elif isinstance(ref, str):
        if not isinstance(val, str):
            raise ConfigError("expected a string", kp)
    elif isinstance(ref, list):
        if not isinstance(val, list):
            raise ConfigError("expected a list", kp)
    return val


def _require(cond, msg, key):
    if not cond:
        raise ConfigError(msg, key)


def validate(raw: dict) -> None:
    d = raw["data"]
    _require(d["d"] >= 1, "must be >= 1", "data.d")
    _require(d["K"] >= 2, "must be >= 2", "data.K")
    for key in ("core_indices", "spurious_indices"):
        idx = d[key]
        _require(all(isinstance(j, int) and 0 <= j < d["d"] for j in idx),
                 "indices must be integers in [0, d)", f"data.{key}")
    _require(not set(d["core_indices"]) & set(d["spurious_indices"]),
             "core and spurious indices overlap", "data.spurious_indices")
    for key in ("train_correlation", "test_correlation"):
        _require(0.0 <= d[key] <= 1.0, "must lie in [0, 1]", f"data.{key}")
    _require(d["noise_std"] >= 0, "must be non-negative", "data.noise_std")
    for key in ("n_train", "n_test", "n_val"):
        _require(d[key] >= d["K"], "must be >= K", f"data.{key}")
    _require((d["train_path"] is None) == (d["test_path"] is None),
             "train_path and test_path go together", "data.test_path")

    m = raw["model"]
    _require(all(isinstance(h, int) and h >= 1 for h in m["hidden"]),
             "hidden widths must be positive integers", "model.hidden")
    _require(m["epochs"] >= 0, "must be non-negative", "model.epochs")
    _require(m["lr"] > 0, "must be positive", "model.lr")
    _require(m["batch_size"] >= 1, "must be >= 1", "model.batch_size")

    r = raw["refinement"]
    for key in ("lambda", "alpha", "eps_adv", "tol", "instability_noise"):
        _require(r[key] >= 0, "must be non-negative", f"refinement.{key}")
    _require(r["lr"] > 0, "must be positive", "refinement.lr")
    _require(r["max_iters"] >= 0, "must be non-negative (0 disables refinement)",
             "refinement.max_iters")
    for key in ("epochs_per_iter", "alignment_points", "reference_epochs"):
        _require(r[key] >= 0, "must be non-negative", f"refinement.{key}")
    for key in ("batch_size", "calibration_size", "patience", "pgd_steps"):
        _require(r[key] >= 1, "must be >= 1", f"refinement.{key}")
    _require(r["lime_repeats"] >= 2, "must be >= 2", "refinement.lime_repeats")
    _require(r["reference"] in ("oracle", "robust"), "must be 'oracle' or 'robust'",
             "refinement.reference")
    _require(r["reg_mode"] in ("exact", "fd"), "must be 'exact' or 'fd'", "refinement.reg_mode")
    th = r["thresholds"]
    for key in ("tau", "eps_sens", "delta", "tau_ref"):
        _require(th[key] >= 0, "must be non-negative", f"refinement.thresholds.{key}")
        if th["percentile_mode"]:
            _require(th[key] <= 100, "percentile must be <= 100", f"refinement.thresholds.{key}")
    lc = r["lime"]
    _require(lc["ridge"] >= 0, "must be non-negative", "refinement.lime.ridge")
    _require(lc["group_size"] >= 1, "must be >= 1", "refinement.lime.group_size")
    if lc["kernel_width"] is not None:
        _require(lc["kernel_width"] > 0, "must be positive", "refinement.lime.kernel_width")

    a = raw["attacks"]
    for key in ("fgsm_eps", "pgd_eps"):
        eps = a[key]
        _require(len(eps) > 0, "must not be empty", f"attacks.{key}")
        _require(all(isinstance(e, (int, float)) and not isinstance(e, bool) and e >= 0
                     for e in eps), "must be non-negative numbers", f"attacks.{key}")
        _require(list(eps) == sorted(eps), "must be sorted ascending", f"attacks.{key}")
    _require(a["pgd_steps"] >= 1, "must be >= 1", "attacks.pgd_steps")
    if a["pgd_step_size"] is not None:
        _require(a["pgd_step_size"] > 0, "must be positive", "attacks.pgd_step_size")

    c = raw["corruption"]
    kinds = {k.value for k in CorruptionKind}
    _require(all(k in kinds for k in c["kinds"]), f"kinds must be among {sorted(kinds)}",
             "corruption.kinds")
    _require(all(isinstance(s, int) and 1 <= s <= 5 for s in c["severities"]),
             "severities must be integers in 1..5", "corruption.severities")
    _require(c["attack"] in ("none", "fgsm", "pgd"), "must be none/fgsm/pgd", "corruption.attack")
    if "box_blur" in c["kinds"] and c["enabled"]:
        side = int(round(math.sqrt(raw["data"]["d"])))
        _require(side * side == raw["data"]["d"], "box_blur needs a square feature count",
                 "corruption.kinds")

    ce = raw["certifier"]
    _require(ce["n_points"] >= 1, "must be >= 1", "certifier.n_points")
    _require(ce["q"] in (1, 2), "must be 1 or 2", "certifier.q")
    _require(ce["resolution"] > 0, "must be positive", "certifier.resolution")
    _require(ce["eps_max"] > 0, "must be positive", "certifier.eps_max")
    _require(raw["threads"] >= 1, "must be >= 1", "threads")


@dataclass
class ExperimentConfig:
    raw: dict

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    def stage_seed(self, stage: str) -> int:
        """Per-stage seed: hash of the stage label and the master seed."""
        digest = hashlib.sha256(f"{self.seed}:{stage}".encode()).digest()
        return int.from_bytes(digest[:4], "little")

    def planted_spec(self) -> PlantedSpec:
        d = self.raw["data"]
        return PlantedSpec(d["d"], d["K"], tuple(d["core_indices"]), tuple(d["spurious_indices"]),
                           d["train_correlation"], d["test_correlation"], d["signal_scale"],
                           d["noise_std"])

    def echo(self) -> dict:
        return copy.deepcopy(self.raw)


def config_from_dict(obj: dict) -> ExperimentConfig:
    raw = _merge(DEFAULTS, obj)
    validate(raw)
    return ExperimentConfig(raw)


def parse_config(path, seed_override=None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: JSON syntax error at line {exc.lineno}: {exc.msg}") from exc
    if seed_override is not None:
        if not isinstance(obj, dict):
            raise ConfigError("expected an object", "<root>")
        obj = {**obj, "seed": int(seed_override)}
    return config_from_dict(obj)
