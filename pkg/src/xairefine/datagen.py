"""Synthetic data with planted shortcut features, plus corruption operators.

Core features carry a class-conditional Gaussian signal. Spurious features
are noiseless copies of the class code (``+-c``) that agree with the label
with probability ``train_correlation`` during training and
``test_correlation`` at test time. Everything else is noise.

Corruption severities map to the fixed magnitude tables below; they are
desk-scale stand-ins for the CIFAR-10-C families.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import FormatError, InputError, TruncationError

DOMAIN_LO = -4.0
DOMAIN_HI = 4.0
DOMAIN_WIDTH = DOMAIN_HI - DOMAIN_LO


class CorruptionKind(str, enum.Enum):
    gaussian_noise = "gaussian_noise"
    shot_noise = "shot_noise"
    impulse_noise = "impulse_noise"
    box_blur = "box_blur"
    fog_gradient = "fog_gradient"


# severity 1..5
GAUSSIAN_STD = (0.04, 0.06, 0.08, 0.10, 0.12)
# photon counts per unit of the rescaled [0, 1] intensity; fewer counts = more noise
SHOT_COUNTS = (60.0, 25.0, 12.0, 5.0, 3.0)
IMPULSE_FRACTION = (0.01, 0.02, 0.03, 0.05, 0.07)
# weight of the 3x3 neighbourhood mean in the blended output
BLUR_MIX = (0.2, 0.4, 0.6, 0.8, 1.0)
# peak-to-peak height of the additive ramp
FOG_AMPLITUDE = (0.25, 0.5, 0.75, 1.0, 1.25)

SEVERITY_TABLES = {
    CorruptionKind.gaussian_noise: GAUSSIAN_STD,
    CorruptionKind.shot_noise: SHOT_COUNTS,
    CorruptionKind.impulse_noise: IMPULSE_FRACTION,
    CorruptionKind.box_blur: BLUR_MIX,
    CorruptionKind.fog_gradient: FOG_AMPLITUDE,
}


@dataclass
class DatasetSplit:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int = 2

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise InputError("inputs must be [n, d] with one label per row")
        if self.inputs.shape[0] < 1:
            raise InputError("split must contain at least one row")
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
            raise InputError("label out of range")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "DatasetSplit":
        return DatasetSplit(self.inputs[idx], self.labels[idx], self.num_classes)


@dataclass
class PlantedSpec:
    d: int = 64
    K: int = 2
    core_indices: Tuple[int, ...] = tuple(range(8))
    spurious_indices: Tuple[int, ...] = tuple(range(8, 13))
    train_correlation: float = 0.95
    test_correlation: float = 0.5
    signal_scale: float = 2.0
    noise_std: float = 1.0

    def validate(self):
        core, spur = set(self.core_indices), set(self.spurious_indices)
        if core & spur:
            raise InputError(f"core and spurious indices overlap: {sorted(core & spur)}")
        if any(j < 0 or j >= self.d for j in core | spur):
            raise InputError("feature index out of range")
        for name in ("train_correlation", "test_correlation"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InputError(f"{name} must lie in [0, 1]")
        if self.K < 2:
            raise InputError("K must be >= 2")
        if self.noise_std < 0:
            raise InputError("noise_std must be non-negative")
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out["core_indices"] = list(self.core_indices)
        out["spurious_indices"] = list(self.spurious_indices)
        return out


def class_codes(K: int, n_features: int) -> np.ndarray:
    """``[K, n_features]`` sign pattern per class.

    Bit ``j mod B`` of the class index decides the sign of feature ``j``, with
    ``B = ceil(log2 K)``. For two classes this is ``-1`` for class 0 and ``+1``
    for class 1 on every feature.
    """
    B = max(1, int(np.ceil(np.log2(K))))
    k = np.arange(K)[:, None]
    bit = np.arange(n_features)[None, :] % B
    return np.where((k >> bit) & 1, 1.0, -1.0)


def _make_split(spec: PlantedSpec, n: int, correlation: float, rng) -> DatasetSplit:
    labels = np.arange(n) % spec.K
    rng.shuffle(labels)
    X = rng.normal(0.0, spec.noise_std, size=(n, spec.d))
    core = list(spec.core_indices)
    spur = list(spec.spurious_indices)
    if core:
        X[:, core] += class_codes(spec.K, len(core))[labels]
    if spur:
        agree = rng.random((n, len(spur))) < correlation
        sign = class_codes(spec.K, len(spur))[labels]
        X[:, spur] = spec.signal_scale * np.where(agree, sign, -sign)
    np.clip(X, DOMAIN_LO, DOMAIN_HI, out=X)
    return DatasetSplit(X, labels, spec.K)


def make_planted(spec: PlantedSpec, n_train: int, n_test: int, seed=0):
    """Draw train and test splits. Returns ``(train, test, spec)``."""
    spec.validate()
    if n_train < spec.K or n_test < spec.K:
        raise InputError("each split needs at least K rows")
    rng_train, rng_test = (np.random.default_rng(s)
                           for s in np.random.SeedSequence(seed).spawn(2))
    train = _make_split(spec, n_train, spec.train_correlation, rng_train)
    test = _make_split(spec, n_test, spec.test_correlation, rng_test)
    return train, test, spec


def relevance_indicator(spec: PlantedSpec) -> np.ndarray:
    out = np.zeros(spec.d)
    out[list(spec.core_indices)] = 1.0
    return out


# ---------------------------------------------------------------------------
# corruptions


def _grid_side(d: int) -> int:
    side = int(round(np.sqrt(d)))
    if side * side != d:
        raise InputError(f"box_blur needs a square feature count, got d={d}")
    return side


def _box_mean(X: np.ndarray) -> np.ndarray:
    """Mean over the 3x3 grid neighbourhood (clipped at the border)."""
    n, d = X.shape
    side = _grid_side(d)
    G = X.reshape(n, side, side)
    padded = np.pad(G, ((0, 0), (1, 1), (1, 1)))
    ones = np.pad(np.ones((side, side)), 1)
    total = np.zeros_like(G)
    count = np.zeros((side, side))
    for di in range(3):
        for dj in range(3):
            total += padded[:, di:di + side, dj:dj + side]
            count += ones[di:di + side, dj:dj + side]
    return (total / count).reshape(n, d)


def corrupt(split: DatasetSplit, kind, severity: int = 1, seed=0,
            magnitude: Optional[float] = None) -> DatasetSplit:
    """Apply one corruption family at ``severity`` (1-5).

    ``magnitude`` overrides the table entry (noise std, photon count, flip
    fraction, blur mix or ramp height depending on ``kind``).
    """
    kind = CorruptionKind(kind)
    if not 1 <= int(severity) <= 5:
        raise InputError("severity must be in 1..5")
    level = SEVERITY_TABLES[kind][int(severity) - 1] if magnitude is None else magnitude
    rng = np.random.default_rng(seed)
    X = split.inputs.copy()
    n, d = X.shape

    if kind is CorruptionKind.gaussian_noise:
        X += rng.normal(0.0, level, size=X.shape)
    elif kind is CorruptionKind.shot_noise:
        unit = (np.clip(X, DOMAIN_LO, DOMAIN_HI) - DOMAIN_LO) / DOMAIN_WIDTH
        X = rng.poisson(unit * level) / level * DOMAIN_WIDTH + DOMAIN_LO
    elif kind is CorruptionKind.impulse_noise:
        hit = rng.random(X.shape) < level
        salt = rng.random(X.shape) < 0.5
        X[hit] = np.where(salt[hit], DOMAIN_HI, DOMAIN_LO)
    elif kind is CorruptionKind.box_blur:
        X = (1.0 - level) * X + level * _box_mean(X)
    elif kind is CorruptionKind.fog_gradient:
        ramp = np.linspace(-0.5, 0.5, d) * level
        direction = rng.choice([-1.0, 1.0], size=(n, 1))
        X += direction * ramp[None, :]

    np.clip(X, DOMAIN_LO, DOMAIN_HI, out=X)
    return DatasetSplit(X, split.labels.copy(), split.num_classes)


# ---------------------------------------------------------------------------
# text format: "n d K" header, then one row of d floats and a label per line


def save_split(split: DatasetSplit, path) -> None:
    lines = [f"{split.n} {split.d} {split.num_classes}"]
    for row, label in zip(split.inputs, split.labels):
        lines.append(" ".join(repr(float(v)) for v in row) + f" {int(label)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_split(path) -> DatasetSplit:
    text = Path(path).read_text()
    tokens = text.split()
    if len(tokens) < 3:
        raise FormatError(f"{path}: missing 'n d K' header")
    try:
        n, d, K = (int(t) for t in tokens[:3])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header: {exc}") from exc
    if n < 1 or d < 1 or K < 2:
        raise FormatError(f"{path}: header values out of range")
    body = tokens[3:]
    expected = n * (d + 1)
    if len(body) < expected:
        raise TruncationError(f"{path}: expected {expected} values after header, got {len(body)}")
    if len(body) > expected:
        raise FormatError(f"{path}: {len(body) - expected} trailing values after payload")
    try:
        table = np.array(body, dtype=np.float64).reshape(n, d + 1)
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric value: {exc}") from exc
    labels = table[:, -1]
    if not np.all(labels == np.round(labels)):
        raise FormatError(f"{path}: labels must be integers")
    try:
        return DatasetSplit(table[:, :-1], labels.astype(np.int64), K)
    except InputError as exc:
        raise FormatError(f"{path}: {exc}") from exc
