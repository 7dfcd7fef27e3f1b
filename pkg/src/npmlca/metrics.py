"""Monte-Carlo summaries of aligned replication results."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .model import ModelError, ModelSpec, Parameters, free_parameter_names

FACTORS = ("n_indicators", "crp_quality", "n_sites", "site_size", "l1_effects", "l2_effects")


def _nan_to_none(v: float):
    return None if not math.isfinite(v) else float(v)


@dataclass(frozen=True)
class ReplicationRecord:
    """One fitted, aligned and scored replication.

    ``estimates`` and ``se`` follow ``Parameters.to_vector`` order.  ``se_usable``
    is false when the SEs were computed at labels that were later switched.
    """

    condition_id: int
    replication: int
    seed: int
    estimates: tuple[float, ...]
    se: tuple[float, ...]
    se_usable: bool
    converged: bool
    switched: bool
    perm1: tuple[int, ...]
    perm2: tuple[int, ...]
    error1: float
    error2: float
    loglik: float
    iterations: int = 0
    n_starts_used: int = 0
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("error1", "error2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} outside [0, 1]: {v}")
        object.__setattr__(self, "estimates", tuple(float(v) for v in self.estimates))
        object.__setattr__(self, "se", tuple(float("nan") if v is None else float(v)
                                             for v in self.se))
        object.__setattr__(self, "perm1", tuple(int(v) for v in self.perm1))
        object.__setattr__(self, "perm2", tuple(int(v) for v in self.perm2))

    @property
    def key(self) -> tuple[int, int]:
        return (self.condition_id, self.replication)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimates"] = list(self.estimates)
        d["se"] = [_nan_to_none(v) for v in self.se]
        d["perm1"] = list(self.perm1)
        d["perm2"] = list(self.perm2)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ReplicationRecord":
        return cls(**d)

    def parameters(self, spec: ModelSpec) -> Parameters:
        return Parameters.from_vector(self.estimates, spec)

    def __eq__(self, other):
        if not isinstance(other, ReplicationRecord):
            return NotImplemented
        return self.to_dict() == other.to_dict()


@dataclass(frozen=True)
class RecoverySummary:
    """Per free parameter recovery; ``crp_*`` arrays are ``K x L`` on ``P(Y_k = 1 | c)``."""

    names: list[str]
    truth: np.ndarray
    mean_estimate: np.ndarray
    bias: np.ndarray
    mean_se: np.ndarray
    sd: np.ndarray
    ratio: np.ndarray
    crp_truth: np.ndarray
    crp_bias: np.ndarray
    n_converged: int
    n_se: int
    n_excluded: int

    def index(self, name: str) -> int:
        return self.names.index(name)

    def class_crp_table(self, spec: ModelSpec) -> list[dict]:
        """Per level-1 class: mean CRP bias (probability scale), SE, SD, SE/SD (logit scale)."""
        names = self.names
        rows = []
        for c in range(spec.L):
            idx = [i for i, n in enumerate(names)
                   if n.startswith("beta[") and n.endswith(f",{c + 1}]")]
            with np.errstate(invalid="ignore"):
                rows.append({
                    "class": c + 1,
                    "bias": float(np.mean(self.crp_bias[:, c])),
                    "se": float(np.mean(self.mean_se[idx])),
                    "sd": float(np.mean(self.sd[idx])),
                    "se_sd": float(np.mean(self.ratio[idx])),
                })
        return rows


def parameter_recovery(records: Sequence[ReplicationRecord], truth: Parameters) -> RecoverySummary:
    """Bias, SD, mean SE and SE/SD over converged records.

    Slopes and all logits are summarised on the logit scale; ``crp_bias`` is
    the probability-scale bias of ``P(Y_k = 1 | c)``.  SE-based columns use
    only records whose SEs are usable; a ratio with ``SD = 0`` or no usable
    SEs is ``nan``.
    """
    spec = truth.spec
    conv = [r for r in records if r.converged]
    if len(conv) < 2:
        raise ModelError(f"need at least 2 converged records, got {len(conv)}")
    est = np.array([r.estimates for r in conv])
    t = truth.to_vector()
    mean = est.mean(axis=0)
    sd = est.std(axis=0, ddof=1)
    se_rows = [r.se for r in conv if r.se_usable and np.all(np.isfinite(r.se))]
    if se_rows:
        mean_se = np.mean(se_rows, axis=0)
    else:
        mean_se = np.full(t.shape, np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(sd > 0, mean_se / sd, np.nan)
    crp = np.array([Parameters.from_vector(r.estimates, spec).crp()[:, 0, :] for r in conv])
    crp_truth = truth.crp()[:, 0, :]
    return RecoverySummary(
        free_parameter_names(spec), t, mean, mean - t, mean_se, sd, ratio,
        crp_truth, crp.mean(axis=0) - crp_truth, len(conv), len(se_rows),
        len(records) - len(conv))


@dataclass(frozen=True)
class RejectionRate:
    rate: float
    n: int
    rate_all: float
    n_all: int


def critical_value(alpha: float) -> float:
    return float(stats.norm.isf(alpha / 2.0))


def rejection_rate(records: Sequence[ReplicationRecord], index: int,
                   alpha: float = 0.05) -> RejectionRate:
    """Share of records rejecting ``H0: slope = 0`` with a two-sided Wald test.

    ``rate`` uses converged records with usable SEs; ``rate_all`` divides by
    every record, counting the rest as non-rejections.
    """
    crit = critical_value(alpha)
    n = hits = 0
    for r in records:
        if not (r.converged and r.se_usable):
            continue
        se = r.se[index]
        if not (math.isfinite(se) and se > 0):
            continue
        n += 1
        hits += abs(r.estimates[index] / se) > crit
    rate = hits / n if n else float("nan")
    rate_all = hits / len(records) if records else float("nan")
    return RejectionRate(rate, n, rate_all, len(records))


def classification_error(predicted, truth) -> float:
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ModelError(f"length mismatch: {predicted.shape} vs {truth.shape}")
    return float(np.mean(predicted != truth))


def eta_squared(values, levels) -> float:
    """Main-effect sum of squares of a categorical factor over the total sum of squares."""
    y = np.asarray(values, dtype=float)
    levels = [repr(v) for v in levels]
    if len(levels) != y.size:
        raise ModelError("one factor level per value required")
    # a constant response has no variance to explain; the rounding residue of
    # y - mean would otherwise give 0/0-like ratios near 1
    if np.ptp(y) == 0.0:
        return 0.0
    total = float(np.sum((y - y.mean()) ** 2))
    between = 0.0
    for lev in set(levels):
        sel = np.array([lv == lev for lv in levels])
        between += sel.sum() * (y[sel].mean() - y.mean()) ** 2
    return float(between / total)


def factor_eta_squared(condition_means, conditions, factor: str) -> float:
    """``eta_squared`` of one study factor across condition-level means."""
    if factor not in FACTORS:
        raise ModelError(f"unknown factor {factor!r}; expected one of {FACTORS}")
    return eta_squared(condition_means, [getattr(c, factor) for c in conditions])
