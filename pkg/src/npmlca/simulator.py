"""Simulation design: the 96-condition grid, true parameters and data generation."""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

from .model import Dataset, ModelError, ModelSpec, Parameters

N_INDICATORS = (6, 12)
CRP_QUALITY = (0.7, 0.8, 0.9)
N_SITES = (50, 150)
SITE_SIZE = (30, 60)
EFFECTS = ((1.0, 1.0), (1.5, 3.0))

# class-1 and class-2 intercept separations against the reference class 3
INTERCEPT_ODDS = (2.5, 1.5)


class ConditionError(ModelError):
    def __init__(self, factor: str, value):
        self.factor = factor
        super().__init__(f"invalid value for {factor}: {value!r}")


@dataclass(frozen=True)
class Condition:
    n_indicators: int
    crp_quality: float
    n_sites: int
    site_size: int
    l1_effects: tuple[float, float]
    l2_effects: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "l1_effects", tuple(float(v) for v in self.l1_effects))
        object.__setattr__(self, "l2_effects", tuple(float(v) for v in self.l2_effects))
        object.__setattr__(self, "crp_quality", float(self.crp_quality))
        checks = [("n_indicators", self.n_indicators, N_INDICATORS),
                  ("crp_quality", self.crp_quality, CRP_QUALITY),
                  ("n_sites", self.n_sites, N_SITES),
                  ("site_size", self.site_size, SITE_SIZE),
                  ("l1_effects", self.l1_effects, EFFECTS),
                  ("l2_effects", self.l2_effects, EFFECTS)]
        for name, value, allowed in checks:
            if value not in allowed:
                raise ConditionError(name, value)

    @property
    def key(self) -> tuple:
        return (self.n_indicators, self.crp_quality, self.n_sites, self.site_size,
                self.l1_effects, self.l2_effects)

    @property
    def label(self) -> str:
        e1 = "-".join(f"{v:g}" for v in self.l1_effects)
        e2 = "-".join(f"{v:g}" for v in self.l2_effects)
        return (f"K{self.n_indicators}_q{self.crp_quality:g}_J{self.n_sites}"
                f"_n{self.site_size}_x{e1}_z{e2}")

    @property
    def grid_id(self) -> int:
        """1-based position in ``condition_grid()``."""
        return _GRID_INDEX[self.key] + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["l1_effects"] = list(self.l1_effects)
        d["l2_effects"] = list(self.l2_effects)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Condition":
        return cls(int(d["n_indicators"]), float(d["crp_quality"]), int(d["n_sites"]),
                   int(d["site_size"]), tuple(d["l1_effects"]), tuple(d["l2_effects"]))


def condition_grid() -> list[Condition]:
    """All 96 conditions in lexicographic factor order."""
    return [Condition(*combo) for combo in itertools.product(
        N_INDICATORS, CRP_QUALITY, N_SITES, SITE_SIZE, EFFECTS, EFFECTS)]


_GRID_INDEX = {c.key: i for i, c in enumerate(condition_grid())}


def true_crp_matrix(n_indicators: int, q: float) -> np.ndarray:
    """``K x 3`` matrix of ``P(Y_k = 1 | c)``: all high, half high/half low, all low."""
    half = n_indicators // 2
    crp = np.empty((n_indicators, 3))
    crp[:, 0] = q
    crp[:half, 1] = q
    crp[half:, 1] = 1.0 - q
    crp[:, 2] = 1.0 - q
    return crp


def build_true_parameters(cond: Condition) -> Parameters:
    """Generating parameters: L = 3, M = 2, one covariate per level.

    Level-2 class 1 uses intercepts ``(log 2.5, log 1.5, 0)`` and class 2 the
    mirrored ``(-log 2.5, -log 1.5, 0)``; both level-2 classes are equally
    likely.
    """
    sep = np.log(INTERCEPT_ODDS)
    gamma0 = np.zeros((3, 2))
    gamma0[:2, 0] = sep
    gamma0[:2, 1] = -sep
    gamma1 = np.zeros((3, 1))
    gamma1[:2, 0] = np.log(cond.l1_effects)
    gamma2 = np.zeros((3, 1))
    gamma2[:2, 0] = np.log(cond.l2_effects)
    return Parameters.from_probabilities([0.5, 0.5], gamma0, gamma1, gamma2,
                                         true_crp_matrix(cond.n_indicators, cond.crp_quality))


def replication_seed(master_seed: int, condition_id: int, replication: int) -> int:
    """Independent 63-bit seed for one (condition, replication) substream."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(condition_id, replication))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One draw per row of ``probs`` (rows sum to 1); returns 0-based categories."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((u[:, None] > cdf).sum(axis=1), probs.shape[1] - 1)


def generate_dataset(cond: Condition, params: Parameters, seed) -> Dataset:
    """Draw one dataset from ``params`` with the condition's sample sizes.

    Level-1 covariates are Bernoulli(0.5), level-2 covariates standard normal.
    Memberships are kept as truth.
    """
    rng = np.random.default_rng(seed)
    spec: ModelSpec = params.spec
    J, n = cond.n_sites, cond.site_size
    N = J * n
    w = _categorical(rng, np.broadcast_to(params.level2_probs(), (J, spec.M)))
    z = rng.standard_normal((J, spec.P2))
    x = rng.binomial(1, 0.5, (N, spec.P1)).astype(float)
    site = np.repeat(np.arange(J), n)
    eta = (params.gamma0[:, w[site]].T + x @ params.gamma1.T + z[site] @ params.gamma2.T)
    probs = np.exp(eta - logsumexp(eta, axis=1, keepdims=True))
    c = _categorical(rng, probs)
    crp = params.crp()
    y = np.empty((N, spec.K), dtype=np.int64)
    for k in range(spec.K):
        y[:, k] = _categorical(rng, crp[k][:, c].T) + 1
    site_ids = tuple(range(1, J + 1))
    return Dataset(site_ids, site, y, x, z, c + 1, w + 1)
