"""Replication runner and report tables."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .alignment import align, model_composition
from .estimator import FitOptions, FitResult, fit, significance_stars, standard_errors, wald_tests
from .io import RecordStore, params_to_dict
from .metrics import (
    FACTORS,
    ReplicationRecord,
    classification_error,
    factor_eta_squared,
    parameter_recovery,
    rejection_rate,
)
from .model import Dataset, free_parameter_names
from .simulator import (
    Condition,
    build_true_parameters,
    condition_grid,
    generate_dataset,
    replication_seed,
)

log = logging.getLogger(__name__)

_FIT_OVERRIDES = {"n_starts", "n_refine", "burn_in", "tol", "max_iter"}


@dataclass(frozen=True)
class StudyConfig:
    master_seed: int
    reps: int = 500
    conditions: tuple[int, ...] = tuple(range(1, 97))
    jobs: int = 1
    fit_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        bad = [c for c in self.conditions if not 1 <= c <= 96]
        if bad:
            raise ValueError(f"condition ids outside 1..96: {bad}")
        unknown = set(self.fit_overrides) - _FIT_OVERRIDES
        if unknown:
            raise ValueError(f"unknown fit option overrides: {sorted(unknown)}")
        object.__setattr__(self, "conditions", tuple(int(c) for c in self.conditions))

    def to_dict(self) -> dict:
        # jobs is deliberately left out: results do not depend on it
        return {"master_seed": self.master_seed, "reps": self.reps,
                "conditions": list(self.conditions), "fit_overrides": dict(self.fit_overrides)}


def parse_condition_selector(text: str | None) -> tuple[int, ...]:
    """``"all"``, ``"1-4,17"`` or condition labels separated by commas."""
    if text is None or text.strip().lower() == "all":
        return tuple(range(1, 97))
    labels = {c.label: c.grid_id for c in condition_grid()}
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if part in labels:
            out.append(labels[part])
        elif "-" in part and part.replace("-", "").isdigit():
            lo, hi = (int(v) for v in part.split("-"))
            out.extend(range(lo, hi + 1))
        elif part.isdigit():
            out.append(int(part))
        else:
            raise ValueError(f"unrecognised condition selector {part!r}")
    return tuple(dict.fromkeys(out))


def condition_by_id(condition_id: int) -> Condition:
    return condition_grid()[condition_id - 1]


def fit_options_for(seed: int, overrides: dict | None = None) -> FitOptions:
    return replace(FitOptions(seed=seed, compute_se=False), **(overrides or {}))


@dataclass(frozen=True)
class Replication:
    """Everything produced for one replication; ``record`` is what gets stored."""

    record: ReplicationRecord
    data: Dataset
    fit: FitResult
    aligned: FitResult


def run_replication(condition_id: int, replication: int, master_seed: int,
                    fit_overrides: dict | None = None, se_after_alignment: bool = True) -> Replication:
    """Generate, fit, align and score one replication.

    With ``se_after_alignment`` the SEs are evaluated at the aligned estimates,
    so they are valid whether or not labels switched.  Otherwise they are
    computed at the as-fitted labels and are unusable for switched fits.
    """
    cond = condition_by_id(condition_id)
    truth = build_true_parameters(cond)
    seed = replication_seed(master_seed, condition_id, replication)
    data = generate_dataset(cond, truth, seed)
    opts = fit_options_for(seed ^ 0x5EED, fit_overrides)
    result = fit(data, truth.spec, opts)
    aligned, r = align(result, truth, data)
    if se_after_alignment:
        se = standard_errors(data, aligned.params)
        usable = bool(np.all(np.isfinite(se)))
    else:
        se = standard_errors(data, result.params)
        usable = bool(np.all(np.isfinite(se))) and not r.switched
    record = ReplicationRecord(
        condition_id=condition_id, replication=replication, seed=seed,
        estimates=tuple(aligned.params.to_vector()), se=tuple(se), se_usable=usable,
        converged=result.converged, switched=r.switched, perm1=r.perm1, perm2=r.perm2,
        error1=classification_error(aligned.modal1, data.true_c),
        error2=classification_error(aligned.modal2, data.true_w),
        loglik=result.loglik, iterations=result.iterations,
        n_starts_used=result.n_starts_used,
        diagnostics={"newton_fallbacks": int(result.diagnostics.get("newton_fallbacks", 0))},
    )
    return Replication(record, data, result, aligned)


def _worker(args) -> ReplicationRecord:
    cid, rep, seed, overrides = args
    return run_replication(cid, rep, seed, overrides).record


def run_study(config: StudyConfig, store: RecordStore, progress=None) -> int:
    """Run every missing (condition, replication) of ``config`` into ``store``.

    Returns the number of records written.  Keys already in the store are
    skipped, so an interrupted study resumes where it stopped.
    """
    store.write_config(config.to_dict())
    done = store.keys()
    todo = [(cid, rep, config.master_seed, config.fit_overrides)
            for cid in config.conditions for rep in range(1, config.reps + 1)
            if (cid, rep) not in done]
    written = 0
    if config.jobs <= 1:
        for args in todo:
            written += store.append(_worker(args))
            if progress:
                progress(written, len(todo))
        return written
    with ProcessPoolExecutor(max_workers=config.jobs) as pool:
        futures = [pool.submit(_worker, args) for args in todo]
        for fut in as_completed(futures):
            written += store.append(fut.result())
            if progress:
                progress(written, len(todo))
    return written


# -- study reports --------------------------------------------------------

def _by_condition(records) -> dict[int, list[ReplicationRecord]]:
    out: dict[int, list[ReplicationRecord]] = {}
    for r in sorted(records, key=lambda r: r.key):
        out.setdefault(r.condition_id, []).append(r)
    return out


def _condition_columns(cond: Condition) -> dict:
    return {"condition_id": cond.grid_id, "n_indicators": cond.n_indicators,
            "crp_quality": cond.crp_quality, "n_sites": cond.n_sites,
            "site_size": cond.site_size,
            "l1_effects": "({:g}, {:g})".format(*cond.l1_effects),
            "l2_effects": "({:g}, {:g})".format(*cond.l2_effects)}


def recovery_table(records) -> pd.DataFrame:
    """One row per (condition, latent class): CRP bias, SE, SD, SE/SD."""
    rows = []
    for cid, recs in _by_condition(records).items():
        cond = condition_by_id(cid)
        truth = build_true_parameters(cond)
        if sum(r.converged for r in recs) < 2:
            continue
        summary = parameter_recovery(recs, truth)
        for row in summary.class_crp_table(truth.spec):
            rows.append({**_condition_columns(cond), "latent_class": row["class"],
                         "bias": row["bias"], "se": row["se"], "sd": row["sd"],
                         "se_sd": row["se_sd"], "n_converged": summary.n_converged,
                         "n_se": summary.n_se})
    return pd.DataFrame(rows)


SLOPE_FAMILIES = {"CW1 on X": "gamma1[1,1]", "CW2 on X": "gamma1[2,1]",
                  "CW1 on W": "gamma2[1,1]", "CW2 on W": "gamma2[2,1]"}


def power_table(records, alpha: float = 0.05) -> pd.DataFrame:
    """Per condition and slope: bias and rejection rate (power or Type-I error)."""
    rows = []
    for cid, recs in _by_condition(records).items():
        cond = condition_by_id(cid)
        truth = build_true_parameters(cond)
        names = free_parameter_names(truth.spec)
        if sum(r.converged for r in recs) < 2:
            continue
        summary = parameter_recovery(recs, truth)
        for label, name in SLOPE_FAMILIES.items():
            i = names.index(name)
            rr = rejection_rate(recs, i, alpha)
            rows.append({**_condition_columns(cond), "parameter": label,
                         "truth": summary.truth[i], "bias": summary.bias[i],
                         "kind": "type_i_error" if summary.truth[i] == 0 else "power",
                         "rate": rr.rate, "n": rr.n, "rate_all": rr.rate_all,
                         "n_all": rr.n_all})
    return pd.DataFrame(rows)


def classification_long(records) -> pd.DataFrame:
    rows = []
    for cid, recs in _by_condition(records).items():
        cond = condition_by_id(cid)
        conv = [r for r in recs if r.converged]
        for level, attr in ((1, "error1"), (2, "error2")):
            vals = [getattr(r, attr) for r in conv]
            rows.append({**_condition_columns(cond), "level": level,
                         "mean_error": float(np.mean(vals)) if vals else float("nan"),
                         "n": len(vals)})
    return pd.DataFrame(rows)


def eta_table(records) -> pd.DataFrame:
    long = classification_long(records)
    rows = []
    for level in (1, 2):
        sub = long[long["level"] == level].dropna(subset=["mean_error"])
        conds = [condition_by_id(int(c)) for c in sub["condition_id"]]
        for factor in FACTORS:
            rows.append({"level": level, "factor": factor,
                         "eta_squared": factor_eta_squared(sub["mean_error"].to_numpy(),
                                                           conds, factor),
                         "n_conditions": len(conds)})
    return pd.DataFrame(rows)


def diagnostics_table(records) -> pd.DataFrame:
    rows = []
    for cid, recs in _by_condition(records).items():
        cond = condition_by_id(cid)
        n = len(recs)
        rows.append({**_condition_columns(cond), "n_records": n,
                     "nonconverged_rate": sum(not r.converged for r in recs) / n,
                     "switched_rate": sum(r.switched for r in recs) / n,
                     "se_unusable_rate": sum(not r.se_usable for r in recs) / n,
                     "newton_fallbacks": sum(r.diagnostics.get("newton_fallbacks", 0)
                                             for r in recs)})
    return pd.DataFrame(rows)


REPORTS = {"recovery": recovery_table, "power": power_table,
           "classification": classification_long, "eta": eta_table,
           "diagnostics": diagnostics_table}


# -- single-fit reports ---------------------------------------------------

def crp_table(result: FitResult) -> pd.DataFrame:
    """Category probabilities per indicator and class with class sizes."""
    params = result.params
    crp = params.crp()
    sizes = np.bincount(result.modal1 - 1, minlength=params.L)
    rows = []
    for k, S in enumerate(params.n_categories):
        for s in range(S):
            row = {"indicator": k + 1, "category": s + 1}
            for c in range(params.L):
                row[f"class{c + 1}"] = crp[k, s, c]
            rows.append(row)
    df = pd.DataFrame(rows)
    df.attrs["class_sizes"] = sizes.tolist()
    return df


def fit_stats_table(result: FitResult) -> pd.DataFrame:
    st = result.fit_stats
    return pd.DataFrame([
        {"statistic": "Number of free parameters", "value": st["free_parameters"]},
        {"statistic": "Log-likelihood", "value": round(st["loglik"], 3)},
        {"statistic": "Entropy", "value": round(st["entropy"], 3)},
        {"statistic": "AIC", "value": round(st["aic"], 3)},
        {"statistic": "BIC", "value": round(st["bic"], 3)},
        {"statistic": "Converged", "value": result.converged},
    ], dtype=object)


def odds_ratio_table(result: FitResult, alpha: float = 0.05) -> pd.DataFrame:
    """Covariate slopes as odds ratios against the reference class, with Wald CIs."""
    params = result.params
    names = free_parameter_names(params.spec)
    se = result.se if result.se is not None else np.full(len(names), np.nan)
    rows = []
    L = params.L
    for block, level in (("gamma1", 1), ("gamma2", 2)):
        arr = getattr(params, block)
        for p in range(arr.shape[1]):
            for c in range(L - 1):
                i = names.index(f"{block}[{c + 1},{p + 1}]")
                w = wald_tests(arr[c, p], se[i], alpha)
                rows.append({
                    "level": level, "covariate": f"{'x' if level == 1 else 'z'}{p + 1}",
                    "comparison": f"class {c + 1} vs class {L}",
                    "estimate": arr[c, p], "se": se[i], "odds_ratio": w.odds_ratio[0],
                    "ci_low": w.ci_low[0], "ci_high": w.ci_high[0], "p": w.p[0],
                    "stars": significance_stars(w.p[0]) if w.available[0] else "",
                    "available": bool(w.available[0]),
                })
    return pd.DataFrame(rows)


def composition_table(result: FitResult, data: Dataset) -> pd.DataFrame:
    """Per level-2 class: share of sites and level-1 class composition of its modal sites."""
    params = result.params
    implied = model_composition(params, data)
    rows = []
    for m in range(params.M):
        sites = result.modal2 == m + 1
        sel = sites[data.site]
        row = {"level2_class": m + 1, "site_share": float(sites.mean()),
               "n_sites": int(sites.sum())}
        comp = result.posteriors.c_marg[sel].mean(axis=0) if sel.any() else implied[m]
        for c in range(params.L):
            row[f"class{c + 1}"] = float(comp[c])
        rows.append(row)
    return pd.DataFrame(rows)


def fit_to_dict(result: FitResult, data: Dataset) -> dict:
    names = free_parameter_names(result.params.spec)
    se = result.se if result.se is not None else [None] * len(names)
    return {
        "params": params_to_dict(result.params),
        "free_parameters": [{"name": n, "estimate": v, "se": s}
                            for n, v, s in zip(names, result.params.to_vector(), se)],
        "loglik": result.loglik, "converged": result.converged,
        "iterations": result.iterations, "n_starts_used": result.n_starts_used,
        "fit_stats": result.fit_stats, "diagnostics": result.diagnostics,
        "level2_probs": result.params.level2_probs(),
        "modal1": [{"site_id": str(data.site_ids[data.site[i]]), "row": int(data.row_ids[i]) + 1,
                    "class": int(c)} for i, c in enumerate(result.modal1)],
        "modal2": [{"site_id": str(s), "class": int(w)}
                   for s, w in zip(data.site_ids, result.modal2)],
    }
