"""Classical baselines: PCA + Cox proportional hazards, and passthrough external scores."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .cohort import MissingRiskFactor, PatientRecord
from .metrics import UndefinedAUC, roc_auc

log = logging.getLogger(__name__)


class RankDeficient(ValueError):
    """Training features span fewer dimensions than the requested components."""


class CoxDivergence(RuntimeError):
    """Newton iterations failed to reach a finite maximizer (e.g. monotone likelihood)."""


class NoEvents(ValueError):
    pass


# -- PCA ------------------------------------------------------------------------


@dataclass
class PCAProjection:
    mean: np.ndarray
    components: np.ndarray  # (n_components, D), orthonormal rows
    explained_variance_ratio: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def transform(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.mean.shape[0]:
            raise ValueError(f"expected {self.mean.shape[0]} features, got {x.shape[1]}")
        return (x - self.mean) @ self.components.T

    def inverse_transform(self, z) -> np.ndarray:
        return np.atleast_2d(np.asarray(z, dtype=float)) @ self.components + self.mean


def pca_fit(features, n_components: int) -> PCAProjection:
    """Centered SVD; each component's largest-magnitude entry is made positive."""
    x = np.asarray(features, dtype=float)
    if x.ndim != 2:
        raise ValueError("features must be a 2D array")
    n, d = x.shape
    if n_components < 1:
        raise ValueError("n_components must be >= 1")
    if n <= n_components:
        raise ValueError(f"need more samples ({n}) than components ({n_components})")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    tol = s[0] * max(n, d) * np.finfo(float).eps if s.size else 0.0
    rank = int(np.sum(s > tol))
    if rank < n_components:
        raise RankDeficient(f"training features have rank {rank} < {n_components} components")
    comps = vt[:n_components].copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(n_components), pivot])
    comps *= signs[:, None]
    var = s**2
    return PCAProjection(mean, comps, var[:n_components] / var.sum())


# -- Cox ------------------------------------------------------------------------


@dataclass
class CoxConfig:
    tol: float = 1e-8
    max_iter: int = 100
    ties: str = "breslow"
    max_halvings: int = 40
    # smallest eigenvalue of the (standardized) information treated as flat
    flat_eigenvalue: float = 1e-6

    def __post_init__(self):
        if self.ties not in ("breslow", "efron"):
            raise ValueError(f"unknown ties rule {self.ties!r}")


@dataclass
class CoxModel:
    beta: np.ndarray
    names: list[str]
    iterations: int
    gradient_norm: float
    log_likelihood: float
    null_log_likelihood: float
    information: np.ndarray
    ties: str = "breslow"
    extras: dict = field(default_factory=dict)

    def standard_errors(self) -> np.ndarray:
        se = np.full(len(self.beta), np.nan)
        active = np.diag(self.information) > 0
        if active.any():
            sub = self.information[np.ix_(active, active)]
            se[active] = np.sqrt(np.diag(np.linalg.inv(sub)))
        return se

    def report(self) -> dict:
        se = self.standard_errors()
        rows = []
        for name, b, s in zip(self.names, self.beta, se):
            z = b / s if np.isfinite(s) and s > 0 else float("nan")
            p = float(2 * stats.norm.sf(abs(z))) if np.isfinite(z) else float("nan")
            rows.append({"name": name, "beta": float(b), "se": float(s), "z": float(z), "p": p})
        return {
            "ties": self.ties,
            "iterations": self.iterations,
            "gradient_norm": self.gradient_norm,
            "log_likelihood": self.log_likelihood,
            "null_log_likelihood": self.null_log_likelihood,
            "covariates": rows,
        }

    def save_report(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.report(), fh, indent=2, allow_nan=True)
            fh.write("\n")


def _independent_columns(z: np.ndarray, candidates: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Greedy left-to-right selection of linearly independent (centered) columns.

    Columns in the span of earlier ones are aliased and keep beta = 0.
    """
    keep = np.zeros(z.shape[1], dtype=bool)
    basis = np.zeros((z.shape[0], 0))
    for j in np.flatnonzero(candidates):
        col = z[:, j]
        resid = col - basis @ (basis.T @ col) if basis.shape[1] else col
        norm = np.linalg.norm(resid)
        if norm > tol * max(1.0, np.linalg.norm(col)):
            keep[j] = True
            basis = np.column_stack([basis, resid / norm])
    return keep


def _risk_sets(times: np.ndarray, events: np.ndarray):
    """Order (descending time) and, per distinct event time, (prefix end, event indices in order)."""
    order = np.argsort(-times, kind="stable")
    t_sorted = times[order]
    groups = []
    for t in np.unique(times[events]):
        end = int(np.searchsorted(-t_sorted, -t, side="right"))
        members = np.flatnonzero((t_sorted == t) & events[order])
        groups.append((end, members))
    return order, groups


def cox_partial_likelihood(x, beta, order, groups, ties: str = "breslow"):
    """(log partial likelihood, gradient, information) at ``beta``."""
    xs = x[order]
    eta = xs @ beta
    shift = eta.max() if eta.size else 0.0
    e = np.exp(eta - shift)
    c0 = np.cumsum(e)
    c1 = np.cumsum(xs * e[:, None], axis=0)
    c2 = np.cumsum(xs[:, :, None] * xs[:, None, :] * e[:, None, None], axis=0)
    p = x.shape[1]
    ll, grad, info = 0.0, np.zeros(p), np.zeros((p, p))
    for end, members in groups:
        d = len(members)
        s0, s1, s2 = c0[end - 1], c1[end - 1], c2[end - 1]
        ll += float(eta[members].sum())
        grad += xs[members].sum(axis=0)
        if ties == "efron" and d > 1:
            e_d = e[members]
            d0, d1 = e_d.sum(), (xs[members] * e_d[:, None]).sum(axis=0)
            d2 = (xs[members][:, :, None] * xs[members][:, None, :] * e_d[:, None, None]).sum(axis=0)
            fracs = np.arange(d) / d
        else:
            d0 = d1 = d2 = 0.0
            fracs = np.zeros(1)
        weight = d / len(fracs)
        for f in fracs:
            a0, a1, a2 = s0 - f * d0, s1 - f * d1, s2 - f * d2
            m = a1 / a0
            ll -= weight * (np.log(a0) + shift)
            grad -= weight * m
            info += weight * (a2 / a0 - np.outer(m, m))
    return float(ll), grad, info


def cox_fit(covariates, event_times, event_flags, config: CoxConfig | None = None,
            names: list[str] | None = None) -> CoxModel:
    """Maximize the Cox log partial likelihood by Newton-Raphson with step halving.

    Covariates are standardized internally (constant or aliased columns are held at
    beta = 0) and coefficients are mapped back to the original scale.
    Converged when the gradient's infinity norm falls below ``tol``.
    """
    config = config or CoxConfig()
    x = np.asarray(covariates, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    times = np.asarray(event_times, dtype=float)
    events = np.asarray(event_flags).astype(bool)
    n, p = x.shape
    if len(times) != n or len(events) != n:
        raise ValueError("covariates, times and event flags must align")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(times))):
        raise ValueError("covariates and times must be finite")
    if not events.any():
        raise NoEvents("Cox fit needs at least one event")
    names = list(names) if names is not None else [f"x{i}" for i in range(p)]
    if len(names) != p:
        raise ValueError("names must match the number of covariates")

    sd = x.std(axis=0)
    active = sd > 1e-12 * np.maximum(1.0, np.abs(x).max(axis=0))
    active &= _independent_columns((x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0), active)
    z = (x[:, active] - x[:, active].mean(axis=0)) / sd[active]
    order, groups = _risk_sets(times, events)
    k = z.shape[1]

    b = np.zeros(k)
    ll, g, h = cox_partial_likelihood(z, b, order, groups, config.ties)
    ll0 = ll
    iterations = 0

    def grad_orig(gz):
        return np.abs(gz / sd[active]).max() if k else 0.0

    while k and grad_orig(g) >= config.tol:
        if iterations >= config.max_iter:
            raise CoxDivergence(
                f"no convergence after {config.max_iter} iterations (|grad|={grad_orig(g):.3g}, "
                f"max|beta_std|={np.abs(b).max():.3g}); the likelihood may be monotone")
        iterations += 1
        try:
            step = np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(h, g, rcond=None)[0]
        t = 1.0
        for _ in range(config.max_halvings):
            cand = b + t * step
            ll_c, g_c, h_c = cox_partial_likelihood(z, cand, order, groups, config.ties)
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            raise CoxDivergence(f"step halving failed at iteration {iterations} (|grad|={grad_orig(g):.3g})")
        b, ll, g, h = cand, ll_c, g_c, h_c

    if k:
        eig = np.linalg.eigvalsh(h)
        if eig.min() < config.flat_eigenvalue:
            raise CoxDivergence(
                f"information is numerically singular at the solution (min eigenvalue {eig.min():.3g}, "
                f"max|beta_std|={np.abs(b).max():.3g}); the likelihood is monotone in some direction")

    beta = np.zeros(p)
    beta[active] = b / sd[active]
    info = np.zeros((p, p))
    scale = 1.0 / sd[active]
    info[np.ix_(active, active)] = h / np.outer(scale, scale)
    g_full = np.zeros(p)
    g_full[active] = g / sd[active]
    return CoxModel(beta=beta, names=names, iterations=iterations, gradient_norm=float(np.abs(g_full).max()),
                    log_likelihood=float(ll), null_log_likelihood=float(ll0), information=info, ties=config.ties)


def cox_log_likelihood(covariates, event_times, event_flags, beta, ties: str = "breslow") -> float:
    x = np.asarray(covariates, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    order, groups = _risk_sets(np.asarray(event_times, float), np.asarray(event_flags).astype(bool))
    return cox_partial_likelihood(x, np.asarray(beta, float), order, groups, ties)[0]


def cox_predict(model: CoxModel, covariates) -> np.ndarray:
    """Linear predictor ``x @ beta`` (monotone in the hazard)."""
    x = np.atleast_2d(np.asarray(covariates, dtype=float))
    if x.shape[1] != len(model.beta):
        raise ValueError(f"expected {len(model.beta)} covariates, got {x.shape[1]}")
    return x @ model.beta


# -- Cox on reduced image features plus risk factors -------------------------------------


@dataclass
class CoxBaseline:
    pca: PCAProjection | None
    model: CoxModel

    def covariates(self, gap, rf) -> np.ndarray:
        parts = []
        if self.pca is not None:
            parts.append(self.pca.transform(gap))
        if rf is not None and np.asarray(rf).shape[1]:
            parts.append(np.asarray(rf, dtype=float))
        return np.concatenate(parts, axis=1)

    def predict(self, gap, rf) -> np.ndarray:
        return cox_predict(self.model, self.covariates(gap, rf))


def survival_at_horizon(records: list[PatientRecord], horizon: float) -> tuple[np.ndarray, np.ndarray]:
    """(time, event) pairs administratively censored at ``horizon``."""
    t, e = [], []
    for r in records:
        time = r.event_time_years if r.event_observed else r.followup_years
        t.append(min(time, horizon))
        e.append(bool(r.event_observed and r.event_time_years <= horizon))
    return np.array(t), np.array(e)


def fit_cox_baseline(gap, rf, times, events, n_components: int | None, rf_names=None,
                     config: CoxConfig | None = None) -> CoxBaseline:
    """PCA on training GAP features (if any) concatenated with risk factors, then Cox."""
    names = []
    pca = None
    parts = []
    if n_components:
        pca = pca_fit(gap, n_components)
        parts.append(pca.transform(gap))
        names += [f"pc{i + 1}" for i in range(n_components)]
    if rf is not None and np.asarray(rf).shape[1]:
        rf = np.asarray(rf, dtype=float)
        parts.append(rf)
        names += list(rf_names) if rf_names is not None else [f"rf{i}" for i in range(rf.shape[1])]
    if not parts:
        raise ValueError("Cox baseline needs image features or risk factors")
    model = cox_fit(np.concatenate(parts, axis=1), times, events, config, names)
    return CoxBaseline(pca, model)


def select_pca_components(train: dict, val: dict, candidates=range(1, 6), config: CoxConfig | None = None):
    """Fit one Cox baseline per candidate component count and keep the best validation AUC.

    ``train`` needs keys gap, rf, times, events; ``val`` needs gap, rf, labels.
    Returns (best baseline, best k, {k: auc}); candidates that fail to fit score nan.
    """
    aucs, best = {}, (None, None, -np.inf)
    for k in candidates:
        try:
            base = fit_cox_baseline(train["gap"], train.get("rf"), train["times"], train["events"], k,
                                    train.get("rf_names"), config)
            auc = roc_auc(base.predict(val["gap"], val.get("rf")), val["labels"])
        except (RankDeficient, CoxDivergence, UndefinedAUC, ValueError) as exc:
            log.warning("PCA components=%d skipped: %s", k, exc)
            aucs[k] = float("nan")
            continue
        aucs[k] = auc
        if auc > best[2]:
            best = (base, k, auc)
    if best[0] is None:
        raise CoxDivergence("no candidate component count produced a usable Cox model")
    return best[0], best[1], aucs


def external_score_baseline(records: list[PatientRecord], score_column: str) -> dict[str, float]:
    """Pass an externally computed score (e.g. a FRAX-style probability) through unchanged."""
    out = {}
    for r in records:
        if score_column not in r.rf_values:
            raise MissingRiskFactor(r.patient_id, score_column)
        out[r.patient_id] = float(r.rf_values[score_column])
    return out
