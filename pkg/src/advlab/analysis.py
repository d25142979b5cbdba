"""Representation geometry: SVCCA, PCA plot data, KS test, boundary distance."""

from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import deepfool, run_attack


class DegenerateViewError(ValueError):
    pass


@dataclass
class SvccaResult:
    coefficients: np.ndarray
    mean: float
    kept_a: int
    kept_b: int

    def to_dict(self):
        return {"coefficients": [float(c) for c in self.coefficients], "mean": self.mean,
                "kept_a": self.kept_a, "kept_b": self.kept_b}


def _svd_reduce(X, variance_keep, which):
    Xc = X - X.mean(axis=0)
    if not np.any(np.abs(Xc) > 0):
        raise DegenerateViewError(f"degenerate view {which}: all rows identical")
    u, s, _ = np.linalg.svd(Xc, full_matrices=False)
    s = s[s > s[0] * 1e-12]
    var = s ** 2
    frac = np.cumsum(var) / var.sum()
    k = int(np.searchsorted(frac, variance_keep - 1e-12) + 1)
    k = min(k, len(s))
    # unit-variance directions: CCA ignores the scaling, and lambda then acts relative to each direction
    return u[:, :k] * np.sqrt(len(X) - 1)


def _inv_sqrt(c):
    w, v = np.linalg.eigh(c)
    return (v / np.sqrt(w)) @ v.T


def cca(A, B, reg=1e-8):
    """Canonical correlations of two centred views, descending."""
    n = len(A)
    saa = A.T @ A / (n - 1) + reg * np.eye(A.shape[1])
    sbb = B.T @ B / (n - 1) + reg * np.eye(B.shape[1])
    sab = A.T @ B / (n - 1)
    t = _inv_sqrt(saa) @ sab @ _inv_sqrt(sbb)
    rho = np.linalg.svd(t, compute_uv=False)
    return np.clip(rho, 0.0, 1.0)


def svcca(reps_a, reps_b, variance_keep=0.99, reg=1e-8):
    """SVD-truncate each view to ``variance_keep`` of its variance, then CCA."""
    A = np.asarray(reps_a, dtype=np.float64)
    B = np.asarray(reps_b, dtype=np.float64)
    A, B = A.reshape(len(A), -1), B.reshape(len(B), -1)
    if len(A) != len(B):
        raise ValueError(f"views have {len(A)} and {len(B)} rows")
    if not 0.0 < variance_keep <= 1.0:
        raise ValueError("variance_keep must lie in (0, 1]")
    if len(A) <= max(A.shape[1], B.shape[1]):
        warnings.warn(f"svcca with N={len(A)} <= d={max(A.shape[1], B.shape[1])}; "
                      "correlations are biased upward", stacklevel=2)
    ra = _svd_reduce(A, variance_keep, "a")
    rb = _svd_reduce(B, variance_keep, "b")
    rho = cca(ra, rb, reg)
    return SvccaResult(rho, float(rho.mean()), ra.shape[1], rb.shape[1])


def svcca_under_attack(model, x, y, spec, variance_keep=0.99):
    """Mean SVCCA coefficient between clean and adversarial representations."""
    adv = run_attack(model, x, y, spec)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = svcca(model.representation(adv.originals), model.representation(adv.adversarials), variance_keep)
    return res.mean


# -- PCA --------------------------------------------------------------------------


@dataclass
class PcaResult:
    coords: np.ndarray
    explained: np.ndarray
    components: np.ndarray
    mean: np.ndarray

    def transform(self, reps):
        return (np.asarray(reps, dtype=np.float64) - self.mean) @ self.components.T


def pca_project(reps, k=2):
    R = np.asarray(reps, dtype=np.float64)
    if len(R) < k:
        raise ValueError(f"need at least k={k} samples")
    mean = R.mean(axis=0)
    _, s, vt = np.linalg.svd(R - mean, full_matrices=False)
    rank = int(np.sum(s > (s[0] if len(s) else 0.0) * 1e-12)) if len(s) and s[0] > 0 else 0
    if k > rank:
        raise ValueError(f"k={k} exceeds the rank {rank} of the centred data")
    comps = vt[:k].copy()
    # sign convention: the largest-magnitude loading of each component is positive
    flip = np.sign(comps[np.arange(k), np.argmax(np.abs(comps), axis=1)])
    comps *= flip[:, None]
    var = s ** 2
    explained = var[:k] / var.sum()
    return PcaResult((R - mean) @ comps.T, explained, comps, mean)


def pca_clean_vs_adversarial(clean_reps, adv_reps, k=2):
    """Fit on the union of both populations; returns ``(clean_coords, adv_coords, fit)``."""
    fit = pca_project(np.concatenate([clean_reps, adv_reps]), k)
    return fit.transform(clean_reps), fit.transform(adv_reps), fit


def write_pca_csv(path, labels, clean_coords, adv_coords):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label", "population", "coord_1", "coord_2"])
        for population, coords in (("clean", clean_coords), ("adversarial", adv_coords)):
            for i, (lab, row) in enumerate(zip(labels, coords)):
                w.writerow([i, int(lab), population, repr(float(row[0])), repr(float(row[1]))])


# -- Kolmogorov-Smirnov -------------------------------------------------------------


@dataclass
class KsResult:
    statistic: float
    pvalue: float
    n: int
    m: int

    def to_dict(self):
        return asdict(self)


def kolmogorov_sf(lam):
    """Survival function of the Kolmogorov distribution, ``P(K > lam)``."""
    if lam <= 0:
        return 1.0
    if lam < 1.18:
        # Jacobi-theta form converges fast for small arguments
        k = np.arange(1, 20)
        cdf = np.sqrt(2 * np.pi) / lam * np.exp(-((2 * k - 1) ** 2) * np.pi ** 2 / (8 * lam ** 2)).sum()
        return float(min(max(1.0 - cdf, 0.0), 1.0))
    k = np.arange(1, 101)
    terms = (-1.0) ** (k - 1) * np.exp(-2.0 * k ** 2 * lam ** 2)
    return float(min(max(2.0 * terms.sum(), 0.0), 1.0))


def ks_two_sample(a, b):
    """Two-sample KS test; asymptotic p-value at ``sqrt(nm / (n + m)) * D``."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if not len(a) or not len(b):
        raise ValueError("both samples must be nonempty")
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / len(a)
    cdf_b = np.searchsorted(b, pooled, side="right") / len(b)
    d = float(np.max(np.abs(cdf_a - cdf_b)))
    n_eff = len(a) * len(b) / (len(a) + len(b))
    return KsResult(d, kolmogorov_sf(np.sqrt(n_eff) * d), len(a), len(b))


# -- decision boundary ---------------------------------------------------------------


@dataclass
class BoundaryReport:
    mean_l2: float
    mean_linf: float
    mean_steps: float
    records: list = field(default_factory=list)
    excluded: int = 0

    def to_dict(self):
        return asdict(self)


def boundary_distance(model, x, spec):
    """DeepFool without overshoot; mean L2/Linf distance and step count over converged samples."""
    if spec.kind != "deepfool":
        raise ValueError("boundary_distance needs a deepfool spec")
    adv = deepfool(model, x, spec, overshoot=0.0)
    norms = adv.norms
    records = [
        {"index": i, "l1": float(norms["l1"][i]), "l2": float(norms["l2"][i]), "linf": float(norms["linf"][i]),
         "steps": int(adv.iterations[i]), "converged": bool(adv.success[i])}
        for i in range(len(adv.labels))
    ]
    used = [r for r in records if r["converged"]]
    if used:
        means = [float(np.mean([r[key] for r in used])) for key in ("l2", "linf", "steps")]
    else:
        means = [float("nan")] * 3
    return BoundaryReport(*means, records=records, excluded=len(records) - len(used))
