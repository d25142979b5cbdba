"""White-box untargeted attacks and exact Lp-ball projections.

All attacks take a :class:`~advlab.models.Model`, a batch of images in
[0, 1] and integer labels, and return an :class:`AdvBatch`. Randomness is
drawn from per-sample streams keyed on ``(seed, sample index)`` so a batch
can be attacked in any chunking and still give identical results.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .models import predict_from_logits
from .tensor import SGD

KINDS = ("fgsm", "pgd", "cw", "deepfool")
NORMS = (1, 2, np.inf)


def parse_norm(value):
    if isinstance(value, str):
        v = value.strip().lower().lstrip("l")
        if v in ("inf", "infinity", "∞"):
            return np.inf
        value = float(v)
    value = float(value)
    if value not in NORMS:
        raise ValueError(f"norm must be one of 1, 2, inf; got {value}")
    return np.inf if np.isinf(value) else int(value)


def norm_label(p):
    return "Linf" if np.isinf(p) else f"L{int(p)}"


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    norm: float = np.inf
    epsilon: float = 0.0
    steps: int = 1
    step_size: float | None = None  # pgd default 2.5 * eps / steps; cw default 0.01
    random_start: bool = True
    overshoot: float = 0.02
    cw_confidence: float = 0.0
    cw_penalty: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"attack kind must be one of {KINDS}, got {self.kind!r}")
        object.__setattr__(self, "norm", parse_norm(self.norm))
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError("epsilon must be finite and non-negative")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.step_size is not None and not (np.isfinite(self.step_size) and self.step_size > 0):
            raise ValueError("step_size must be finite and positive")
        if self.overshoot < 0 or self.cw_confidence < 0 or self.cw_penalty < 0:
            raise ValueError("overshoot, cw_confidence and cw_penalty must be non-negative")

    @property
    def alpha(self):
        if self.step_size is not None:
            return self.step_size
        if self.kind == "cw":
            return 0.01
        return 2.5 * self.epsilon / self.steps

    def label(self):
        return f"{self.kind}-{norm_label(self.norm)}-eps{self.epsilon:g}-t{self.steps}"

    def to_dict(self):
        d = asdict(self)
        d["norm"] = "inf" if np.isinf(self.norm) else int(self.norm)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass
class AdvBatch:
    originals: np.ndarray
    adversarials: np.ndarray
    labels: np.ndarray
    clean_pred: np.ndarray
    adv_pred: np.ndarray
    success: np.ndarray
    iterations: np.ndarray
    stationary: np.ndarray = field(default=None)
    spec: AttackSpec | None = None

    def __post_init__(self):
        if self.stationary is None:
            self.stationary = np.zeros(len(self.labels), dtype=bool)

    @property
    def perturbation(self):
        return (self.adversarials - self.originals).reshape(len(self.labels), -1)

    @property
    def norms(self):
        d = self.perturbation
        return {"l1": np.abs(d).sum(1), "l2": np.sqrt((d * d).sum(1)), "linf": np.abs(d).max(1, initial=0.0)}

    def effective_predictions(self, cap=None):
        """Predictions used for accuracy-under-attack.

        With ``cap`` set, perturbations whose L2 norm exceeds it count as
        failed attacks and the clean prediction stands.
        """
        if cap is None:
            return self.adv_pred
        return np.where(self.norms["l2"] <= cap, self.adv_pred, self.clean_pred)

    def accuracy(self, cap=None):
        return float(np.mean(self.effective_predictions(cap) == self.labels))


def _flat(x):
    return x.reshape(len(x), -1)


def lp_norm(v, p):
    v = _flat(np.asarray(v, dtype=np.float64))
    if np.isinf(p):
        return np.abs(v).max(axis=1, initial=0.0)
    if p == 2:
        return np.sqrt((v * v).sum(axis=1))
    return np.abs(v).sum(axis=1)


def _project_l1(v, eps):
    # Euclidean projection onto the L1 ball: soft-threshold at the simplex level of |v|
    out = v.copy()
    if eps == 0:
        return np.zeros_like(v)
    a = np.abs(v)
    outside = a.sum(axis=1) > eps
    if not outside.any():
        return out
    u = -np.sort(-a[outside], axis=1)
    css = np.cumsum(u, axis=1)
    k = np.arange(1, u.shape[1] + 1)
    cond = u * k > css - eps
    cond[:, 0] = True  # always true for eps > 0; rounding can lose it when eps is tiny
    rho = cond.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = (css[np.arange(len(u)), rho] - eps) / (rho + 1)
    out[outside] = np.sign(v[outside]) * np.maximum(a[outside] - theta[:, None], 0.0)
    return out


def project_ball(v, p, eps):
    """Euclidean projection of each row of ``v`` onto ``{u : ||u||_p <= eps}``.

    Accepts a single vector or a batch; the batch axis is the first one.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    p = parse_norm(p)
    v = np.asarray(v, dtype=np.float64)
    single = v.ndim == 1
    x = v.reshape(1, -1) if single else _flat(v)
    if np.isinf(p):
        out = np.clip(x, -eps, eps)
    elif p == 2:
        n = np.sqrt((x * x).sum(axis=1, keepdims=True))
        factor = np.where(n > eps, eps / np.where(n > 0, n, 1.0), 1.0)
        out = x * factor
    else:
        out = _project_l1(x, eps)
    return out.reshape(v.shape)


def steepest_direction(g, p):
    """Unit-norm steepest-ascent direction under the Lp norm, per sample.

    Returns ``(direction, stationary)`` where stationary marks all-zero gradients.
    """
    flat = _flat(g)
    stationary = ~np.any(flat != 0, axis=1)
    if np.isinf(p):
        d = np.sign(flat)
    elif p == 2:
        n = np.sqrt((flat * flat).sum(axis=1, keepdims=True))
        d = flat / np.where(n > 0, n, 1.0)
    else:
        d = np.zeros_like(flat)
        k = np.argmax(np.abs(flat), axis=1)
        rows = np.arange(len(flat))
        d[rows, k] = np.sign(flat[rows, k])
    return d.reshape(g.shape), stationary


def _indices(n, indices):
    return np.arange(n) if indices is None else np.asarray(indices)


def _sample_rngs(seed, indices):
    return [np.random.default_rng([int(seed), int(i)]) for i in indices]


def random_ball(shape, p, eps, rngs):
    """One uniform draw from the Lp ball of radius ``eps`` per sample."""
    m = int(np.prod(shape[1:]))
    out = np.empty((len(rngs), m))
    for r, rng in enumerate(rngs):
        if np.isinf(p):
            out[r] = rng.uniform(-eps, eps, m)
        elif p == 2:
            g = rng.standard_normal(m)
            out[r] = g / np.linalg.norm(g) * eps * rng.uniform() ** (1.0 / m)
        else:
            # uniform in the L1 ball: exponential magnitudes, random signs, radius u^(1/m)
            e = rng.exponential(size=m)
            s = rng.choice([-1.0, 1.0], size=m)
            out[r] = s * e / e.sum() * eps * rng.uniform() ** (1.0 / m)
    return out.reshape(shape)


def _finish(model, x, x_adv, y, iterations, stationary, spec, clean_pred=None, relative_to_clean=False):
    if clean_pred is None:
        clean_pred = model.predict(x)
    adv_pred = model.predict(x_adv)
    if relative_to_clean:
        success = adv_pred != clean_pred
    else:
        success = (clean_pred == y) & (adv_pred != y)
    return AdvBatch(x, x_adv, np.asarray(y), clean_pred, adv_pred, success,
                    np.asarray(iterations), stationary, spec)


def fgsm(model, x, y, spec):
    if spec.kind != "fgsm":
        raise ValueError(f"fgsm called with a {spec.kind} spec")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if spec.epsilon == 0:
        return _finish(model, x, x.copy(), y, np.ones(len(x), int), np.zeros(len(x), bool), spec)
    _, g = model.input_gradient(x, y)
    d, stationary = steepest_direction(g, spec.norm)
    x_adv = np.clip(x + spec.epsilon * d, 0.0, 1.0)
    return _finish(model, x, x_adv, y, np.ones(len(x), int), stationary, spec)


def pgd(model, x, y, spec, indices=None):
    if spec.kind != "pgd":
        raise ValueError(f"pgd called with a {spec.kind} spec")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = len(x)
    eps, p, alpha = spec.epsilon, spec.norm, spec.alpha
    if eps == 0:
        return _finish(model, x, x.copy(), y, np.full(n, spec.steps), np.zeros(n, bool), spec)
    if spec.random_start:
        delta = random_ball(x.shape, p, eps, _sample_rngs(spec.seed, _indices(n, indices)))
        x_adv = np.clip(x + delta, 0.0, 1.0)
    else:
        x_adv = x.copy()
    stationary = np.zeros(n, bool)
    for _ in range(spec.steps):
        _, g = model.input_gradient(x_adv, y)
        d, still = steepest_direction(g, p)
        stationary |= still
        delta = project_ball(x_adv - x + alpha * d, p, eps)
        x_adv = np.clip(x + delta, 0.0, 1.0)
    return _finish(model, x, x_adv, y, np.full(n, spec.steps), stationary, spec)


def _margin(logits, y, kappa):
    """``Z_true - max_{i != true} Z_i`` floored at ``-kappa``; also returns the runner-up index."""
    rows = np.arange(len(y))
    true = logits[rows, y]
    other = logits.copy()
    other[rows, y] = -np.inf
    runner = np.argmax(other, axis=1)
    return np.maximum(true - other[rows, runner], -kappa), true - other[rows, runner], runner


def carlini_wagner(model, x, y, spec):
    """Untargeted L2 Carlini-Wagner with a fixed penalty constant.

    Optimizes ``w`` with ``x_adv = x + s(w) - s(w0)`` where ``s(w) = (tanh(w) + 1) / 2``
    and ``s(w0)`` is ``x`` nudged off the box faces, so iterate 0 is exactly ``x``.
    """
    if spec.kind != "cw":
        raise ValueError(f"carlini_wagner called with a {spec.kind} spec")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    n = len(x)
    c, kappa = spec.cw_penalty, spec.cw_confidence
    w = np.arctanh(np.clip(2 * x - 1, -1 + 1e-6, 1 - 1e-6))
    s0 = (np.tanh(w) + 1) / 2
    state = {"w": w}
    opt = SGD(state, lr=spec.alpha, momentum=0.9)

    clean_logits = model.forward_logits(x)
    clean_pred = predict_from_logits(clean_logits)
    best = x.copy()
    best_l2 = np.full(n, np.inf)
    found = np.zeros(n, bool)
    iterations = np.zeros(n, int)

    def record(x_adv, logits, step):
        nonlocal best, best_l2
        _, raw, _ = _margin(logits, y, kappa)
        ok = (raw <= -kappa) & (predict_from_logits(logits) != y)
        l2 = lp_norm(x_adv - x, 2)
        better = ok & (l2 < best_l2)
        best[better] = x_adv[better]
        best_l2[better] = l2[better]
        iterations[better] = step
        found[:] |= ok

    record(x, clean_logits, 0)
    for step in range(1, spec.steps + 1):
        x_adv = np.clip(x + ((np.tanh(state["w"]) + 1) / 2 - s0), 0.0, 1.0)
        logits = model.forward_logits(x_adv)
        m, _, runner = _margin(logits, y, kappa)
        rows = np.arange(n)
        active = (m > -kappa).astype(np.float64)
        cot = np.zeros_like(logits)
        cot[rows, y] = c * active
        cot[rows, runner] -= c * active
        g_x = 2 * (x_adv - x) + (model.logits_vjp(x_adv, cot) if c > 0 else 0.0)
        g_w = g_x * (1 - np.tanh(state["w"]) ** 2) / 2
        opt.step({"w": g_w})
        x_new = np.clip(x + ((np.tanh(state["w"]) + 1) / 2 - s0), 0.0, 1.0)
        record(x_new, model.forward_logits(x_new), step)

    final = np.clip(x + ((np.tanh(state["w"]) + 1) / 2 - s0), 0.0, 1.0)
    out = np.where(found.reshape((n,) + (1,) * (x.ndim - 1)), best, final)
    iterations[~found] = spec.steps
    return _finish(model, x, out, y, iterations, np.zeros(n, bool), spec, clean_pred)


def deepfool(model, x, spec, y=None, overshoot=None):
    """Multiclass DeepFool relative to the clean prediction.

    Success means the prediction moved off the clean one. When ``y`` is given,
    samples already misclassified are left alone (zero iterations, zero
    perturbation). ``overshoot`` overrides ``spec.overshoot``.
    """
    if spec.kind != "deepfool":
        raise ValueError(f"deepfool called with a {spec.kind} spec")
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    eta = spec.overshoot if overshoot is None else overshoot
    clean_logits = model.forward_logits(x)
    k0 = predict_from_logits(clean_logits)
    y = k0.copy() if y is None else np.asarray(y)
    r_tot = np.zeros_like(x)
    x_adv = x.copy()
    iterations = np.zeros(n, int)
    stationary = np.zeros(n, bool)
    active = k0 == y
    for _ in range(spec.steps):
        idx = np.where(active)[0]
        if not len(idx):
            break
        logits, jac = model.logits_and_jacobian(x_adv[idx])
        pred = predict_from_logits(logits)
        moved = pred != k0[idx]
        active[idx[moved]] = False
        idx, logits, jac = idx[~moved], logits[~moved], jac[~moved]
        if not len(idx):
            break
        r = np.arange(len(idx))
        base = k0[idx]
        f_diff = logits - logits[r, base][:, None]
        w = jac.reshape(len(idx), jac.shape[1], -1)
        w = w - w[r, base][:, None, :]
        w_norm = np.sqrt((w * w).sum(axis=2))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.abs(f_diff) / w_norm
        ratio[r, base] = np.inf
        ratio[~np.isfinite(ratio)] = np.inf
        best = np.argmin(ratio, axis=1)
        dead = ~np.isfinite(ratio[r, best])
        stationary[idx[dead]] = True
        active[idx[dead]] = False
        wl = w[r, best]
        step = (np.abs(f_diff[r, best]) + 1e-9) / np.maximum(w_norm[r, best] ** 2, 1e-300)
        step[dead] = 0.0
        r_tot[idx] += (step[:, None] * wl).reshape((len(idx),) + x.shape[1:])
        iterations[idx[~dead]] += 1
        x_adv[idx] = np.clip(x[idx] + (1 + eta) * r_tot[idx], 0.0, 1.0)
    return _finish(model, x, x_adv, y, iterations, stationary, spec, k0, relative_to_clean=True)


def run_attack(model, x, y, spec, indices=None):
    if spec.kind == "fgsm":
        return fgsm(model, x, y, spec)
    if spec.kind == "pgd":
        return pgd(model, x, y, spec, indices)
    if spec.kind == "cw":
        return carlini_wagner(model, x, y, spec)
    return deepfool(model, x, spec, y)


def success_cap(spec):
    """L2 cap applied to cw/deepfool when judging accuracy; None means uncapped."""
    if spec.kind in ("cw", "deepfool") and spec.epsilon > 0:
        return spec.epsilon
    return None


@dataclass
class RobustnessReport:
    value: float
    used: int
    skipped_zero: int
    failed: int


def average_robustness(model, x, spec, return_report=False):
    """Mean of ``||r||_2 / ||x||_2`` over samples where DeepFool succeeded."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("dataset is empty")
    adv = deepfool(model, x, spec)
    xn = lp_norm(x, 2)
    zero = xn == 0
    use = adv.success & ~zero
    ratios = adv.norms["l2"][use] / xn[use]
    value = float(ratios.mean()) if use.any() else float("nan")
    if return_report:
        return RobustnessReport(value, int(use.sum()), int(zero.sum()), int((~adv.success & ~zero).sum()))
    return value
