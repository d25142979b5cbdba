"""Regular and adversarial training, and accuracy-under-attack grids."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackSpec, norm_label, run_attack, success_cap
from .tensor import SGD, NonFiniteError


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch, detail=""):
        super().__init__(f"training diverged in epoch {epoch}{': ' + detail if detail else ''}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    attack: AttackSpec | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _minibatch_seed(seed, epoch, batch):
    return int(np.random.SeedSequence([seed, epoch, batch]).generate_state(1)[0])


def _fit(model, dataset, cfg, attack):
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = model.copy()
    X, y = dataset.images, dataset.labels
    opt = SGD(model.params, cfg.lr, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(y))
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(y), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xb, yb = X[idx], y[idx]
            if attack is not None:
                spec = attack.with_(seed=_minibatch_seed(attack.seed, epoch, b))
                xb = run_attack(model, xb, yb, spec, indices=idx).adversarials
            try:
                loss, grads = model.loss_and_param_grads(xb, yb)
            except NonFiniteError as exc:
                raise TrainingDiverged(epoch, str(exc)) from exc
            if not np.isfinite(loss) or not opt.step(grads):
                raise TrainingDiverged(epoch, "non-finite loss or gradient")
            total += loss * len(idx)
            count += len(idx)
        curve.append(total / count)
    return model, curve


def train_regular(model, dataset, cfg):
    """SGD with momentum on cross-entropy. Returns ``(trained_copy, loss_per_epoch)``."""
    return _fit(model, dataset, cfg, None)


def train_adversarial(model, dataset, cfg):
    """Train on attacked minibatches, each produced against the current weights."""
    if cfg.attack is None or cfg.attack.kind not in ("pgd", "fgsm"):
        raise ValueError("adversarial training needs a pgd or fgsm inner attack")
    return _fit(model, dataset, cfg, cfg.attack)


@dataclass
class GridRow:
    model_id: str
    spec: AttackSpec | None
    accuracy: float

    def csv_fields(self):
        if self.spec is None:
            return ["none", "-", "-", "-", self.model_id, repr(self.accuracy)]
        s = self.spec
        return [s.kind, norm_label(s.norm), repr(float(s.epsilon)), str(s.steps), self.model_id, repr(self.accuracy)]


@dataclass
class EvalGrid:
    rows: list = field(default_factory=list)

    def accuracy(self, model_id, spec=None):
        for row in self.rows:
            if row.model_id == model_id and row.spec == spec:
                return row.accuracy
        raise KeyError((model_id, spec))

    def column(self, model_id, include_clean=False):
        return [r.accuracy for r in self.rows
                if r.model_id == model_id and (include_clean or r.spec is not None)]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["attack", "norm", "epsilon", "steps", "model_id", "accuracy"])
            for row in self.rows:
                w.writerow(row.csv_fields())

    def to_records(self):
        return [dict(zip(["attack", "norm", "epsilon", "steps", "model_id", "accuracy"], r.csv_fields()))
                for r in self.rows]


def evaluate_grid(models, attacks, dataset):
    """Accuracy of each model under each attack, plus a clean ("no attack") row.

    ``models`` maps a model id to a model. Attacks that do not take a budget
    natively (cw, deepfool) use ``epsilon`` as an L2 cap on success.
    """
    grid = EvalGrid()
    X, y = dataset.images, dataset.labels
    for model_id, model in models.items():
        grid.rows.append(GridRow(model_id, None, model.accuracy(X, y)))
        for spec in attacks:
            adv = run_attack(model, X, y, spec)
            grid.rows.append(GridRow(model_id, spec, adv.accuracy(success_cap(spec))))
    return grid
