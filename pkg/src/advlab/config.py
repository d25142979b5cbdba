"""Experiment configuration: an INI file with ``spec_version = 1``.

Unknown sections or keys are errors. Attack specs for the evaluation grid live
in sections named ``[attack.<name>]``.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .attacks import AttackSpec, norm_label
from .models import ARCHITECTURES

SPEC_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    source: str = "desk"  # desk | idx
    n_train: int = 5000
    n_test: int = 1000
    eval_size: int = 500  # test images used by the grid, boundary and PCA stages
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class TrainSection:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9


@dataclass
class AdversarialSection:
    epochs: int = 6
    steps: int = 5
    linf_epsilon: float = 0.1
    l2_epsilon: float = 1.0


@dataclass
class DistillSection:
    steps: int = 1000
    lr: float = 0.1
    init: str = "noise"
    subset: int = 0  # distil only the first N training images; 0 means all
    epochs: int = 10  # training epochs for the robust models


@dataclass
class AnalysisSection:
    svcca: bool = True
    pca: bool = True
    ks: bool = True
    boundary: bool = True
    svcca_batch: int = 128
    svcca_seeds: int = 5
    svcca_attacks: str = ""  # comma-separated attack names; empty means all pgd attacks
    variance_keep: float = 0.99
    ks_include_clean: bool = False
    boundary_samples: int = 100
    boundary_steps: int = 50
    pca_attack: str = ""  # attack name for the PCA exports; empty means the first attack


SECTIONS = {"data": DataSection, "train": TrainSection, "adversarial": AdversarialSection,
            "distill": DistillSection, "analysis": AnalysisSection}


@dataclass
class ExperimentConfig:
    seed: int = 0
    architecture: str = "conv-small"
    out: str = "runs/desk"
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    adversarial: AdversarialSection = field(default_factory=AdversarialSection)
    distill: DistillSection = field(default_factory=DistillSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    attacks: dict = field(default_factory=dict)  # name -> AttackSpec

    def validate(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}; choose from {sorted(ARCHITECTURES)}")
        if self.data.source not in ("desk", "idx"):
            raise ConfigError(f"data.source must be 'desk' or 'idx', got {self.data.source!r}")
        if self.data.source == "idx" and not all(
                (self.data.train_images, self.data.train_labels, self.data.test_images, self.data.test_labels)):
            raise ConfigError("data.source = idx needs train/test image and label paths")
        if self.data.n_train < 1 or self.data.n_test < 1 or self.data.eval_size < 1:
            raise ConfigError("dataset sizes must be positive")
        if self.train.epochs < 0 or self.adversarial.epochs < 0 or self.distill.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.distill.init not in ("noise", "other-image", "target"):
            raise ConfigError(f"distill.init {self.distill.init!r} is not a known init mode")
        if self.distill.steps < 1:
            raise ConfigError("distill.steps must be >= 1")
        a = self.analysis
        if not 0.0 < a.variance_keep <= 1.0:
            raise ConfigError("analysis.variance_keep must lie in (0, 1]")
        for name in self.svcca_attack_names() + ([a.pca_attack] if a.pca_attack else []):
            if name not in self.attacks:
                raise ConfigError(f"analysis refers to unknown attack {name!r}")
        return self

    def svcca_attack_names(self):
        a = self.analysis.svcca_attacks
        if a:
            return [s.strip() for s in a.split(",") if s.strip()]
        return [n for n, s in self.attacks.items() if s.kind == "pgd"]

    def to_dict(self):
        d = {"spec_version": SPEC_VERSION, "seed": self.seed, "architecture": self.architecture, "out": self.out}
        for name in SECTIONS:
            d[name] = asdict(getattr(self, name))
        d["attacks"] = {n: s.to_dict() for n, s in self.attacks.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.pop("spec_version", SPEC_VERSION) != SPEC_VERSION:
            raise ConfigError("unsupported spec_version")
        kw = {k: d[k] for k in ("seed", "architecture", "out") if k in d}
        for name, typ in SECTIONS.items():
            if name in d:
                kw[name] = typ(**d[name])
        kw["attacks"] = {n: AttackSpec.from_dict(s) for n, s in d.get("attacks", {}).items()}
        return cls(**kw).validate()

    def digest(self):
        """Hash of everything except the output directory."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def to_ini(self):
        cp = configparser.ConfigParser()
        cp["experiment"] = {"spec_version": str(SPEC_VERSION), "seed": str(self.seed),
                            "architecture": self.architecture, "out": self.out}
        for name in SECTIONS:
            cp[name] = {k: _fmt(v) for k, v in asdict(getattr(self, name)).items()}
        for n, s in self.attacks.items():
            sec = {"kind": s.kind, "norm": norm_label(s.norm), "epsilon": repr(s.epsilon), "steps": str(s.steps)}
            for f in fields(AttackSpec):
                value = getattr(s, f.name)
                if f.name not in sec and value is not None and value != f.default:
                    sec[f.name] = _fmt(value) if isinstance(value, bool) else repr(value)
            cp[f"attack.{n}"] = sec
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in cp[sec].items()]
            lines.append("")
        return "\n".join(lines)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(section, key, raw, typ):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        return typ(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {typ.__name__}") from None


_TYPES = {"int": int, "float": float, "str": str, "bool": bool}

ATTACK_KEYS = {"kind": str, "norm": str, "epsilon": float, "steps": int, "step_size": float,
               "random_start": bool, "overshoot": float, "cw_confidence": float, "cw_penalty": float, "seed": int}


def parse_config(text):
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    if "experiment" not in cp:
        raise ConfigError("missing [experiment] section")
    exp = dict(cp["experiment"])
    if exp.pop("spec_version", None) != str(SPEC_VERSION):
        raise ConfigError(f"[experiment] spec_version must be {SPEC_VERSION}")
    kw = {}
    for key, raw in exp.items():
        if key not in ("seed", "architecture", "out"):
            raise ConfigError(f"unknown key [experiment] {key}")
        kw[key] = _coerce("experiment", key, raw, int) if key == "seed" else raw
    attacks = {}
    for sec in cp.sections():
        if sec == "experiment":
            continue
        if sec.startswith("attack."):
            name = sec[len("attack."):]
            items = {}
            for key, raw in cp[sec].items():
                if key not in ATTACK_KEYS:
                    raise ConfigError(f"unknown key [{sec}] {key}")
                items[key] = _coerce(sec, key, raw, ATTACK_KEYS[key])
            if "kind" not in items:
                raise ConfigError(f"[{sec}] needs a kind")
            try:
                attacks[name] = AttackSpec(**items)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{sec}] {exc}") from None
            continue
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        typ = SECTIONS[sec]
        ftypes = {f.name: _TYPES[f.type] for f in fields(typ)}
        values = {}
        for key, raw in cp[sec].items():
            if key not in ftypes:
                raise ConfigError(f"unknown key [{sec}] {key}")
            values[key] = _coerce(sec, key, raw, ftypes[key])
        kw[sec] = typ(**values)
    return ExperimentConfig(attacks=attacks, **kw).validate()


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


DESK_ATTACKS = {
    "pgd-linf-0.025": AttackSpec("pgd", "inf", 0.025, steps=10),
    "pgd-l2-0.25": AttackSpec("pgd", 2, 0.25, steps=10),
    "pgd-l1-0.5": AttackSpec("pgd", 1, 0.5, steps=10),
    "pgd-linf-0.1": AttackSpec("pgd", "inf", 0.1, steps=10),
    "pgd-l2-1.0": AttackSpec("pgd", 2, 1.0, steps=10),
    "fgsm-linf-0.025": AttackSpec("fgsm", "inf", 0.025),
    "deepfool-l2-0.25": AttackSpec("deepfool", 2, 0.25, steps=20),
}


def desk_config(out="runs/desk", seed=0):
    """The standard desk experiment."""
    cfg = ExperimentConfig(seed=seed, out=out, attacks=dict(DESK_ATTACKS))
    cfg.analysis.svcca_attacks = "pgd-linf-0.025, pgd-l2-0.25"
    cfg.analysis.pca_attack = "pgd-linf-0.025"
    # reduced from the module defaults to fit the desk time budget
    cfg.distill.steps = 100
    cfg.distill.subset = 1000
    return cfg.validate()
