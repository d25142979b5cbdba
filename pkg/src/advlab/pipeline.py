"""End-to-end desk pipeline with per-stage checkpoints.

Layout under the output directory::

    data/      train/test IDX files, distilled datasets (+ JSON sidecars)
    models/    ADVL checkpoints
    tables/    CSV tables and per-stage JSON details
    pca/       PCA plot data, one CSV per model
    stages/    one marker per finished stage (result, artifact checksums, wall clock)
    report.json
"""

from __future__ import annotations

import csv
import hashlib
import json
import shutil
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .analysis import boundary_distance, ks_two_sample, pca_clean_vs_adversarial, svcca, write_pca_csv
from .attacks import AttackSpec, run_attack, success_cap
from .datasets import desk_corpus, load_idx, save_idx
from .distill import DistillConfig, build_robust_dataset, load_robust_dataset, save_robust_dataset
from .models import build_model
from .training import EvalGrid, GridRow, TrainConfig, train_adversarial, train_regular

STAGES = ["data", "regular", "adversarial", "distill", "robust", "evaluate", "svcca", "ks", "boundary", "pca"]

COMMANDS = {
    "train": STAGES[:3],
    "distill": STAGES[:5],
    "attack": STAGES[:6],
    "analyze": STAGES,
    "pipeline": STAGES,
    "report": [],
}

VARIANTS = ("l2", "linf")
MODEL_IDS = ["regular", "adv-l2", "adv-linf", "robust-l2", "robust-linf"]


class StageFailed(RuntimeError):
    """A numeric failure inside a stage; carries the stage name."""

    def __init__(self, stage, exc):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage
        self.cause = exc


def substream(seed, *names):
    """Named child seed of the global seed, stable across runs and platforms."""
    words = [int(seed)]
    for n in names:
        n = str(n)
        words.append(int.from_bytes(hashlib.sha256(n.encode()).digest()[:4], "little"))
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Pipeline:
    def __init__(self, cfg, out=None, jobs=1, log=None):
        self.cfg = cfg
        self.out = Path(out or cfg.out)
        self.jobs = max(1, int(jobs))
        self.log = log or (lambda msg: None)
        self.digest = cfg.digest()
        self._cache = {}

    # -- paths and markers ----------------------------------------------------

    def path(self, *parts):
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def marker_path(self, stage):
        return self.out / "stages" / f"{stage}.json"

    def marker(self, stage):
        """The stage marker if it is valid for this config and its artifacts are intact."""
        p = self.marker_path(stage)
        if not p.exists():
            return None
        m = json.loads(p.read_text())
        if m.get("config_digest") != self.digest:
            return None
        for rel, digest in m["artifacts"].items():
            f = self.out / rel
            if not f.exists() or sha256_file(f) != digest:
                return None
        return m

    def invalidate_from(self, stage):
        for s in STAGES[STAGES.index(stage):]:
            self.marker_path(s).unlink(missing_ok=True)

    # -- driver -------------------------------------------------------------------

    def run(self, stages, resume_from=None):
        if resume_from is not None:
            if resume_from not in STAGES:
                raise ValueError(f"unknown stage {resume_from!r}; choose from {STAGES}")
            self.invalidate_from(resume_from)
        for stage in stages:
            if not self.enabled(stage):
                continue
            if self.marker(stage) is not None:
                self.log(f"[{stage}] up to date")
                continue
            # a rerun of one stage invalidates everything after it
            self.invalidate_from(stage)
            self.log(f"[{stage}] running")
            t0 = time.perf_counter()
            try:
                result, artifacts = getattr(self, f"stage_{stage}")()
            except (FloatingPointError, ArithmeticError) as exc:
                raise StageFailed(stage, exc) from exc
            marker = {
                "stage": stage,
                "config_digest": self.digest,
                "result": result,
                "artifacts": {str(Path(a).relative_to(self.out)): sha256_file(a) for a in artifacts},
                "seconds": time.perf_counter() - t0,
            }
            self.path("stages", f"{stage}.json").write_text(json.dumps(marker, indent=1, sort_keys=True))
            self.log(f"[{stage}] done in {marker['seconds']:.1f}s")
        return self.write_report()

    def enabled(self, stage):
        a = self.cfg.analysis
        return {"svcca": a.svcca, "ks": a.ks, "boundary": a.boundary, "pca": a.pca}.get(stage, True)

    def write_report(self):
        stages, artifacts = {}, {}
        for stage in STAGES:
            m = self.marker(stage)
            if m is None:
                continue
            stages[stage] = {"result": m["result"], "seconds": m["seconds"]}
            artifacts.update(m["artifacts"])
        checksum = hashlib.sha256(json.dumps(
            {"artifacts": artifacts, "results": {s: v["result"] for s, v in stages.items()}},
            sort_keys=True).encode()).hexdigest()
        report = {
            "spec_version": 1,
            "config": self.cfg.to_dict(),
            "evaluation_split": "test (held out from all training)",
            "stages": stages,
            "wall_clock": {s: v["seconds"] for s, v in stages.items()},
            "artifacts": dict(sorted(artifacts.items())),
            "checksum": checksum,
        }
        self.path("report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
        return report

    # -- shared loaders ------------------------------------------------------------

    def seed(self, *names):
        return substream(self.cfg.seed, *names)

    def datasets(self):
        if "data" not in self._cache:
            d = self.out / "data"
            train = load_idx(d / "train-images.idx", d / "train-labels.idx", "train")
            test = load_idx(d / "test-images.idx", d / "test-labels.idx", "test")
            self._cache["data"] = (train, test)
        return self._cache["data"]

    def eval_set(self):
        _, test = self.datasets()
        n = min(self.cfg.data.eval_size, len(test))
        idx = np.sort(np.random.default_rng(self.seed("split", "eval")).permutation(len(test))[:n])
        return test.subset(idx)

    def fresh_model(self):
        _, test = self.datasets()
        return build_model(self.cfg.architecture, self.seed("init"), num_classes=10 if self.cfg.data.source == "desk"
                           else int(test.labels.max()) + 1)

    def model(self, model_id):
        key = ("model", model_id)
        if key not in self._cache:
            self._cache[key] = self.fresh_model().load_params(self.out / "models" / f"{model_id}.advl")
        return self._cache[key]

    def train_cfg(self, epochs, attack=None):
        t = self.cfg.train
        return TrainConfig(epochs, t.batch_size, t.lr, t.momentum, attack, self.seed("train"))

    def attack(self, name):
        spec = self.cfg.attacks[name]
        return spec.with_(seed=self.seed("attack", name, spec.seed))

    def adv_spec(self, variant):
        a = self.cfg.adversarial
        eps = a.l2_epsilon if variant == "l2" else a.linf_epsilon
        return AttackSpec("pgd", 2 if variant == "l2" else "inf", eps, steps=a.steps,
                          seed=self.seed("attack", "adversarial-training", variant))

    def _map(self, fn, items):
        if self.jobs == 1:
            return [fn(i) for i in items]
        with ThreadPoolExecutor(self.jobs) as pool:
            return list(pool.map(fn, items))

    # -- stages ----------------------------------------------------------------------

    def stage_data(self):
        c = self.cfg.data
        paths = [self.path("data", n) for n in
                 ("train-images.idx", "train-labels.idx", "test-images.idx", "test-labels.idx")]
        if c.source == "desk":
            train, test = desk_corpus(self.seed("data"), c.n_train, c.n_test)
            save_idx(train, paths[0], paths[1])
            save_idx(test, paths[2], paths[3])
            provenance = {"source": "desk glyph corpus", "seed": self.seed("data")}
        else:
            for src, dst in zip((c.train_images, c.train_labels, c.test_images, c.test_labels), paths):
                shutil.copyfile(src, dst)
            provenance = {"source": "idx", "files": [c.train_images, c.train_labels, c.test_images, c.test_labels]}
        self._cache.pop("data", None)
        train, test = self.datasets()
        result = {"provenance": provenance, "n_train": len(train), "n_test": len(test),
                  "n_eval": len(self.eval_set()), "classes": int(train.labels.max()) + 1}
        return result, paths

    def stage_regular(self):
        train, _ = self.datasets()
        model, curve = train_regular(self.fresh_model(), train, self.train_cfg(self.cfg.train.epochs))
        path = self.path("models", "regular.advl")
        model.save(path)
        self._cache[("model", "regular")] = model
        return {"loss_curve": curve}, [path]

    def stage_adversarial(self):
        train, _ = self.datasets()
        result, paths = {}, []
        for v in VARIANTS:
            spec = self.adv_spec(v)
            model, curve = train_adversarial(self.fresh_model(), train,
                                             self.train_cfg(self.cfg.adversarial.epochs, spec))
            path = self.path("models", f"adv-{v}.advl")
            model.save(path)
            self._cache[("model", f"adv-{v}")] = model
            result[f"adv-{v}"] = {"attack": spec.to_dict(), "loss_curve": curve}
            paths.append(path)
        return result, paths

    def stage_distill(self):
        train, _ = self.datasets()
        d = self.cfg.distill
        source = train.head(d.subset) if d.subset else train
        result, paths = {}, []
        for v in VARIANTS:
            dcfg = DistillConfig(d.steps, d.lr, d.init, self.seed("distill", v))
            robust = build_robust_dataset(source, self.model(f"adv-{v}"), dcfg)
            stem = f"robust-{v}"
            save_robust_dataset(robust, self.out / "data", stem, extra={"source_model": f"adv-{v}"})
            paths += [self.out / "data" / f"{stem}-images.idx", self.out / "data" / f"{stem}-labels.idx",
                      self.out / "data" / f"{stem}.json"]
            result[stem] = {"n": len(robust.labels), "failed": int(robust.failed.sum()),
                            "median_distance": float(np.median(robust.distances))}
        return result, paths

    def stage_robust(self):
        result, paths = {}, []
        for v in VARIANTS:
            # train from the persisted (8-bit) images so a resumed run sees the same data
            data = load_robust_dataset(self.out / "data", f"robust-{v}").to_dataset()
            model, curve = train_regular(self.fresh_model(), data, self.train_cfg(self.cfg.distill.epochs))
            path = self.path("models", f"robust-{v}.advl")
            model.save(path)
            self._cache[("model", f"robust-{v}")] = model
            result[f"robust-{v}"] = {"loss_curve": curve}
            paths.append(path)
        return result, paths

    def stage_evaluate(self):
        ev = self.eval_set()
        names = list(self.cfg.attacks)

        def cells(model_id):
            m = self.model(model_id)
            rows = [GridRow(model_id, None, m.accuracy(ev.images, ev.labels))]
            for name in names:
                spec = self.attack(name)
                adv = run_attack(m, ev.images, ev.labels, spec)
                rows.append(GridRow(model_id, spec, adv.accuracy(success_cap(spec))))
            return rows

        grid = EvalGrid([r for rows in self._map(cells, MODEL_IDS) for r in rows])
        csv_path = self.path("tables", "grid.csv")
        grid.to_csv(csv_path)
        records = grid.to_records()
        for rec, row in zip(records, grid.rows):
            rec["attack_name"] = next((n for n in names if row.spec == self.attack(n)), "none")
            rec["accuracy"] = row.accuracy
        return {"rows": records}, [csv_path]

    def stage_svcca(self):
        _, test = self.datasets()
        a = self.cfg.analysis
        jobs = [(m, n, k) for m in MODEL_IDS for n in self.cfg.svcca_attack_names() for k in range(a.svcca_seeds)]

        def one(job):
            model_id, name, k = job
            rng = np.random.default_rng(self.seed("split", "svcca", k))
            idx = np.sort(rng.permutation(len(test))[:a.svcca_batch])
            m = self.model(model_id)
            spec = self.attack(name).with_(seed=self.seed("attack", "svcca", name, k))
            adv = run_attack(m, test.images[idx], test.labels[idx], spec)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                res = svcca(m.representation(adv.originals), m.representation(adv.adversarials), a.variance_keep)
            return {"model_id": model_id, "attack": name, "seed": k, "mean": res.mean,
                    "kept_a": res.kept_a, "kept_b": res.kept_b}

        rows = self._map(one, jobs)
        path = self.path("tables", "svcca.csv")
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["model_id", "attack", "seed", "mean", "kept_a", "kept_b"])
            w.writeheader()
            w.writerows({**r, "mean": repr(r["mean"])} for r in rows)
        summary = {}
        for r in rows:
            summary.setdefault(r["model_id"], {}).setdefault(r["attack"], []).append(r["mean"])
        means = {m: {n: float(np.mean(v)) for n, v in d.items()} for m, d in summary.items()}
        return {"per_seed": rows, "mean": means}, [path]

    def stage_ks(self):
        m = self.marker("evaluate")
        if m is None:
            raise RuntimeError("ks needs the evaluate stage")
        rows = m["result"]["rows"]
        include = self.cfg.analysis.ks_include_clean

        def column(model_id):
            return [r["accuracy"] for r in rows if r["model_id"] == model_id and (include or r["attack"] != "none")]

        result = {}
        for v in VARIANTS:
            a, b = column(f"robust-{v}"), column(f"adv-{v}")
            if not a or not b:
                result[v] = {"skipped": "no attack rows"}
                continue
            res = ks_two_sample(a, b)
            result[v] = {**res.to_dict(), "reject_at_0.05": bool(res.pvalue < 0.05)}
        path = self.path("tables", "ks.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pair", "statistic", "pvalue", "n", "m"])
            for v, r in result.items():
                if "skipped" in r:
                    continue
                w.writerow([f"robust-{v} vs adv-{v}", repr(r["statistic"]), repr(r["pvalue"]), r["n"], r["m"]])
        return result, [path]

    def stage_boundary(self):
        ev = self.eval_set()
        a = self.cfg.analysis
        x = ev.images[:a.boundary_samples]
        spec = AttackSpec("deepfool", 2, steps=a.boundary_steps)

        def one(model_id):
            return model_id, boundary_distance(self.model(model_id), x, spec)

        reports = dict(self._map(one, MODEL_IDS))
        path = self.path("tables", "boundary.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model_id", "mean_l2", "mean_linf", "mean_steps", "excluded"])
            for mid, r in reports.items():
                w.writerow([mid, repr(r.mean_l2), repr(r.mean_linf), repr(r.mean_steps), r.excluded])
        detail = self.path("tables", "boundary.json")
        detail.write_text(json.dumps({k: r.to_dict() for k, r in reports.items()}, sort_keys=True))
        result = {k: {"mean_l2": r.mean_l2, "mean_linf": r.mean_linf, "mean_steps": r.mean_steps,
                      "excluded": r.excluded} for k, r in reports.items()}
        return result, [path, detail]

    def stage_pca(self):
        ev = self.eval_set()
        name = self.cfg.analysis.pca_attack or next(iter(self.cfg.attacks), None)
        if name is None:
            return {"skipped": "no attacks configured"}, []
        spec = self.attack(name)

        def one(model_id):
            m = self.model(model_id)
            adv = run_attack(m, ev.images, ev.labels, spec)
            c, a, fit = pca_clean_vs_adversarial(m.representation(adv.originals), m.representation(adv.adversarials))
            path = self.path("pca", f"{model_id}.csv")
            write_pca_csv(path, ev.labels, c, a)
            return path, [float(e) for e in fit.explained]

        out = self._map(one, MODEL_IDS)
        result = {"attack": name, "explained": {mid: e for mid, (_, e) in zip(MODEL_IDS, out)}}
        return result, [p for p, _ in out]
