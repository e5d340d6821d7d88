"""Experiment pipeline: train a grid, select on validation, evaluate on test.

Seed derivation tree (every draw traces to the master seed ``m``)::

    data      train / val / test rollouts   derive(m, 0, 0|1|2)
              file split                    derive(m, 0, 3)
    cells     initialization                derive(m, 1, cell_index, restart)
    bootstrap per learner                   derive(m, 2, learner_index)
    rollouts  per learner                   derive(m, 3, learner_index)

where ``derive`` hashes its arguments with ``numpy.random.SeedSequence``.

A run directory holds::

    config.json              normalized experiment config
    data/{train,val,test}.ds.jsonl
    cells/<cell>/manifest.json and ckpt-<step>.policy
    report.json, summary.txt
    timestamps.json          wall-clock times, kept out of the report

The report is assembled from the stored artifacts only, so
:func:`verify_report` can rebuild it and compare.
"""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import behavior as bh
from . import estimators as est
from . import learners as lrn
from .bootstrap import bca_interval
from .data import Dataset, SplitSpec, load_dataset, save_dataset, split
from .envs import EnvSpec, Env, generate_logged_data, make_env, mc_value
from .errors import PoelaError, TrainingError, UnsupportedInputError
from .neighborhood import build_index, precompute_masks
from .policy import load_policy, objective_gradient, save_policy

log = logging.getLogger(__name__)

REPORT_FORMAT = "poela-report"
REPORT_VERSION = 1
CHECKPOINT_MODE = "checkpoint"
FINAL_MODE = "final"
TOLERANCE = 1e-9


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# --- configuration -------------------------------------------------------


@dataclass(frozen=True)
class LearnerSpec:
    """One learner's hyperparameter grid; ``base`` holds the fixed TrainConfig fields."""

    learner: str
    grid: Optional[dict] = None
    restarts: int = 1
    base: dict = field(default_factory=dict)

    def configs(self) -> list:
        base = {k: v for k, v in self.base.items() if k not in ("learner", "restarts", "seed")}
        base.setdefault("lr", 1.0)
        base.setdefault("M", lrn.DEFAULT_M)
        return lrn.expand_grid(self.learner, self.grid, base)

    def to_dict(self) -> dict:
        return {"learner": self.learner, "grid": self.grid, "restarts": self.restarts, **self.base}

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerSpec":
        d = dict(d)
        learner = d.pop("learner")
        grid = d.pop("grid", None)
        restarts = int(d.pop("restarts", 1))
        if restarts < 1:
            raise ValueError("restarts must be >= 1")
        return cls(learner, grid, restarts, d)


@dataclass(frozen=True)
class ExperimentConfig:
    data: dict
    learners: tuple
    output_dir: str
    master_seed: int = 0
    behavior_source: object = None
    ess_threshold: float = 0.0
    selection: str = CHECKPOINT_MODE
    test_mode: str = "sntis"
    mc_rollouts: int = 1000
    bootstrap: Optional[dict] = None
    low_reward_threshold: Optional[float] = None
    workers: int = 1

    def __post_init__(self):
        if not self.learners:
            raise ValueError("config needs at least one learner")
        object.__setattr__(self, "learners", tuple(
            s if isinstance(s, LearnerSpec) else LearnerSpec.from_dict(s) for s in self.learners))
        if self.ess_threshold < 0:
            raise ValueError("ess_threshold must be >= 0")
        if self.selection not in (CHECKPOINT_MODE, FINAL_MODE):
            raise ValueError(f"selection must be {CHECKPOINT_MODE!r} or {FINAL_MODE!r}")
        if self.test_mode not in ("mc", "sntis"):
            raise ValueError("test_mode must be 'mc' or 'sntis'")
        if self.test_mode == "mc" and "env" not in self.data:
            raise ValueError("test_mode 'mc' needs an environment in the data section")
        if "env" not in self.data and "file" not in self.data:
            raise ValueError("data section needs 'env' or 'file'")
        if self.mc_rollouts < 1 or self.workers < 1:
            raise ValueError("mc_rollouts and workers must be >= 1")
        for spec in self.learners:
            spec.configs()  # validates the grid
            if spec.learner == lrn.PO_MU and self.behavior_source is None:
                raise ValueError("PO-mu needs a behavior_source")

    def to_dict(self) -> dict:
        return {
            "data": self.data,
            "learners": [s.to_dict() for s in self.learners],
            "output_dir": self.output_dir,
            "master_seed": self.master_seed,
            "behavior_source": self.behavior_source,
            "ess_threshold": self.ess_threshold,
            "selection": self.selection,
            "test_mode": self.test_mode,
            "mc_rollouts": self.mc_rollouts,
            "bootstrap": self.bootstrap,
            "low_reward_threshold": self.low_reward_threshold,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def _write_json(path: Path, obj):
    path.write_text(_dump(obj), encoding="utf-8")


def _finite(x):
    """JSON-safe number: infinities become strings."""
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


# --- data ----------------------------------------------------------------


def _env(config_data: dict) -> Optional[Env]:
    return make_env(EnvSpec.from_dict(config_data["env"])) if "env" in config_data else None


def prepare_data(cfg: ExperimentConfig) -> dict:
    """Train / val / test datasets for a config (not yet written to disk)."""
    d, m = cfg.data, cfg.master_seed
    if "file" in d:
        ds = load_dataset(d["file"])
        sp = dict(d.get("split", {}))
        sp.setdefault("seed", derive_seed(m, 0, 3))
        tr, va, te = split(ds, SplitSpec(**sp))
        return {"train": tr, "val": va, "test": te}
    env = _env(d)
    behavior = d.get("behavior", "uniform")
    sizes = [int(d.get(f"n_{k}", 1000)) for k in ("train", "val", "test")]
    return {k: generate_logged_data(env, behavior, n, derive_seed(m, 0, i))
            for i, (k, n) in enumerate(zip(("train", "val", "test"), sizes))}


def make_behavior(source, data_cfg: dict, train: Dataset) -> Optional[bh.BehaviorEstimate]:
    """Behavior estimate from a config source: ``None``, ``"logged"`` or ``{"knn": k}``."""
    if source is None:
        return None
    if source == "logged":
        env = _env(data_cfg)
        if env is None:
            raise ValueError("behavior_source 'logged' needs an environment")
        return bh.known_behavior(env.behavior_fn(data_cfg.get("behavior", "uniform")),
                                 env.action_count)
    if isinstance(source, dict) and "knn" in source:
        return bh.knn_behavior(train, int(source["knn"]))
    raise ValueError(f"unknown behavior_source {source!r}")


# --- cells ---------------------------------------------------------------


def cell_plan(cfg: ExperimentConfig) -> list:
    """Ordered (cell id, learner index, TrainConfig) triples for every grid cell and restart."""
    plan, k = [], 0
    for li, spec in enumerate(cfg.learners):
        for grid_cfg in spec.configs():
            for r in range(spec.restarts):
                tc = replace(grid_cfg, seed=derive_seed(cfg.master_seed, 1, k, r))
                plan.append((f"{len(plan):03d}-{spec.learner}-r{r}", li, tc))
            k += 1
    return plan


def _mask_context(tc: lrn.TrainConfig, train: Dataset, behavior) -> lrn.MaskContext:
    return lrn.mask_context(tc, train, behavior)


def _run_cell(cell_id: str, tc_dict: dict, run_dir: str, behavior_source, data_cfg: dict) -> dict:
    """Train one cell and write its checkpoints; never raises."""
    run = Path(run_dir)
    out = run / "cells" / cell_id
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"cell": cell_id, "config": tc_dict, "status": "ok", "error": None, "checkpoints": []}
    try:
        tc = lrn.TrainConfig.from_dict(tc_dict)
        train = load_dataset(run / "data" / "train.ds.jsonl")
        val = load_dataset(run / "data" / "val.ds.jsonl")
        behavior = make_behavior(behavior_source, data_cfg, train)
        cks = lrn.train(tc, train, val, _mask_context(tc, train, behavior))
        for ck in cks:
            name = f"ckpt-{ck.step}.policy"
            save_policy(out / name, ck.params, {"cell": cell_id, "step": ck.step})
            manifest["checkpoints"].append({
                "step": ck.step, "file": name, "train_objective": ck.train_objective,
                "val": None if ck.val is None else ck.val.to_dict()})
    except (PoelaError, ValueError, FloatingPointError) as exc:
        log.warning("cell %s failed: %s", cell_id, exc)
        manifest["status"] = "failed"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
    _write_json(out / "manifest.json", manifest)
    return manifest


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run every cell, then assemble and write the report."""
    run = Path(cfg.output_dir)
    (run / "data").mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    _write_json(run / "config.json", cfg.to_dict())
    for name, ds in prepare_data(cfg).items():
        save_dataset(ds, run / "data" / f"{name}.ds.jsonl")
    plan = cell_plan(cfg)
    args = [(cid, tc.to_dict(), str(run), cfg.behavior_source, cfg.data) for cid, _, tc in plan]
    t1 = time.time()
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            manifests = list(pool.map(_run_cell, *zip(*args)))
    else:
        manifests = [_run_cell(*a) for a in args]
    t2 = time.time()
    if all(m["status"] == "failed" for m in manifests):
        raise TrainingError("all cells failed; see cells/*/manifest.json")
    report = assemble_report(run)
    _write_json(run / "report.json", report)
    (run / "summary.txt").write_text(format_summary(report), encoding="utf-8")
    _write_json(run / "timestamps.json", {
        "started": t0, "data_seconds": t1 - t0, "train_seconds": t2 - t1,
        "report_seconds": time.time() - t2})
    return report


# --- report assembly -----------------------------------------------------


class MissingArtifact(PoelaError):
    pass


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing artifact: {path}")
    return path


def _load_run(run: Path):
    cfg = ExperimentConfig.from_dict(json.loads(_require(run / "config.json").read_text()))
    data = {k: load_dataset(_require(run / "data" / f"{k}.ds.jsonl")) for k in ("train", "val", "test")}
    return cfg, data


def _cell_metrics(run: Path, cell_id: str, manifest: dict, data: dict, behavior) -> tuple:
    """Recompute every checkpoint's metrics from its stored parameters."""
    tc = lrn.TrainConfig.from_dict(manifest["config"])
    mc = _mask_context(tc, data["train"], behavior)
    rows, policies = [], {}
    for entry in manifest["checkpoints"]:
        params, _ = load_policy(_require(run / "cells" / cell_id / entry["file"]))
        obj, _ = objective_gradient(params, data["train"], mc.train_masks, tc.M, tc.lam)
        pol = mc.policy(params)
        val = lrn.evaluate_sntis(pol, data["val"], tc.M)
        rows.append({"step": entry["step"], "file": entry["file"], "train_objective": obj,
                     "val": None if val is None else val.to_dict()})
        policies[entry["step"]] = pol
    return tc, rows, policies


def _select(candidates: list, ess_threshold: float):
    """Highest validation value among ESS-passing candidates; earliest wins ties."""
    best = None
    for c in candidates:
        v = c["val"]
        if v is None or v["ess"] < ess_threshold:
            continue
        if best is None or v["value"] > best["val"]["value"]:
            best = c
    return best


def assemble_report(run_dir) -> dict:
    """Build the report from the artifacts in ``run_dir``."""
    run = Path(run_dir)
    cfg, data = _load_run(run)
    env = _env(cfg.data)
    behavior = make_behavior(cfg.behavior_source, cfg.data, data["train"])
    plan = cell_plan(cfg)
    cells, per_learner = [], {i: [] for i in range(len(cfg.learners))}
    policies = {}
    for cid, li, tc in plan:
        manifest = json.loads(_require(run / "cells" / cid / "manifest.json").read_text())
        if manifest["config"] != tc.to_dict():
            raise PoelaError(f"cell {cid}: stored config does not match the plan")
        cell = {"cell": cid, "learner": tc.learner, "config": tc.to_dict(),
                "status": manifest["status"], "error": manifest["error"], "checkpoints": []}
        if manifest["status"] == "ok":
            _, rows, pols = _cell_metrics(run, cid, manifest, data, behavior)
            cell["checkpoints"] = rows
            for row in rows:
                policies[(cid, row["step"])] = pols[row["step"]]
            pool = rows if cfg.selection == CHECKPOINT_MODE else rows[-1:]
            per_learner[li].extend({"cell": cid, "M": tc.M, **row} for row in pool)
        cells.append(cell)

    learners = {}
    for li, spec in enumerate(cfg.learners):
        chosen = _select(per_learner[li], cfg.ess_threshold)
        entry = {"status": "no policy selected", "selected": None}
        if chosen is not None:
            pol = policies[(chosen["cell"], chosen["step"])]
            entry = {"status": "selected",
                     "selected": {"cell": chosen["cell"], "step": chosen["step"], "file": chosen["file"]},
                     "val": chosen["val"]}
            entry.update(_evaluate_selected(cfg, li, pol, chosen["M"], data, env))
        learners[spec.learner] = entry

    return {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "master_seed": cfg.master_seed,
        "selection": cfg.selection,
        "ess_threshold": cfg.ess_threshold,
        "test_mode": cfg.test_mode,
        "fingerprints": {k: ds.fingerprint for k, ds in data.items()},
        "sizes": {k: ds.n for k, ds in data.items()},
        "cells": cells,
        "learners": learners,
    }


def _evaluate_selected(cfg: ExperimentConfig, li: int, pol, M: float, data: dict, env) -> dict:
    out = {}
    test = lrn.evaluate_sntis(pol, data["test"], M)
    out["test"] = None if test is None else test.to_dict()
    if cfg.bootstrap is not None and test is not None:
        b = cfg.bootstrap
        res = bca_interval(data["test"], pol, "sntis", M, int(b.get("B", 2000)),
                           float(b.get("alpha", 0.05)), derive_seed(cfg.master_seed, 2, li))
        out["bca"] = res.to_dict()
    if env is not None and cfg.test_mode == "mc":
        seed = derive_seed(cfg.master_seed, 3, li)
        mean, se = mc_value(env, pol, cfg.mc_rollouts, seed)
        out["mc"] = {"mean": mean, "se": se, "rollouts": cfg.mc_rollouts, "seed": seed}
        out["overfitting_gap"] = _val_value(pol, data["val"], M) - mean
    if env is not None:
        try:
            out["first_step_probs"] = pol.probs(env.initial_context_list())[0].tolist()
        except UnsupportedInputError:
            pass
    if cfg.low_reward_threshold is not None:
        w = est.compute_weights(pol, data["train"], M)
        try:
            out["low_reward_mass"] = est.low_reward_weight_mass(w, data["train"],
                                                                cfg.low_reward_threshold)
        except PoelaError:
            out["low_reward_mass"] = None
    if env is not None:
        try:
            dec = est.decompose(pol, data["test"], lambda x: env.oracle_value(pol, x), M)
            out["decomposition"] = {"empirical_v": dec.empirical_v,
                                    "context_shift": dec.context_shift,
                                    "per_context_error": dec.per_context_error,
                                    "snis_value": dec.snis_value}
        except (UnsupportedInputError, PoelaError):
            pass
    return out


def _val_value(pol, val: Dataset, M: float) -> float:
    e = lrn.evaluate_sntis(pol, val, M)
    return math.nan if e is None else e.value


def format_summary(report: dict) -> str:
    lines = [f"selection={report['selection']} ess_threshold={report['ess_threshold']} "
             f"master_seed={report['master_seed']}"]
    failed = [c["cell"] for c in report["cells"] if c["status"] != "ok"]
    lines.append(f"cells: {len(report['cells'])} ({len(failed)} failed)")
    for name, e in report["learners"].items():
        if e["status"] != "selected":
            lines.append(f"{name}: no policy selected")
            continue
        s = e["selected"]
        parts = [f"{name}: {s['cell']} step {s['step']}", f"val={e['val']['value']:.4f}",
                 f"val_ess={e['val']['ess']:.1f}"]
        if e.get("test") is not None:
            parts.append(f"test={e['test']['value']:.4f}")
        if "bca" in e:
            parts.append(f"bca=[{e['bca']['lb']:.4f}, {e['bca']['ub']:.4f}]")
        if "mc" in e:
            parts.append(f"mc={e['mc']['mean']:.4f}+-{e['mc']['se']:.4f}")
            parts.append(f"gap={e['overfitting_gap']:.4f}")
        if e.get("low_reward_mass") is not None:
            parts.append(f"low_reward_mass={e['low_reward_mass']:.4f}")
        lines.append("  ".join(parts))
    return "\n".join(lines) + "\n"


# --- verification --------------------------------------------------------


def _compare(expected, actual, path: str, out: list):
    if isinstance(expected, dict) and isinstance(actual, dict):
        for k in sorted(set(expected) | set(actual)):
            if k not in actual:
                out.append(f"{path}.{k}: missing from report")
            elif k not in expected:
                out.append(f"{path}.{k}: unexpected field")
            else:
                _compare(expected[k], actual[k], f"{path}.{k}", out)
    elif isinstance(expected, list) and isinstance(actual, list):
        if len(expected) != len(actual):
            out.append(f"{path}: length {len(actual)} != recomputed {len(expected)}")
        for i, (e, a) in enumerate(zip(expected, actual)):
            _compare(e, a, f"{path}[{i}]", out)
    elif isinstance(expected, (int, float)) and isinstance(actual, (int, float)) \
            and not isinstance(expected, bool) and not isinstance(actual, bool):
        if math.isnan(expected) and math.isnan(actual):
            return
        if not abs(expected - actual) <= TOLERANCE * max(1.0, abs(expected)):
            out.append(f"{path}: report {actual!r} != recomputed {expected!r}")
    elif expected != actual:
        out.append(f"{path}: report {actual!r} != recomputed {expected!r}")


@dataclass
class VerifyResult:
    ok: bool
    discrepancies: list
    missing: list

    def __bool__(self):
        return self.ok


def verify_report(run_dir) -> VerifyResult:
    """Recompute the report from stored artifacts and compare within 1e-9."""
    run = Path(run_dir)
    missing = [str(p) for p in (run / "report.json", run / "config.json") if not p.exists()]
    if missing:
        return VerifyResult(False, [], missing)
    # Every file the manifests reference must exist.
    for manifest_path in sorted((run / "cells").glob("*/manifest.json")):
        manifest = json.loads(manifest_path.read_text())
        for entry in manifest["checkpoints"]:
            p = manifest_path.parent / entry["file"]
            if not p.exists():
                missing.append(str(p))
    try:
        expected = assemble_report(run)
    except MissingArtifact as exc:
        missing.append(str(exc).split(": ", 1)[-1])
        return VerifyResult(False, [], sorted(set(missing)))
    if missing:
        return VerifyResult(False, [], missing)
    actual = json.loads((run / "report.json").read_text())
    discrepancies = []
    _compare(json.loads(_dump(expected)), actual, "report", discrepancies)
    # Training-loop values recorded in the manifests must match the recomputation.
    for cell in expected["cells"]:
        manifest = json.loads((run / "cells" / cell["cell"] / "manifest.json").read_text())
        for i, (row, entry) in enumerate(zip(cell["checkpoints"], manifest["checkpoints"])):
            _compare(row["train_objective"], entry["train_objective"],
                     f"cells/{cell['cell']}/manifest.checkpoints[{i}].train_objective", discrepancies)
            _compare(row["val"], entry["val"],
                     f"cells/{cell['cell']}/manifest.checkpoints[{i}].val", discrepancies)
    return VerifyResult(not discrepancies, discrepancies, [])


def reselect(run_dir, ess_threshold: float, selection: Optional[str] = None) -> dict:
    """Re-run selection on a finished run with a different ESS threshold."""
    report = json.loads(_require(Path(run_dir) / "report.json").read_text())
    mode = selection or report["selection"]
    out = {}
    for name in report["learners"]:
        pool = []
        for cell in report["cells"]:
            if cell["learner"] != name or cell["status"] != "ok":
                continue
            rows = cell["checkpoints"] if mode == CHECKPOINT_MODE else cell["checkpoints"][-1:]
            pool.extend({"cell": cell["cell"], **r} for r in rows)
        best = _select(pool, ess_threshold)
        out[name] = None if best is None else {"cell": best["cell"], "step": best["step"],
                                               "val": best["val"]}
    return out


# --- diagnostics ---------------------------------------------------------


def delta_sweep(base: lrn.TrainConfig, deltas, train: Dataset, val: Dataset, test: Dataset,
                env: Optional[Env] = None, mc_rollouts: int = 1000, seed: int = 0) -> list:
    """Train POELA once per ``delta`` and tabulate training and test estimates of the final policy."""
    if base.learner != lrn.POELA:
        raise ValueError("delta_sweep needs a POELA base config")
    rows = []
    for delta in deltas:
        tc = replace(base, delta=float(delta))
        mc = lrn.mask_context(tc, train)
        final = lrn.train(tc, train, val, mc)[-1]
        pol = mc.policy(final.params)
        tr = lrn.evaluate_sntis(pol, train, tc.M)
        te = lrn.evaluate_sntis(pol, test, tc.M)
        row = {"delta": _finite(float(delta)),
               "train_sntis": None if tr is None else tr.value,
               "train_ess": None if tr is None else tr.ess,
               "test_sntis": None if te is None else te.value,
               "test_ess": None if te is None else te.ess}
        if env is not None:
            row["test_mc"] = mc_value(env, pol, mc_rollouts, seed)[0]
        rows.append(row)
    return rows


def diagnose_masks(dataset: Dataset, delta: float, behavior: bh.BehaviorEstimate, b: float) -> dict:
    """Compare the POELA delta-rule mask with the behavior-threshold mask at every logged step."""
    elig = np.asarray(precompute_masks(build_index(dataset), dataset, delta).allowed)
    thr = bh.overlap_mask(behavior, dataset, b)
    inter = (elig & thr).sum(axis=1)
    union = (elig | thr).sum(axis=1)
    jaccard = inter / union
    n_e, n_t = elig.sum(axis=1), thr.sum(axis=1)
    return {
        "delta": float(delta),
        "b": float(b),
        "steps": int(dataset.n_steps),
        "eligible_size": n_e.tolist(),
        "threshold_size": n_t.tolist(),
        "jaccard": jaccard.tolist(),
        "mean_eligible_size": float(n_e.mean()),
        "mean_threshold_size": float(n_t.mean()),
        "mean_jaccard": float(jaccard.mean()),
        "poela_more_conservative": int(np.sum(n_e < n_t)),
        "threshold_more_conservative": int(np.sum(n_t < n_e)),
    }
