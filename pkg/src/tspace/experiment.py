"""Run directories, run manifests, and multi-run comparisons."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .errors import ConfigError
from .registry import RUN_MANIFEST, fingerprint_hex, save_checkpoint, write_json
from .trainer import ConvergenceLog, RunConfig, allocation_from_config, train

log = logging.getLogger(__name__)

CONVERGENCE_CSV = "convergence.csv"
COMPARE_FIELDS = ("run", "iteration", "metric", "value")


def run_manifest(config: RunConfig, **extra) -> dict:
    schedule = config.noise_schedule()
    subseq = config.subsequence()
    out = {
        "format_version": 1,
        "tspace_version": __version__,
        "name": config.name,
        "regime": config.regime,
        "config": config.to_dict(),
        "schedule": schedule.spec(),
        "schedule_fingerprint": fingerprint_hex(schedule.fingerprint),
        "run_seed": config.run_seed,
        "taus": None if subseq is None else list(subseq.taus),
        "taus_source": None if subseq is None else subseq.source,
        "taus_reconstructed": [] if subseq is None else list(subseq.reconstructed),
        "training_alpha_bars": None if subseq is None else [repr(float(schedule.alphas[t])) for t in subseq.taus],
    }
    if config.regime == "disentangled":
        out["allocation"] = allocation_from_config(config, schedule).to_dict()
    out.update(extra)
    return out


def run_training(config: RunConfig, run_dir, *, workers: int | None = None, evaluate_model: bool = True):
    """Train ``config`` into ``run_dir``: manifest, checkpoints, convergence log.

    Returns ``(model_or_registry, log)``.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    schedule = config.noise_schedule()
    write_json(run_dir / RUN_MANIFEST, run_manifest(config, status="running"))
    started = time.perf_counter()
    kw = {"run_dir": run_dir, "evaluate_model": evaluate_model}
    if config.regime == "disentangled":
        kw["workers"] = workers
    result, conv = train(config, **kw)
    elapsed = time.perf_counter() - started
    if config.regime == "disentangled":
        alloc = allocation_from_config(config, schedule)
        result.save(
            run_dir, regime="disentangled",
            iterations=dict(zip(alloc.taus, alloc.K)), run_seed=config.run_seed,
        )
    else:
        save_checkpoint(
            result, run_dir, tau="all", fingerprint=schedule.fingerprint,
            regime=config.regime, iterations=config.iterations, run_seed=config.run_seed,
        )
    conv.write(run_dir / CONVERGENCE_CSV)
    write_json(
        run_dir / RUN_MANIFEST,
        run_manifest(config, status="complete", wall_clock_seconds=elapsed),
    )
    return result, conv


def read_convergence(path) -> ConvergenceLog:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row = {
                "iteration": int(r["iteration"]),
                "loss": float(r["loss"]) if r["loss"] != "" else "",
                "metric_name": r["metric_name"],
                "metric_value": float(r["metric_value"]) if r["metric_value"] != "" else "",
                "tau": int(r["tau"]) if r["tau"] != "" else "",
            }
            rows.append(row)
    return ConvergenceLog(rows)


def is_complete(run_dir) -> bool:
    p = Path(run_dir) / RUN_MANIFEST
    if not p.exists() or not (Path(run_dir) / CONVERGENCE_CSV).exists():
        return False
    return json.loads(p.read_text()).get("status") == "complete"


@dataclass
class ExperimentPlan:
    runs: list[RunConfig]
    comparisons: list[dict] = field(default_factory=list)
    output_dir: str | None = None

    def __post_init__(self):
        names = [r.name for r in self.runs]
        if len(set(names)) != len(names):
            raise ConfigError(f"run names must be unique: {names}")
        by_name = {r.name: r for r in self.runs}
        for comp in self.comparisons:
            members = [comp.get("reference")] + list(comp.get("candidates", []))
            missing = [m for m in members if m not in by_name]
            if missing:
                raise ConfigError(f"comparison refers to unknown runs {missing}")
            ref = by_name[comp["reference"]]
            for m in members[1:]:
                other = by_name[m]
                if other.dataset != ref.dataset:
                    raise ConfigError(f"runs {ref.name} and {m} use different datasets")
                a, b = ref.eval_spec, other.eval_spec
                if (a.metric_seed, a.reference_seed, a.n_proj) != (b.metric_seed, b.reference_seed, b.n_proj):
                    raise ConfigError(f"runs {ref.name} and {m} use different metric seeds")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        unknown = set(d) - {"runs", "comparisons", "comparison", "output_dir", "name"}
        if unknown:
            raise ConfigError(f"unknown plan keys {sorted(unknown)}")
        if not d.get("runs"):
            raise ConfigError("a plan needs at least one run")
        runs = [RunConfig.from_dict(r) for r in d["runs"]]
        comps = list(d.get("comparisons", []))
        if "comparison" in d:
            comps.append(d["comparison"])
        if not comps:
            first = runs[0].name
            comps = [{"reference": first, "candidates": [r.name for r in runs]}]
        for c in comps:
            if not isinstance(c, dict) or "reference" not in c:
                raise ConfigError("each comparison needs a reference run")
            c.setdefault("candidates", [])
            c.setdefault("metric", "sliced_w1")
        return cls(runs, comps, d.get("output_dir"))


def iterations_to_reach(curve, target: float) -> int | None:
    """First logged iteration whose metric is at or below ``target``."""
    for it, value in sorted(curve):
        if value <= target:
            return it
    return None


def compare_runs(logs: dict[str, ConvergenceLog], reference: str, candidate: str, metric: str = "sliced_w1") -> dict:
    """Iterations the reference needs to reach the candidate's final metric, per candidate iteration.

    Both runs are measured the same way: first logged iteration at or below
    the candidate's final value. A run compared with itself therefore gets
    exactly 1.0. If the reference never gets there, ``speedup`` is the lower
    bound ``reference_final_iteration / candidate_iterations``.
    """
    ref_curve = logs[reference].metric(metric)
    cand_curve = logs[candidate].metric(metric)
    if not ref_curve or not cand_curve:
        raise ConfigError(f"runs {reference} and {candidate} have no '{metric}' evaluations")
    target = max(cand_curve)[1]
    cand_iters = iterations_to_reach(cand_curve, target)
    ref_iters = iterations_to_reach(ref_curve, target)
    reached = ref_iters is not None
    numerator = ref_iters if reached else max(ref_curve)[0]
    return {
        "reference": reference,
        "candidate": candidate,
        "metric": metric,
        "target": target,
        "candidate_iterations": cand_iters,
        "candidate_final_iteration": max(cand_curve)[0],
        "reference_iterations": ref_iters,
        "reference_final_iteration": max(ref_curve)[0],
        "reached": reached,
        "speedup": numerator / cand_iters,
        "speedup_is_lower_bound": not reached,
    }


def long_format(logs: dict[str, ConvergenceLog]) -> str:
    """CSV ``run,iteration,metric,value`` of combined-model evaluations plus loss."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_FIELDS)
    for name, conv in logs.items():
        seen_loss = set()
        for r in conv.rows:
            if r["tau"] != "":
                continue
            it = r["iteration"]
            if it not in seen_loss and _finite(r["loss"]):
                w.writerow([name, it, "loss", repr(float(r["loss"]))])
                seen_loss.add(it)
            if r["metric_name"] and _finite(r["metric_value"]):
                w.writerow([name, it, r["metric_name"], repr(float(r["metric_value"]))])
    return buf.getvalue()


def _finite(v) -> bool:
    return v != "" and math.isfinite(float(v))


def run_plan(plan: ExperimentPlan, out_dir, *, workers: int | None = None, reuse: bool = True) -> dict:
    """Train (or reuse) every run, then write ``compare.csv`` and ``summary.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    logs: dict[str, ConvergenceLog] = {}
    timings = {}
    for config in plan.runs:
        run_dir = out_dir / config.name
        if reuse and is_complete(run_dir):
            log.info("reusing completed run %s", config.name)
            logs[config.name] = read_convergence(run_dir / CONVERGENCE_CSV)
        else:
            log.info("training run %s (%s)", config.name, config.regime)
            t0 = time.perf_counter()
            _, logs[config.name] = run_training(config, run_dir, workers=workers)
            timings[config.name] = time.perf_counter() - t0
    (out_dir / "compare.csv").write_text(long_format(logs))
    comparisons = []
    for comp in plan.comparisons:
        candidates = comp["candidates"] or [comp["reference"]]
        for cand in candidates:
            comparisons.append(compare_runs(logs, comp["reference"], cand, comp.get("metric", "sliced_w1")))
    finals = {}
    for name, conv in logs.items():
        rows = [r for r in conv.rows if r["tau"] == "" and r["metric_name"]]
        if rows:
            last = max(r["iteration"] for r in rows)
            finals[name] = {
                "iteration": last,
                **{r["metric_name"]: r["metric_value"] for r in rows if r["iteration"] == last},
            }
    summary = {"runs": finals, "comparisons": comparisons, "wall_clock_seconds": timings}
    write_json(out_dir / "summary.json", summary)
    return summary
