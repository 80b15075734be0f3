"""Command-line entry point.

Exit status: 0 success, 2 usage or config error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import schedule as sch
from .errors import (
    ChecksumError,
    ConfigError,
    DuplicateTauError,
    NumericError,
    TSpaceError,
)
from .evalmetrics import DEFAULT_PROJECTIONS, evaluate
from .experiment import CONVERGENCE_CSV, ExperimentPlan, run_plan, run_training
from .registry import RUN_MANIFEST, fingerprint_hex, load_checkpoint, load_registry, write_json
from .sampler import SamplerSpec, sample
from .trainer import RunConfig

log = logging.getLogger("tspace")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _emit(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def cmd_schedule(args) -> int:
    schedule = sch.build_schedule(args.kind, args.T, args.beta_start, args.beta_end)
    timesteps = None
    if args.taus is not None:
        subseq = sch.select_taus(schedule, args.taus)
        timesteps = subseq.taus
        if subseq.reconstructed:
            log.warning("S=%d table includes reconstructed timesteps %s", args.taus, subseq.reconstructed)
    _emit(sch.dump_csv(schedule, timesteps), args.out)
    return EXIT_OK


def cmd_dataset(args) -> int:
    dist = ds.ToyDistribution(
        kind=args.kind, k=args.k, radius=args.radius, std=args.std, noise=args.noise, cells=args.cells
    )
    _emit(ds.dump_csv(ds.sample_batch(dist, args.n, args.seed)), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    config = RunConfig.from_dict(_load_json(args.config))
    run_dir = Path(args.out) if args.out else Path("runs") / config.name
    run_training(config, run_dir, workers=args.workers, evaluate_model=not args.no_eval)
    log.info("run written to %s", run_dir)
    return EXIT_OK


def _run_info(run_dir: Path) -> dict:
    path = run_dir / RUN_MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    return json.loads(path.read_text())


def cmd_sample(args) -> int:
    run_dir = Path(args.run)
    info = _run_info(run_dir)
    config = RunConfig.from_dict(info["config"])
    schedule = config.noise_schedule()
    regime = info["regime"]
    if args.taus:
        taus = tuple(int(t) for t in args.taus.split(","))
    elif args.S:
        taus = sch.select_taus(schedule, args.S).taus
    elif info.get("taus"):
        taus = tuple(info["taus"])
    else:
        taus = sch.select_taus(schedule, min(32, schedule.T)).taus
    mode = args.mode or ("disentangled" if regime == "disentangled" else "ddim-subseq")
    spec = SamplerSpec(
        mode=mode,
        inference_taus=taus if mode in ("ddim-subseq", "disentangled") else None,
        noise_seed=args.seed,
        n_samples=args.n,
        label=args.label,
        sigma_rule=args.sigma_rule,
        eta=args.eta,
    )
    if mode == "disentangled":
        source = load_registry(
            run_dir,
            schedule.fingerprint,
            allow_fingerprint_mismatch=args.allow_fingerprint_mismatch,
        )
        registry_fp = source.fingerprint
    else:
        source, manifest = load_checkpoint(run_dir, "all")
        registry_fp = manifest.fingerprint
    x = sample(source, schedule, spec, allow_fingerprint_mismatch=args.allow_fingerprint_mismatch)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "x", "y"])
    for i, (a, b) in enumerate(x):
        w.writerow([i, repr(float(a)), repr(float(b))])
    _emit(buf.getvalue(), args.out)
    sidecar = {
        "spec": spec.to_dict(),
        "run": str(run_dir),
        "regime": regime,
        "schedule": schedule.spec(),
        "schedule_fingerprint": fingerprint_hex(schedule.fingerprint),
        "model_fingerprint": fingerprint_hex(registry_fp),
    }
    side_path = Path(args.out + ".json") if args.out and args.out != "-" else run_dir / "last_sample.json"
    write_json(side_path, sidecar)
    return EXIT_OK


def read_points(path: str) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{path} has no samples")
    return np.array([[float(r["x"]), float(r["y"])] for r in rows])


def cmd_eval(args) -> int:
    generated = read_points(args.samples)
    if args.run:
        info = _run_info(Path(args.run))
        dist = ds.ToyDistribution.from_dict(info["config"]["dataset"])
    else:
        dist = ds.ToyDistribution(kind=args.kind, k=args.k, radius=args.radius, std=args.std,
                                  noise=args.noise, cells=args.cells)
    if args.reference:
        reference = read_points(args.reference)
    else:
        reference = ds.sample_batch(dist, args.reference_n, args.reference_seed).x0
    report = evaluate(generated, reference, dist, n_proj=args.n_proj, metric_seed=args.metric_seed)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    _emit(text, args.out)
    if args.run:
        conv_path = Path(args.run) / CONVERGENCE_CSV
        iteration = args.iteration
        if iteration is None:
            cfg = _run_info(Path(args.run))["config"]
            its = cfg["iterations"]
            iteration = max(its) if isinstance(its, list) else its
        new = not conv_path.exists()
        with open(conv_path, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(["iteration", "loss", "metric_name", "metric_value", "tau"])
            values = {"sliced_w1": report.sliced_wasserstein, "energy": report.energy_distance}
            if report.mode_coverage is not None:
                values["mode_coverage"] = report.mode_coverage
                values["min_mode_mass"] = report.min_mode_mass
            for name, value in values.items():
                w.writerow([iteration, "", f"eval_{name}", repr(value) if isinstance(value, float) else value, ""])
    return EXIT_OK


def cmd_compare(args) -> int:
    raw = _load_json(args.plan)
    plan = ExperimentPlan.from_dict(raw)
    out = args.out or plan.output_dir or "compare-out"
    summary = run_plan(plan, out, workers=args.workers, reuse=not args.fresh)
    for c in summary["comparisons"]:
        bound = " (lower bound)" if c["speedup_is_lower_bound"] else ""
        print(f"{c['reference']} vs {c['candidate']}: speedup {c['speedup']:.3f}{bound}")
    return EXIT_OK


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _add_dist_args(p, required_kind=True):
    p.add_argument("--kind", choices=ds.DIST_KINDS, default="ring-mixture" if not required_kind else None,
                   required=required_kind)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--radius", type=float, default=4.0)
    p.add_argument("--std", type=float, default=0.15)
    p.add_argument("--noise", type=float, default=0.25)
    p.add_argument("--cells", type=int, default=4)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tspace", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule", help="print a noise schedule as CSV")
    p.add_argument("action", nargs="?", choices=["dump"], default="dump")
    p.add_argument("--kind", default="linear-beta", choices=sorted(sch._KIND_ALIASES))
    p.add_argument("--T", type=_positive_int, default=1000)
    p.add_argument("--beta-start", type=float, default=sch.DEFAULT_BETA_START)
    p.add_argument("--beta-end", type=float, default=sch.DEFAULT_BETA_END)
    p.add_argument("--taus", type=_positive_int, metavar="S", help="only the S-state subsequence")
    p.add_argument("--out")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("dataset", help="dump toy data as CSV")
    p.add_argument("action", nargs="?", choices=["dump"], default="dump")
    _add_dist_args(p)
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train one run from a JSON config")
    p.add_argument("config")
    p.add_argument("--out", help="run directory (default runs/<name>)")
    p.add_argument("--workers", type=_positive_int, default=None)
    p.add_argument("--no-eval", action="store_true", help="skip sample-based evaluation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--mode", choices=["ddpm-full", "generalized-full", "ddim-subseq", "disentangled"])
    p.add_argument("--S", type=_positive_int)
    p.add_argument("--taus", help="comma-separated inference timesteps")
    p.add_argument("--n", type=_positive_int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label", type=int)
    p.add_argument("--sigma-rule", choices=["zero", "ddpm-match", "eta"], default="zero")
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--allow-fingerprint-mismatch", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score a sample CSV against the data distribution")
    p.add_argument("--samples", required=True)
    p.add_argument("--run", help="take the dataset from this run and append to its log")
    _add_dist_args(p, required_kind=False)
    p.add_argument("--reference", help="CSV of reference points (default: fresh draw)")
    p.add_argument("--reference-n", type=_positive_int, default=10000)
    p.add_argument("--reference-seed", type=int, default=2)
    p.add_argument("--n-proj", type=_positive_int, default=DEFAULT_PROJECTIONS)
    p.add_argument("--metric-seed", type=int, default=0)
    p.add_argument("--iteration", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train/evaluate a plan of runs and compare convergence")
    p.add_argument("plan")
    p.add_argument("--out")
    p.add_argument("--workers", type=_positive_int, default=None)
    p.add_argument("--fresh", action="store_true", help="retrain runs even if complete")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ChecksumError, DuplicateTauError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TSpaceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
