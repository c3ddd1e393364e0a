"""Command-line front end.

Subcommands exchange files rather than state::

    pathloss-lab synth --out-dir data/
    pathloss-lab clean --input data/measurements.csv --links data/links.json --out clean.csv
    pathloss-lab fit --input clean.csv --links data/links.json --out fit.json
    pathloss-lab anova --fit fit.json --out anova.json
    pathloss-lab residuals --fit fit.json --out-dir resid/
    pathloss-lab report --fit fit.json --clean-summary clean.summary.json \\
        --anova anova.json --residuals resid/residuals.json --out report.json

Exit codes: 0 success, 1 usage, 2 data or contract violation (including a
missing upstream artifact), 3 other I/O failure.
"""

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import anova_type2, residual_diagnostics
from .distfit import density_and_cdf, fit_gmm, fit_mle, histogram_density, qq_points, rank_candidates, select_gmm
from .features import ModelSpec, build_design_matrix
from .ingest import (
    DEFAULT_OUTLIER_FEATURES,
    RadioConfig,
    RowError,
    SchemaError,
    dedup_and_filter_sf,
    isolation_forest_outliers,
    join_links,
    load_link_profiles,
    load_radio_config,
    parse_measurements,
    write_measurements,
)
from .regression import ConvergenceError, RankDeficientError, fit, holdout, kfold_cv, max_workers, variance_reduction
from .synth import SyntheticSpec, write_dataset

logger = logging.getLogger("pathloss_lab")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_IO = 0, 1, 2, 3
PARAMETRIC_FAMILIES = ("normal", "skew_normal", "cauchy", "student_t")


class CliError(Exception):
    def __init__(self, message, code=EXIT_DATA):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _require(path, what="input"):
    p = Path(path)
    if not p.exists():
        raise CliError(f"missing {what}: {p}", EXIT_DATA)
    return p


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _digest_entry(path):
    return {"path": os.path.abspath(path), "sha256": _sha256(path)}


def _jsonable(obj):
    """Recursively convert numpy types and non-finite floats (-> null)."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _write_json(path, obj):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, allow_nan=False) + "\n", encoding="utf-8")


def _read_json(path, what):
    p = _require(path, what)
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"{what} {p} is not valid JSON: {exc}", EXIT_DATA) from None


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _int_range(text):
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LOW:HIGH integers, got {text!r}") from None
    if lo > hi:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return lo, hi


def _ratio(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError("ratio must lie strictly between 0 and 1")
    return v


class _Timer:
    def __init__(self):
        self.timings = {}

    def __call__(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.timings[name] = time.perf_counter() - self.t0

        return _Ctx()


# ---------------------------------------------------------------------------
# clean


def cmd_clean(args):
    inp = _require(args.input)
    timer = _Timer()
    errors = []
    with timer("parse"):
        records = parse_measurements(inp, strict=args.strict, errors=errors)
    rows_parsed = len(records)
    with timer("dedup_sf"):
        records = sorted(records, key=lambda r: r.timestamp)
        deduped = dedup_and_filter_sf(records, -(10**9), 10**9)
        in_band = dedup_and_filter_sf(deduped, args.sf[0], args.sf[1])
    unlinked = 0
    if args.links:
        profiles = load_link_profiles(_require(args.links, "link profiles"))
        linked = [r for r in in_band if r.device_id in profiles]
        unlinked = len(in_band) - len(linked)
        if unlinked:
            logger.warning("dropping %d records whose device has no link profile", unlinked)
        in_band = linked
    with timer("outliers"):
        kept, flagged = isolation_forest_outliers(
            in_band,
            feature_set=tuple(args.features),
            contamination=args.contamination,
            trees=args.trees,
            subsample=args.subsample,
            seed=args.seed,
        )
    out = Path(args.out)
    write_measurements(kept, out)
    summary_path = Path(args.summary) if args.summary else out.with_suffix(".summary.json")
    summary = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "input": _digest_entry(inp),
        "links": _digest_entry(args.links) if args.links else None,
        "output": _digest_entry(out),
        "params": {
            "sf_range": list(args.sf),
            "contamination": args.contamination,
            "seed": args.seed,
            "trees": args.trees,
            "subsample": args.subsample,
            "features": list(args.features),
            "strict": args.strict,
        },
        "rows_parsed": rows_parsed,
        "rows_invalid": len(errors),
        "rows_in": rows_parsed + len(errors),
        "duplicates_removed": rows_parsed - len(deduped),
        "sf_filtered": len(deduped) - len(in_band) - unlinked,
        "unlinked_dropped": unlinked,
        "outliers_flagged": len(flagged),
        "rows_out": len(kept),
        "timings_s": timer.timings,
    }
    _write_json(summary_path, summary)
    print(f"clean: {summary['rows_in']} rows in, {len(kept)} out -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit


def _load_design_inputs(input_path, links_path, radio_path=None, spec_path=None):
    """Parse inputs and return ``(samples, spec, radio)``."""
    records = parse_measurements(_require(input_path))
    profiles = load_link_profiles(_require(links_path, "link profiles"))
    radio = load_radio_config(_require(radio_path, "radio config")) if radio_path else RadioConfig()
    if spec_path:
        spec = ModelSpec.load(_require(spec_path, "model spec"))
        if radio_path and (spec.frequency != radio.frequency or spec.d0 != radio.d0):
            raise CliError(
                f"model spec (f={spec.frequency} MHz, d0={spec.d0} m) disagrees with radio config "
                f"(f={radio.frequency} MHz, d0={radio.d0} m)"
            )
    else:
        spec = ModelSpec(frequency=radio.frequency, d0=radio.d0)
    return join_links(records, profiles), spec, radio


def _model_block(samples, spec, radio, args, timer, name):
    with timer(f"{name}_design"):
        design = build_design_matrix(samples, spec, radio)
    with timer(f"{name}_fit"):
        full = fit(design, args.solver)
    with timer(f"{name}_holdout"):
        ho = holdout(design, args.split, args.seed, args.solver)
    with timer(f"{name}_cv"):
        cv = kfold_cv(design, args.cv, seed=args.seed, solver=args.solver) if args.cv else None
    block = {
        "spec": spec.to_json(),
        "fit": full.to_json(),
        "holdout": ho.to_json(),
        "cv": cv.to_json() if cv else None,
    }
    return block, full, ho


def cmd_fit(args):
    timer = _Timer()
    with timer("load"):
        samples, spec, radio = _load_design_inputs(args.input, args.links, args.radio, args.spec)
    env_block, env_fit, env_ho = _model_block(samples, spec, radio, args, timer, "environment")
    base_spec = spec.baseline()
    base_block, _, base_ho = _model_block(samples, base_spec, radio, args, timer, "baseline")
    out = Path(args.out)
    resid_path = Path(args.residuals) if args.residuals else out.with_name(out.stem + ".residuals.csv")
    resid_path.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(resid_path, ("index", "residual"), enumerate(env_fit.residuals))
    report = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "inputs": {
            "measurements": _digest_entry(args.input),
            "links": _digest_entry(args.links),
            "radio": _digest_entry(args.radio) if args.radio else None,
            "spec": _digest_entry(args.spec) if args.spec else None,
        },
        "radio": radio.to_json(),
        "solver": args.solver,
        "seed": args.seed,
        "split_ratio": args.split,
        "cv_k": args.cv,
        "environment": env_block,
        "baseline": base_block,
        "variance_reduction": {
            "basis": "holdout_test_r2",
            "r2_baseline": base_ho.r2,
            "r2_environment": env_ho.r2,
            "percent": variance_reduction(base_ho.r2, env_ho.r2),
        },
        "residuals_csv": os.path.relpath(resid_path.resolve(), out.resolve().parent),
        "timings_s": timer.timings,
    }
    _write_json(out, report)
    print(
        f"fit: R2 env={env_ho.r2:.4f} baseline={base_ho.r2:.4f} "
        f"reduction={report['variance_reduction']['percent']:.2f}% -> {out}"
    )
    return EXIT_OK


def _design_from_fit_report(fit_path, fit_json):
    inputs = fit_json.get("inputs") or {}
    try:
        meas = inputs["measurements"]["path"]
        links = inputs["links"]["path"]
    except (KeyError, TypeError):
        raise CliError(f"{fit_path} does not record its measurement and link inputs") from None
    paths = {k: (v["path"] if v else None) for k, v in inputs.items()}
    for key, entry in inputs.items():
        if entry and Path(entry["path"]).exists() and _sha256(entry["path"]) != entry["sha256"]:
            raise CliError(f"{key} file {entry['path']} changed since {fit_path} was written")
    samples, _, radio = _load_design_inputs(meas, links, paths.get("radio"), None)
    spec = ModelSpec.from_json(fit_json["environment"]["spec"])
    return build_design_matrix(samples, spec, radio)


# ---------------------------------------------------------------------------
# anova


def cmd_anova(args):
    fit_json = _read_json(args.fit, "fit report")
    design = _design_from_fit_report(args.fit, fit_json)
    table = anova_type2(design)
    out = table.to_json()
    out["schema_version"] = SCHEMA_VERSION
    out["fit_report"] = _digest_entry(args.fit)
    _write_json(args.out, out)
    print(f"anova: {len(table.rows)} terms -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# residuals


def _load_residuals(fit_path, fit_json):
    rel = fit_json.get("residuals_csv")
    if not rel:
        raise CliError(f"{fit_path} does not name a residuals CSV")
    path = _require(Path(fit_path).resolve().parent / rel, "residuals CSV")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if "residual" not in (reader.fieldnames or []):
            raise CliError(f"{path} has no 'residual' column")
        try:
            values = [float(row["residual"]) for row in reader]
        except ValueError as exc:
            raise CliError(f"bad residual value in {path}: {exc}") from None
    return np.asarray(values), path


def cmd_residuals(args):
    fit_json = _read_json(args.fit, "fit report")
    resid, resid_path = _load_residuals(args.fit, fit_json)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    timer = _Timer()
    with timer("diagnostics"):
        diag = residual_diagnostics(resid)
    m_lo, m_hi = args.gmm_components
    workers = max_workers()
    with timer("parametric"):
        if workers > 1:
            with ThreadPoolExecutor(min(workers, len(PARAMETRIC_FAMILIES))) as pool:
                parametric = list(pool.map(lambda f: fit_mle(f, resid), PARAMETRIC_FAMILIES))
        else:
            parametric = [fit_mle(f, resid) for f in PARAMETRIC_FAMILIES]
    with timer("gmm"):
        ms = range(m_lo, m_hi + 1)

        def one(m):
            return fit_gmm(resid, m, restarts=args.restarts, seed=args.seed)

        if workers > 1:
            with ThreadPoolExecutor(min(workers, len(ms))) as pool:
                gmms = list(pool.map(one, ms))
        else:
            gmms = [one(m) for m in ms]
    best_gmm = select_gmm(gmms)
    ranking = rank_candidates(parametric + [best_gmm])

    with timer("plot_data"):
        qq_files = {}
        for f in ranking.ordered:
            name = f"qq_{f.label}.csv"
            _write_csv(out_dir / name, ("theoretical", "empirical"), qq_points(f, resid, args.qq_points))
            qq_files[f.label] = name
        centers, dens, width = histogram_density(resid, args.bins)
        _write_csv(out_dir / "histogram.csv", ("bin_center", "bin_width", "density"), ((c, width, d) for c, d in zip(centers, dens)))
        grid = np.linspace(resid.min(), resid.max(), args.pdf_points)
        cols = [density_and_cdf(f, grid)[0] for f in ranking.ordered]
        _write_csv(out_dir / "pdf_overlay.csv", ("x", *(f.label for f in ranking.ordered)), zip(grid, *cols))

    result = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "fit_report": _digest_entry(args.fit),
        "residuals_csv": _digest_entry(resid_path),
        "seed": args.seed,
        "gmm_components": [m_lo, m_hi],
        "restarts": args.restarts,
        "diagnostics": diag.to_json(),
        "distributions": ranking.to_json(),
        "gmm_scan": [g.to_json() for g in gmms],
        "selected_gmm_components": best_gmm.params.m,
        "plots": {"qq": qq_files, "histogram": "histogram.csv", "pdf_overlay": "pdf_overlay.csv"},
        "timings_s": timer.timings,
    }
    _write_json(out_dir / "residuals.json", result)
    print(f"residuals: winner {ranking.winner.label} -> {out_dir / 'residuals.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args):
    obj = _read_json(args.spec, "synthetic spec") if args.spec else {}
    if args.n is not None:
        obj["n"] = args.n
    if args.seed is not None:
        obj["seed"] = args.seed
    try:
        spec = SyntheticSpec.from_json(obj)
    except (KeyError, TypeError) as exc:
        raise CliError(f"invalid synthetic spec: {exc}") from None
    paths = write_dataset(spec, args.out_dir)
    print(f"synth: {spec.n} samples -> {paths['measurements']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


def cmd_report(args):
    fit_json = _read_json(args.fit, "fit report")
    clean = _read_json(args.clean_summary, "cleaning summary") if args.clean_summary else None
    anova = _read_json(args.anova, "ANOVA table") if args.anova else None
    resid = _read_json(args.residuals, "residuals report") if args.residuals else None

    vr = fit_json["variance_reduction"]
    recomputed = variance_reduction(vr["r2_baseline"], vr["r2_environment"])
    if not math.isclose(recomputed, vr["percent"], rel_tol=1e-9, abs_tol=1e-9):
        raise CliError(f"{args.fit}: stored variance reduction does not match its R^2 values")

    seeds = {"fit": fit_json.get("seed")}
    timings = {"fit": fit_json.get("timings_s")}
    digests = dict(fit_json.get("inputs") or {})
    digests["fit_report"] = _digest_entry(args.fit)
    if clean:
        seeds["clean"] = clean.get("params", {}).get("seed")
        timings["clean"] = clean.get("timings_s")
        digests["raw_measurements"] = clean.get("input")
    if resid:
        seeds["residuals"] = resid.get("seed")
        timings["residuals"] = resid.get("timings_s")

    def strip_timings(obj):
        return {k: v for k, v in obj.items() if k != "timings_s"} if obj else None

    report = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "input_digests": digests,
        "spec": {
            "environment": fit_json["environment"]["spec"],
            "baseline": fit_json["baseline"]["spec"],
            "radio": fit_json.get("radio"),
            "solver": fit_json.get("solver"),
            "split_ratio": fit_json.get("split_ratio"),
            "cv_k": fit_json.get("cv_k"),
        },
        "cleaning": strip_timings(clean),
        "fits": {"baseline": fit_json["baseline"], "environment": fit_json["environment"]},
        "variance_reduction": {
            "r2_baseline": vr["r2_baseline"],
            "r2_environment": vr["r2_environment"],
            "percent": recomputed,
            "basis": vr.get("basis"),
        },
        "anova": anova,
        "residual_diagnostics": resid["diagnostics"] if resid else None,
        "distributions": resid["distributions"] if resid else None,
        "winner": resid["distributions"]["winner"] if resid else None,
        "seeds": seeds,
        "timings_s": timings,
    }
    _write_json(args.out, report)
    print(f"report: reduction {recomputed:.2f}% -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = _Parser(prog="pathloss-lab", description="Indoor LoRaWAN path loss modelling toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("clean", help="sort, dedup, SF-filter and outlier-screen raw measurements")
    c.add_argument("--input", required=True)
    c.add_argument("--links", help="link profiles; records of unknown devices are dropped")
    c.add_argument("--sf", type=_int_range, default=(7, 10), metavar="LOW:HIGH")
    c.add_argument("--contamination", type=float, default=0.01)
    c.add_argument("--seed", type=int, default=42)
    c.add_argument("--trees", type=int, default=100)
    c.add_argument("--subsample", type=int, default=256)
    c.add_argument("--features", nargs="+", default=list(DEFAULT_OUTLIER_FEATURES))
    c.add_argument("--strict", action="store_true", help="fail on the first malformed row")
    c.add_argument("--out", required=True)
    c.add_argument("--summary", help="summary JSON path (default: <out>.summary.json)")
    c.set_defaults(func=cmd_clean)

    f = sub.add_parser("fit", help="fit the environment-aware and baseline models")
    f.add_argument("--input", required=True)
    f.add_argument("--links", required=True)
    f.add_argument("--radio")
    f.add_argument("--spec", help="ModelSpec JSON (default: all environmental terms plus SNR)")
    f.add_argument("--solver", choices=("ols", "lm"), default="ols")
    f.add_argument("--split", type=_ratio, default=0.8)
    f.add_argument("--cv", type=int, default=5, help="k for k-fold CV (0 disables)")
    f.add_argument("--seed", type=int, default=42)
    f.add_argument("--out", required=True)
    f.add_argument("--residuals", help="residuals CSV path (default: <out>.residuals.csv)")
    f.set_defaults(func=cmd_fit)

    a = sub.add_parser("anova", help="Type II ANOVA of a fitted model")
    a.add_argument("--fit", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_anova)

    r = sub.add_parser("residuals", help="diagnostics and distribution fits of model residuals")
    r.add_argument("--fit", required=True)
    r.add_argument("--gmm-components", type=_int_range, default=(1, 5), metavar="LOW:HIGH")
    r.add_argument("--restarts", type=int, default=8)
    r.add_argument("--seed", type=int, default=42)
    r.add_argument("--bins", type=int, default=100)
    r.add_argument("--qq-points", type=int, default=2000)
    r.add_argument("--pdf-points", type=int, default=400)
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_residuals)

    s = sub.add_parser("synth", help="write a synthetic dataset with known coefficients")
    s.add_argument("--spec", help="SyntheticSpec JSON (default: built-in ground truth)")
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    m = sub.add_parser("report", help="merge stage outputs into one run report")
    m.add_argument("--fit", required=True)
    m.add_argument("--clean-summary")
    m.add_argument("--anova")
    m.add_argument("--residuals", help="residuals.json from the residuals subcommand")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "cv", 0) == 1 or getattr(args, "cv", 0) < 0:
        parser.error("--cv must be 0 or >= 2")
    if getattr(args, "restarts", 1) < 1:
        parser.error("--restarts must be >= 1")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (RowError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, RankDeficientError, ConvergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
