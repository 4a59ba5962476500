"""Command-line entry point.

Exit codes: 0 success, 2 input error, 3 config error, 4 too many malformed
candidate lines.  Failures print one JSON object to stderr.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import os
import sys
import tempfile
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .chemcore import ChargeBalanceUndetermined, FormulaError, charge_balance_assignments, format_amount, molar_mass, parse_formula, reduce
from .config import CONFIG_ENV_VAR, ConfigError, config_hash, config_snapshot, load_config
from .evalkit import EvalConfig, evaluate_scores, format_reports, hull_report, label_compositions, read_labeled_jsonl
from .fusion import rank_average_columns
from .mapview import GridSpec, MapConfig, grid_summary, histogram_csv, pca_fit, project
from .planner import (
    BalanceError, PlanConfig, SLACK_SPECIES, TemperatureRule, UncoveredElementError, balance, batch_select,
    batches_csv, default_precursor_table, load_precursor_table, load_temperature_rules, plan_recipe,
    precursor_masses, recipes_csv,
)
from .scoring import (
    COMPOSITION_FEATURES, HeuristicCompositionScorer, HeuristicStructureScorer, LogisticScorer,
    composition_descriptors, file_scorer_load, load_model,
)
from .screenpipe import DuplicateIdError, MalformedInputError, ScreenConfig, ingest, run_funnel, shortlist_csv
from .structio import CifError, CifWarning, parse_cif
from .xrdsim import XrdConfig, match_phase_detail, peaks_csv, read_measured, read_peaks_csv, rwp, simulate_pattern

EXIT_OK, EXIT_INPUT, EXIT_CONFIG, EXIT_PARTIAL = 0, 2, 3, 4


class InputError(Exception):
    pass


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_atomic(path: Path, text: str) -> str:
    """Write via a temp file in the same directory and rename; returns the sha256."""
    data = text.encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return hashlib.sha256(data).hexdigest()


class Run:
    """Collects inputs and outputs of one command and writes the manifest."""

    def __init__(self, command: str, cfg, out_dir: Path):
        self.command = command
        self.cfg = cfg
        self.out_dir = out_dir
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}

    def input(self, path: str | Path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise InputError(f"input file not found: {p}")
        self.inputs[str(p)] = sha256_file(p)
        return p

    def write(self, name: str, text: str) -> Path:
        p = self.out_dir / name
        self.outputs[name] = write_atomic(p, text)
        return p

    def finish(self) -> None:
        manifest = {
            "command": self.command,
            "version": __version__,
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "config_hash": config_hash(self.cfg) if self.cfg is not None else None,
            "config": config_snapshot(self.cfg) if self.cfg is not None else None,
            "inputs": self.inputs,
            "outputs": self.outputs,
        }
        write_atomic(self.out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _cfg(cls, args, **overrides):
    return load_config(cls, getattr(args, "config", None), overrides)


# --- commands -------------------------------------------------------------

def cmd_screen(args) -> int:
    cfg = _cfg(ScreenConfig, args, tau=args.tau, workers=args.workers, selector=args.selector)
    run = Run("screen", cfg, Path(args.out))
    path = run.input(args.candidates)
    scorers = {}
    for key, scores, model, kind in (("c", args.composition_scores, args.composition_model, "composition"),
                                     ("s", args.structure_scores, args.structure_model, "structure")):
        if scores:
            scorers[key] = file_scorer_load(run.input(scores))
        elif model:
            scorers[key] = LogisticScorer(load_model(run.input(model)), kind)
        else:
            scorers[key] = HeuristicCompositionScorer() if key == "c" else HeuristicStructureScorer()
    reader = ingest(path, source=args.source or "", max_malformed_fraction=cfg.max_malformed_fraction)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CifWarning)
        result = run_funnel(reader, scorers, cfg)
    run.write("shortlist.csv", shortlist_csv(result.shortlist))
    run.write("funnel.json", result.report.to_json())
    if args.rank_table and result.table is not None:
        run.write("ranks.csv", result.table.to_csv())
    run.finish()
    for st in result.report.stages:
        print(f"{st.name:10s} {st.n_in:>10d} -> {st.n_out:>10d}")
    return EXIT_OK


def _read_shortlist(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not {"id", "formula"} <= set(rows[0]):
        raise InputError(f"{path}: shortlist needs 'id' and 'formula' columns")
    return rows


def cmd_plan(args) -> int:
    cfg = _cfg(PlanConfig, args, batch_size=args.batch_size, n_batches=args.n_batches, tolerance=args.tolerance)
    run = Run("plan", cfg, Path(args.out))
    rows = _read_shortlist(run.input(args.shortlist))
    table = load_precursor_table(run.input(args.precursors)) if args.precursors else default_precursor_table()
    rules: list[TemperatureRule] = load_temperature_rules(run.input(args.temperatures)) if args.temperatures else []
    recipes, errors = [], []
    for row in rows:
        try:
            target = parse_formula(row["formula"])
            ra = float(row.get("rank_avg") or 0.0)
            recipes.append(plan_recipe(row["id"], target, table, rules, cfg.slack, cfg.target_grams, ra,
                                       (cfg.default_temperature, cfg.default_hours), cfg.preference))
        except (FormulaError, UncoveredElementError, BalanceError, ValueError) as e:
            errors.append((row["id"], row.get("formula", ""), type(e).__name__, str(e)))
    plan = batch_select(recipes, cfg.batch_size, cfg.n_batches, cfg.tolerance)
    run.write("recipes.csv", recipes_csv(recipes, cfg.target_grams))
    run.write("batches.csv", batches_csv(plan))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "target", "temperature_C", "time_h", "rank_avg"])
    for r in plan.unplaced:
        w.writerow([r.id, r.target.formula, repr(r.temperature), repr(r.hours), repr(r.rank_avg)])
    run.write("unplaced.csv", buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "formula", "error", "message"])
    w.writerows(errors)
    run.write("plan_errors.csv", buf.getvalue())
    run.finish()
    print(f"{len(recipes)} recipes, {len(plan.batches)} batches "
          f"({', '.join(str(len(b)) for b in plan.batches) or '-'}), {len(plan.unplaced)} unplaced, {len(errors)} errors")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _cfg(EvalConfig, args, hull_threshold=args.hull_threshold)
    run = Run("eval", cfg, Path(args.out))
    records = read_labeled_jsonl(run.input(args.labels))
    comp_labels = label_compositions(r.entry for r in records)
    ids = [r.id for r in records]
    y = np.array([comp_labels[reduce(r.entry.composition)[0]] for r in records])
    label_ids = set(ids)
    columns = {}
    for item in args.scores or []:
        name, sep, path = item.partition("=")
        if not sep:
            raise InputError(f"--scores expects name=path, got {item!r}")
        fs = file_scorer_load(run.input(path))
        offenders = sorted((label_ids - set(fs.scores)) | (set(fs.scores) - label_ids))
        if offenders:
            raise InputError(f"{path}: ids differ from the label file ({len(offenders)} mismatched); "
                             f"first: {', '.join(offenders[:10])}")
        columns[name] = np.array([fs.scores[i] for i in ids])
    reports = [evaluate_scores(n, col, y, cfg.threshold) for n, col in columns.items()]
    if len(columns) >= 2:
        fused = rank_average_columns(ids, columns).rank_avg
        reports.append(evaluate_scores("rank_avg", fused, y, cfg.threshold))
    hulls = [r.entry.e_above_hull for r in records]
    if all(h is not None for h in hulls):
        reports.append(hull_report(hulls, y, cfg.hull_threshold))
    if not reports:
        raise InputError("nothing to evaluate: give --scores or labels with e_above_hull")
    run.write("metrics.json", json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
    run.finish()
    print(format_reports(reports))
    return EXIT_OK


def _load_structure(path: Path):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CifWarning)
        return parse_cif(path.read_text(encoding="utf-8"))


def cmd_xrd_sim(args) -> int:
    cfg = _cfg(XrdConfig, args, wavelength=args.wavelength, two_theta_max=args.two_theta_max)
    run = Run("xrd-sim", cfg, Path(args.out))
    s = _load_structure(run.input(args.cif))
    peaks = simulate_pattern(s, cfg.wavelength, cfg.two_theta_max, cfg.lorentz_polarization)
    run.write("peaks.csv", peaks_csv(peaks))
    run.finish()
    print(f"{len(peaks)} reflections up to 2theta = {cfg.two_theta_max}")
    return EXIT_OK


def cmd_xrd_match(args) -> int:
    cfg = _cfg(XrdConfig, args, wavelength=args.wavelength, tol=args.tol)
    run = Run("xrd-match", cfg, Path(args.out))
    if bool(args.cif) == bool(args.peaks):
        raise InputError("give exactly one of --cif or --peaks")
    if args.cif:
        sim = simulate_pattern(_load_structure(run.input(args.cif)), cfg.wavelength, cfg.two_theta_max,
                               cfg.lorentz_polarization)
    else:
        sim = read_peaks_csv(run.input(args.peaks).read_text(encoding="utf-8"))
    meas = read_measured(run.input(args.measured), cfg.wavelength)
    m = match_phase_detail(meas, sim, cfg.tol, cfg.floor)
    out = {"match_score": m.score, "matched_peaks": len(m.pairs), "considered_peaks": m.considered}
    if args.calculated:
        calc = read_measured(run.input(args.calculated), cfg.wavelength)
        if not np.array_equal(calc.two_theta, meas.two_theta):
            raise InputError("calculated pattern must share the measured 2theta grid")
        out["rwp"] = rwp(meas.intensity, calc.intensity)
    run.write("match.json", json.dumps(out, indent=2) + "\n")
    run.finish()
    print(json.dumps(out))
    return EXIT_OK


def cmd_pca(args) -> int:
    cfg = _cfg(MapConfig, args, nx=args.nx, ny=args.ny)
    run = Run("pca", cfg, Path(args.out))
    names, blocks, values = [], [], []
    for p in args.tables:
        path = run.input(p)
        rows = _read_shortlist(path)
        if not rows:
            raise InputError(f"{path}: empty table")
        try:
            X = np.array([composition_descriptors(parse_formula(r["formula"])).values for r in rows])
        except FormulaError as e:
            raise InputError(f"{path}: {e}") from None
        names.append(path.stem)
        blocks.append(X)
        values.append(np.array([float(r.get("rank_avg") or "nan") for r in rows]))
    X = np.vstack(blocks)
    feats = list(COMPOSITION_FEATURES)
    if cfg.standardize:
        sd = X.std(axis=0)
        keep = sd > 0
        X = (X[:, keep] - X[:, keep].mean(axis=0)) / sd[keep]
        feats = [f for f, k in zip(feats, keep) if k]
    model = pca_fit(X, cfg.k, feats)
    Z = project(model, X)
    spec = GridSpec.covering(Z[:, :2], cfg.nx, cfg.ny)
    start = 0
    for name, blk, v in zip(names, blocks, values):
        z = Z[start:start + len(blk)]
        start += len(blk)
        g = grid_summary(z, v, spec)
        run.write(f"grid_{name}.csv", g.to_csv())
        if not np.isnan(v).all():
            run.write(f"hist_{name}.csv", histogram_csv(v[~np.isnan(v)], cfg.bins))
    run.write("pca.json", json.dumps({
        "features": feats,
        "explained_variance_ratio": model.explained_variance_ratio.tolist(),
        "components": model.components.tolist(),
        "grid": {"x_min": spec.x_min, "x_max": spec.x_max, "y_min": spec.y_min, "y_max": spec.y_max,
                 "nx": spec.nx, "ny": spec.ny},
    }, indent=2) + "\n")
    run.finish()
    print("explained variance:", ", ".join(f"{x:.4f}" for x in model.explained_variance_ratio))
    return EXIT_OK


def cmd_balance(args) -> int:
    target = parse_formula(args.target)
    precursors = [parse_formula(p) for p in args.precursors]
    slack = [s.strip() for s in args.slack.split(",") if s.strip()]
    r = balance(target, precursors, slack, minimize_slack=args.minimize_slack)
    print(r)
    if args.grams:
        for c, g in precursor_masses(r, args.grams).items():
            print(f"  {c.formula}: {float(g):.6f} g")
    return EXIT_OK


def cmd_parse(args) -> int:
    text = args.item
    if text.lower().endswith(".cif") or Path(text).is_file():
        p = Path(text)
        if not p.is_file():
            raise InputError(f"input file not found: {p}")
        s = _load_structure(p)
        comp = s.composition()
        out = {
            "lattice": {k: getattr(s.lattice, k) for k in ("a", "b", "c", "alpha", "beta", "gamma")},
            "volume": s.lattice.volume, "sites": len(s.sites), "space_group": s.space_group,
            "formula": comp.formula, "reduced_formula": comp.reduced_formula,
        }
    else:
        c = parse_formula(text)
        red, mult = reduce(c)
        out = {"formula": c.formula, "reduced_formula": red.formula, "multiplier": format_amount(mult),
               "anonymous_formula": c.anonymous_formula, "chemical_system": c.chemical_system,
               "molar_mass": float(molar_mass(c))}
        try:
            a = charge_balance_assignments(c, max_combinations=100_000)
            out["oxidation_states"] = a[0] if a else None
        except (ChargeBalanceUndetermined, ValueError):
            out["oxidation_states"] = None
    print(json.dumps(out, indent=2))
    return EXIT_OK


# --- wiring ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"key = value config file (default: ${CONFIG_ENV_VAR})")

    p = argparse.ArgumentParser(prog="synthscreen", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("screen", parents=[common], help="score, fuse, select and filter a candidate pool")
    s.add_argument("candidates", help="candidate JSONL")
    s.add_argument("--out", "-o", default="screen_out")
    s.add_argument("--composition-scores", help="id,probability CSV for the composition model")
    s.add_argument("--structure-scores", help="id,probability CSV for the structure model")
    s.add_argument("--composition-model", help="trained logistic model file")
    s.add_argument("--structure-model", help="trained logistic model file")
    s.add_argument("--tau", type=float)
    s.add_argument("--selector", choices=("rank", "probability"))
    s.add_argument("--workers", type=int, help="scoring processes (0 = all cores)")
    s.add_argument("--source", help="dataset tag for candidates lacking one")
    s.add_argument("--rank-table", action="store_true", help="also write the full ranks.csv")
    s.set_defaults(func=cmd_screen)

    s = sub.add_parser("plan", parents=[common], help="recipes and furnace batches for a shortlist")
    s.add_argument("shortlist", help="CSV with id, formula and optionally rank_avg")
    s.add_argument("--out", "-o", default="plan_out")
    s.add_argument("--precursors", help="precursor table (default: built-in)")
    s.add_argument("--temperatures", help="temperature rules file")
    s.add_argument("--batch-size", type=int)
    s.add_argument("--n-batches", type=int)
    s.add_argument("--tolerance", type=float)
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("eval", parents=[common], help="metrics of score files against labels")
    s.add_argument("labels", help="labeled JSONL")
    s.add_argument("--scores", action="append", metavar="NAME=PATH")
    s.add_argument("--hull-threshold", type=float)
    s.add_argument("--out", "-o", default="eval_out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("xrd-sim", parents=[common], help="simulated peak list from a CIF")
    s.add_argument("cif")
    s.add_argument("--wavelength", type=float)
    s.add_argument("--two-theta-max", type=float)
    s.add_argument("--out", "-o", default="xrd_out")
    s.set_defaults(func=cmd_xrd_sim)

    s = sub.add_parser("xrd-match", parents=[common], help="phase-presence score against measured peaks")
    s.add_argument("measured", help="two-column 2theta / counts file")
    s.add_argument("--cif")
    s.add_argument("--peaks", help="peak CSV from xrd-sim")
    s.add_argument("--calculated", help="calculated scan on the measured grid, for R_wp")
    s.add_argument("--wavelength", type=float)
    s.add_argument("--tol", type=float)
    s.add_argument("--out", "-o", default="xrd_out")
    s.set_defaults(func=cmd_xrd_match)

    s = sub.add_parser("pca", parents=[common], help="joint PCA maps of one or more tables")
    s.add_argument("tables", nargs="+", help="CSV files with formula and rank_avg columns")
    s.add_argument("--nx", type=int)
    s.add_argument("--ny", type=int)
    s.add_argument("--out", "-o", default="pca_out")
    s.set_defaults(func=cmd_pca)

    s = sub.add_parser("balance", help="balance a single reaction")
    s.add_argument("target")
    s.add_argument("precursors", nargs="+")
    s.add_argument("--slack", default="O2", help=f"comma-separated subset of {','.join(SLACK_SPECIES)}")
    s.add_argument("--minimize-slack", action="store_true")
    s.add_argument("--grams", type=float, help="target mass for precursor weights")
    s.set_defaults(func=cmd_balance)

    s = sub.add_parser("parse", help="inspect a formula or a CIF file")
    s.add_argument("item")
    s.set_defaults(func=cmd_parse)
    return p


def _fail(code: int, exc: BaseException) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, e)
    except MalformedInputError as e:
        return _fail(EXIT_PARTIAL, e)
    except (InputError, FileNotFoundError, DuplicateIdError, FormulaError, CifError, BalanceError,
            ValueError, KeyError, OSError) as e:
        return _fail(EXIT_INPUT, e)


if __name__ == "__main__":
    sys.exit(main())
