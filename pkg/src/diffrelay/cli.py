"""Batch front end: config-driven calibration, sweeps, and reports.

A run is described by a small YAML document (version 1).  The document
either spells out one experiment (constellation, decoder, grid, relays)
or names a figure preset that expands to several; scalar settings given
next to a preset override every expanded job.  Sweeps emit one CSV of
curve rows with the fixed column order

    source,kind,M,N_relays,decoder,snr_db,ser,ci_low,ci_high,errors,trials,seed

plus a JSON summary holding slope fits and curve comparisons.  Analytic
rows (closed_form, quadrature, asymptotic) carry errors=0, trials=0 and
collapse the interval onto the value.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, replace

import numpy as np
import yaml

from .analysis import (
    PepTermsConfig,
    SeriesTruncation,
    SnrPoint,
    fit_diversity_slope,
    pep_asymptotic_multirelay,
    pep_closed_form,
    pep_quadrature_approx,
    ser_nearest_neighbor,
)
from .channel import LinkParams
from .constellation import ConstellationSpec, make_psk, make_qam
from .decoders import DecoderConfig, count_ops
from .relay import calibrate_epsilon, load_epsilon_table, save_epsilon_table
from .simkit import ExperimentPlan, SerCurve, TrialsPolicy, compare_curves, run_sweep

CSV_COLUMNS = (
    "source", "kind", "M", "N_relays", "decoder", "snr_db",
    "ser", "ci_low", "ci_high", "errors", "trials", "seed",
)
OUTPUT_DIR_ENV = "DIFFRELAY_OUTPUT_DIR"
PRESETS = ("fig4_psk", "fig4_qam", "fig5", "fig6", "fig7")
_ANALYSIS_SOURCES = ("closed_form", "quadrature", "asymptotic")


class ConfigError(ValueError):
    """A config document that fails schema or value validation."""


# ---------------------------------------------------------------------------
# config schema


_TOP_KEYS = {
    "version", "preset", "constellation", "decoder", "grid_db", "n_relays",
    "tying", "sr_offsets_db", "rd_offsets_db", "trials", "seed", "frame_len",
    "sr_eps", "zero_noise", "analysis", "calibration", "compare", "output",
}
_PRESET_OVERRIDE_KEYS = {
    "version", "preset", "grid_db", "trials", "seed", "frame_len",
    "calibration", "output",
}
_CONSTELLATION_KEYS = {"kind", "M"}
_DECODER_KEYS = {"kind", "epsilons"}
_TRIALS_KEYS = {"min_errors", "max_trials"}
_ANALYSIS_KEYS = {"closed_form", "quadrature", "asymptotic"}
_CALIBRATION_KEYS = {"path", "grid_db", "method", "trials", "target_std_err"}
_COMPARE_KEYS = {"a", "b", "mode"}
_OUTPUT_KEYS = {"dir", "basename"}


def _check_keys(mapping, allowed, where):
    if not isinstance(mapping, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(mapping).__name__}")
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"{where} has unrecognized keys: {', '.join(unknown)}")


def _grid_from(value, where):
    if isinstance(value, dict):
        _check_keys(value, {"start", "stop", "step"}, where)
        try:
            start = float(value["start"])
            stop = float(value["stop"])
            step = float(value["step"])
        except KeyError as exc:
            raise ConfigError(f"{where} range needs start, stop, step") from exc
        if step <= 0.0 or stop < start:
            raise ConfigError(f"{where} range must have step > 0 and stop >= start")
        count = int(round((stop - start) / step)) + 1
        return tuple(round(start + i * step, 9) for i in range(count))
    if isinstance(value, (list, tuple)):
        if not value:
            raise ConfigError(f"{where} must not be empty")
        return tuple(float(v) for v in value)
    raise ConfigError(f"{where} must be a list or a start/stop/step mapping")


def _spec_from(mapping, where):
    _check_keys(mapping, _CONSTELLATION_KEYS, where)
    kind = mapping.get("kind")
    m = mapping.get("M")
    if kind not in ("psk", "qam"):
        raise ConfigError(f"{where}.kind must be 'psk' or 'qam', got {kind!r}")
    if not isinstance(m, int):
        raise ConfigError(f"{where}.M must be an integer, got {m!r}")
    return make_psk(m) if kind == "psk" else make_qam(m)


def _decoder_from(mapping, where):
    _check_keys(mapping, _DECODER_KEYS, where)
    if "kind" not in mapping:
        raise ConfigError(f"{where}.kind is required")
    eps = mapping.get("epsilons", ())
    if eps is None:
        eps = ()
    if not isinstance(eps, (list, tuple)):
        raise ConfigError(f"{where}.epsilons must be a list")
    return DecoderConfig(mapping["kind"], epsilons=tuple(float(v) for v in eps))


def _trials_from(mapping, where):
    _check_keys(mapping, _TRIALS_KEYS, where)
    defaults = TrialsPolicy()
    return TrialsPolicy(
        min_errors=int(mapping.get("min_errors", defaults.min_errors)),
        max_trials=int(mapping.get("max_trials", defaults.max_trials)),
    )


@dataclass(frozen=True)
class SweepJob:
    """One curve to produce: a plan plus which analytic overlays to emit."""

    label: str
    plan: ExperimentPlan
    closed_form: bool = False
    quadrature: bool = False
    asymptotic: bool = False


@dataclass(frozen=True)
class CalibrationConfig:
    path: str
    grid_db: tuple[float, ...]
    method: str
    trials: int
    target_std_err: float | None


@dataclass(frozen=True)
class RunConfig:
    """Validated run description: jobs to execute and where results go."""

    version: int
    jobs: tuple[SweepJob, ...]
    compare: tuple[tuple[str, str, str], ...]
    calibration: CalibrationConfig | None
    output_dir: str
    basename: str
    seed: int


def _job(label, spec, decoder, grid, trials, seed, frame_len, *,
         n_relays=1, tying="all_equal", sr_offsets=(), rd_offsets=(),
         sr_eps="configured", zero_noise=False, closed_form=False,
         quadrature=False, asymptotic=False):
    plan = ExperimentPlan(
        spec=spec, decoder=decoder, snr_grid_db=grid, n_relays=n_relays,
        tying=tying, sr_offsets_db=sr_offsets, rd_offsets_db=rd_offsets,
        trials=trials, seed=seed, frame_len=frame_len, sr_eps=sr_eps,
        zero_noise=zero_noise,
    )
    return SweepJob(label, plan, closed_form, quadrature, asymptotic)


def _preset_jobs(name, grid, trials, seed, frame_len):
    jobs = []
    comparisons = []
    if name == "fig4_psk":
        for m in (4, 16, 32):
            spec = make_psk(m)
            for kind in ("ml", "pl"):
                jobs.append(_job(f"psk{m}_{kind}", spec, DecoderConfig(kind),
                                 grid, trials, seed, frame_len))
            comparisons.append((f"psk{m}_pl", f"psk{m}_ml", "horizontal_db"))
    elif name == "fig4_qam":
        for m in (8, 16, 32, 64):
            spec = make_qam(m)
            for kind in ("ml", "pl", "genie_reference"):
                jobs.append(_job(f"qam{m}_{kind}", spec, DecoderConfig(kind),
                                 grid, trials, seed, frame_len))
            comparisons.append((f"qam{m}_ml", f"qam{m}_genie_reference",
                                "horizontal_db"))
    elif name == "fig5":
        spec = make_psk(8)
        for kind in ("pl", "naive_eps0"):
            jobs.append(_job(f"psk8_{kind}", spec, DecoderConfig(kind),
                             grid, trials, seed, frame_len))
        comparisons.append(("psk8_pl", "psk8_naive_eps0", "horizontal_db"))
    elif name == "fig6":
        for m in (4, 16, 32):
            jobs.append(_job(f"psk{m}_pl", make_psk(m), DecoderConfig("pl"),
                             grid, trials, seed, frame_len,
                             closed_form=True, quadrature=True))
    elif name == "fig7":
        for n in (2, 3):
            jobs.append(_job(f"psk4_pl_n{n}", make_psk(4), DecoderConfig("pl"),
                             grid, trials, seed, frame_len, n_relays=n,
                             asymptotic=True))
    else:
        raise ConfigError(f"preset must be one of {PRESETS}, got {name!r}")
    return tuple(jobs), tuple(comparisons)


def load_config(path, *, seed=None, output_dir=None):
    """Parse and validate a YAML run config; overrides win over the file."""
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if doc is None:
        doc = {}
    _check_keys(doc, _TOP_KEYS, "config")
    if doc.get("version") != 1:
        raise ConfigError(f"config.version must be 1, got {doc.get('version')!r}")

    preset = doc.get("preset")
    if preset is not None:
        extra = sorted(set(doc) - _PRESET_OVERRIDE_KEYS)
        if extra:
            raise ConfigError(
                f"preset {preset!r} already defines: {', '.join(extra)}; "
                "remove those keys or drop the preset"
            )

    run_seed = int(doc.get("seed", 0)) if seed is None else int(seed)
    frame_len = int(doc.get("frame_len", 64))
    trials = _trials_from(doc.get("trials", {}), "config.trials")

    calibration = None
    if "calibration" in doc:
        cal = doc["calibration"]
        _check_keys(cal, _CALIBRATION_KEYS, "config.calibration")
        if "path" not in cal:
            raise ConfigError("config.calibration.path is required")
        method = cal.get("method", "analytic_approx")
        if method not in ("analytic_approx", "monte_carlo"):
            raise ConfigError(
                f"config.calibration.method must be analytic_approx or "
                f"monte_carlo, got {method!r}"
            )
        cal_grid = _grid_from(cal["grid_db"], "config.calibration.grid_db") \
            if "grid_db" in cal else ()
        target = cal.get("target_std_err")
        calibration = CalibrationConfig(
            path=str(cal["path"]), grid_db=cal_grid, method=method,
            trials=int(cal.get("trials", 1_000_000)),
            target_std_err=None if target is None else float(target),
        )

    try:
        if preset is not None:
            grid = _grid_from(doc.get("grid_db", {"start": 0, "stop": 36, "step": 3}),
                              "config.grid_db")
            jobs, comparisons = _preset_jobs(preset, grid, trials, run_seed, frame_len)
        else:
            for key in ("constellation", "decoder", "grid_db"):
                if key not in doc:
                    raise ConfigError(f"config.{key} is required without a preset")
            spec = _spec_from(doc["constellation"], "config.constellation")
            decoder = _decoder_from(doc["decoder"], "config.decoder")
            grid = _grid_from(doc["grid_db"], "config.grid_db")
            analysis = doc.get("analysis", {})
            _check_keys(analysis, _ANALYSIS_KEYS, "config.analysis")
            toggles = {k: bool(analysis.get(k, False)) for k in _ANALYSIS_KEYS}
            n_relays = int(doc.get("n_relays", 1))
            if (toggles["closed_form"] or toggles["quadrature"]) and (
                spec.kind != "psk" or n_relays != 1
            ):
                raise ConfigError(
                    "closed_form and quadrature analysis model one erroneous "
                    "relay with a PSK alphabet"
                )
            if toggles["asymptotic"] and spec.kind != "psk":
                raise ConfigError("asymptotic analysis needs a PSK alphabet")
            label = f"{spec.kind}{spec.M}_{decoder.kind}"
            if n_relays != 1:
                label += f"_n{n_relays}"
            jobs = (
                _job(
                    label, spec, decoder, grid, trials, run_seed, frame_len,
                    n_relays=n_relays, tying=doc.get("tying", "all_equal"),
                    sr_offsets=tuple(doc.get("sr_offsets_db", ())),
                    rd_offsets=tuple(doc.get("rd_offsets_db", ())),
                    sr_eps=doc.get("sr_eps", "configured"),
                    zero_noise=bool(doc.get("zero_noise", False)),
                    **toggles,
                ),
            )
            comparisons = ()
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc

    if "compare" in doc and preset is None:
        entries = doc["compare"]
        if not isinstance(entries, list):
            raise ConfigError("config.compare must be a list")
        pairs = []
        labels = {job.label for job in jobs}
        for i, entry in enumerate(entries):
            _check_keys(entry, _COMPARE_KEYS, f"config.compare[{i}]")
            for side in ("a", "b"):
                if entry.get(side) not in labels:
                    raise ConfigError(
                        f"config.compare[{i}].{side} must name a job label"
                    )
            pairs.append((entry["a"], entry["b"], entry.get("mode", "ratio")))
        comparisons = tuple(pairs)

    out = doc.get("output", {})
    _check_keys(out, _OUTPUT_KEYS, "config.output")
    resolved_dir = output_dir or out.get("dir") or os.environ.get(OUTPUT_DIR_ENV) or "."
    default_base = os.path.splitext(os.path.basename(path))[0]
    basename = out.get("basename", default_base)
    return RunConfig(
        version=1, jobs=jobs, compare=comparisons, calibration=calibration,
        output_dir=str(resolved_dir), basename=str(basename), seed=run_seed,
    )


# ---------------------------------------------------------------------------
# calibrate


def cmd_calibrate(config):
    """Fill the epsilon table for every (kind, M, SNR) the config requests."""
    if config.calibration is None or not config.calibration.grid_db:
        print("calibrate: config.calibration.path and grid_db are required",
              file=sys.stderr)
        return 2
    cal = config.calibration
    specs = {(job.plan.spec.kind, job.plan.spec.M): job.plan.spec
             for job in config.jobs}
    table = {}
    if os.path.exists(cal.path):
        table = load_epsilon_table(cal.path)
    violations = 0
    for kind, m in sorted(specs):
        spec = specs[(kind, m)]
        for i, snr_db in enumerate(cal.grid_db):
            link = LinkParams(1.0, 10.0 ** (-snr_db / 10.0))
            est = calibrate_epsilon(
                link, spec, method=cal.method, trials=cal.trials,
                rng=np.random.default_rng((config.seed, 1000 + i)),
                target_std_err=cal.target_std_err,
            )
            status = "ok"
            if cal.target_std_err is not None and est.std_err > cal.target_std_err:
                status = "std_err above target"
                violations += 1
            table[(kind, m, round(float(snr_db), 6))] = est
            print(f"{kind}-{m} {snr_db:g} dB: eps={est.value:.6e} "
                  f"std_err={est.std_err:.2e} ({status})")
    parent = os.path.dirname(cal.path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    save_epsilon_table(cal.path, table)
    print(f"wrote {cal.path} ({len(table)} rows)")
    return 1 if violations else 0


# ---------------------------------------------------------------------------
# sweep


def _epsilon_lookup(config):
    if config.calibration is None or not os.path.exists(config.calibration.path):
        return {}
    table = load_epsilon_table(config.calibration.path)
    return {key: est.value for key, est in table.items()}


def _analysis_row_value(source, job, snr_db, eps_by_key):
    """SER of one analytic overlay at one grid point."""
    spec = job.plan.spec
    gbar = 10.0 ** (snr_db / 10.0)
    if source == "asymptotic":
        # series depth follows the gamma-weighted term peak, which moves out
        # linearly with average SNR
        trunc = SeriesTruncation(max_terms=max(8192, int(80.0 * gbar)))
        cfg = PepTermsConfig(SnrPoint.from_db(snr_db, snr_db), 1e-6, spec.M,
                             truncation=trunc)
        n = job.plan.n_relays

        def pep_fn(x_p, x_q, inner_cfg):
            return pep_asymptotic_multirelay(x_p, x_q, n, gbar, inner_cfg)

        return ser_nearest_neighbor(spec, pep_fn, cfg)
    key = (spec.kind, spec.M, round(float(snr_db), 6))
    if key not in eps_by_key:
        raise ValueError(
            f"no calibrated epsilon for {spec.kind}-{spec.M} at {snr_db:g} dB; "
            "run the calibrate step first"
        )
    cfg = PepTermsConfig(
        SnrPoint.from_db(snr_db, snr_db, snr_db), eps_by_key[key], spec.M,
        truncation=SeriesTruncation(max_terms=2048, rel_tol=1e-8),
    )
    pep_fn = pep_closed_form if source == "closed_form" else pep_quadrature_approx
    return ser_nearest_neighbor(spec, pep_fn, cfg)


def _mc_rows(job, curve):
    plan = job.plan
    rows = []
    for point in curve.points:
        if point.failure is not None:
            continue
        rows.append({
            "source": "mc", "kind": plan.spec.kind, "M": plan.spec.M,
            "N_relays": plan.n_relays, "decoder": plan.decoder.kind,
            "snr_db": point.snr_db, "ser": point.ser,
            "ci_low": point.ci_low, "ci_high": point.ci_high,
            "errors": point.errors, "trials": point.trials, "seed": plan.seed,
        })
    return rows


def _slope_entry(curve):
    snr = curve.snr_db
    if snr.size < 3:
        return {"error": "fewer than 3 successful points"}
    window = (float(snr.min()) - 0.1, float(snr.max()) + 0.1)
    try:
        return {"window_db": list(window),
                "slope": fit_diversity_slope(curve, window)}
    except ValueError as exc:
        return {"error": str(exc)}


def cmd_sweep(config, workers=1):
    """Run every job, emit the curve CSV and the JSON summary."""
    eps_by_key = _epsilon_lookup(config)
    eps_table = tuple(sorted(eps_by_key.items()))
    rows = []
    summary_curves = []
    curves_by_label = {}
    failed = False
    for job in config.jobs:
        plan = replace(job.plan, epsilon_table=eps_table)
        curve = run_sweep(plan, workers=workers)
        curves_by_label[job.label] = curve
        rows.extend(_mc_rows(job, curve))
        entry = {
            "label": job.label, "kind": plan.spec.kind, "M": plan.spec.M,
            "n_relays": plan.n_relays, "decoder": plan.decoder.kind,
            "seed": plan.seed, "plan_hash": curve.plan_hash,
            "wall_time_s": curve.wall_time_s,
            "points_ok": int(curve.snr_db.size),
            "failures": [
                {"snr_db": p.snr_db, "reason": p.failure}
                for p in curve.failures
            ],
            "slope_fit": _slope_entry(curve),
            "analysis_warnings": [],
        }
        if curve.failures:
            failed = True
        for source in _ANALYSIS_SOURCES:
            if not getattr(job, source):
                continue
            for snr_db in plan.snr_grid_db:
                try:
                    result = _analysis_row_value(source, job, snr_db, eps_by_key)
                except ValueError as exc:
                    failed = True
                    entry["failures"].append(
                        {"snr_db": snr_db, "reason": f"{source}: {exc}"}
                    )
                    continue
                for warning in result.warnings:
                    entry["analysis_warnings"].append(
                        {"snr_db": snr_db, "source": source, "warning": warning}
                    )
                rows.append({
                    "source": source, "kind": plan.spec.kind, "M": plan.spec.M,
                    "N_relays": plan.n_relays, "decoder": "pl",
                    "snr_db": snr_db, "ser": result.value,
                    "ci_low": result.value, "ci_high": result.value,
                    "errors": 0, "trials": 0, "seed": plan.seed,
                })
        summary_curves.append(entry)

    comparisons = []
    for a_label, b_label, mode in config.compare:
        entry = {"a": a_label, "b": b_label, "mode": mode}
        try:
            report = compare_curves(
                curves_by_label[a_label], curves_by_label[b_label], mode=mode
            )
            entry["rows"] = [
                {"snr_db": row.snr_db, "value": row.value,
                 "low": row.low, "high": row.high}
                for row in report.rows
            ]
        except ValueError as exc:
            entry["error"] = str(exc)
        comparisons.append(entry)

    os.makedirs(config.output_dir, exist_ok=True)
    csv_path = os.path.join(config.output_dir, f"{config.basename}.csv")
    json_path = os.path.join(config.output_dir, f"{config.basename}.json")
    write_rows(csv_path, rows)
    summary = {
        "version": config.version,
        "basename": config.basename,
        "curves": summary_curves,
        "comparisons": comparisons,
        "all_points_ok": not failed,
    }
    with open(json_path, "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    print(f"wrote {csv_path} ({len(rows)} rows) and {json_path}")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# CSV emit/parse


def write_rows(path, rows):
    """Emit curve rows in the normative column order with round-trip floats."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([
                row["source"], row["kind"], row["M"], row["N_relays"],
                row["decoder"], repr(float(row["snr_db"])),
                repr(float(row["ser"])), repr(float(row["ci_low"])),
                repr(float(row["ci_high"])), row["errors"], row["trials"],
                row["seed"],
            ])


def read_rows(path):
    """Parse a curve CSV back into typed row dicts."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(CSV_COLUMNS):
            raise ValueError(
                f"{path} does not have the expected columns {CSV_COLUMNS}"
            )
        rows = []
        for raw in reader:
            rows.append({
                "source": raw["source"], "kind": raw["kind"],
                "M": int(raw["M"]), "N_relays": int(raw["N_relays"]),
                "decoder": raw["decoder"], "snr_db": float(raw["snr_db"]),
                "ser": float(raw["ser"]), "ci_low": float(raw["ci_low"]),
                "ci_high": float(raw["ci_high"]), "errors": int(raw["errors"]),
                "trials": int(raw["trials"]), "seed": int(raw["seed"]),
            })
    return rows


def _curve_from_rows(rows, selectors, where):
    """One mc curve out of parsed rows, narrowed by key=value selectors."""
    chosen = [r for r in rows if r["source"] == "mc"]
    for key, value in selectors:
        chosen = [r for r in chosen if str(r[key]) == value]
    if not chosen:
        raise ValueError(f"{where}: no mc rows match the selection")
    identities = {(r["kind"], r["M"], r["N_relays"], r["decoder"], r["seed"])
                  for r in chosen}
    if len(identities) > 1:
        raise ValueError(
            f"{where}: selection is ambiguous across curves {sorted(identities)}; "
            "add key=value selectors (kind, M, N_relays, decoder, seed)"
        )
    from .simkit import SerPoint

    chosen.sort(key=lambda r: r["snr_db"])
    points = tuple(
        SerPoint(r["snr_db"], r["errors"], r["trials"], r["ser"],
                 r["ci_low"], r["ci_high"])
        for r in chosen
    )
    return SerCurve(points, "csv", chosen[0]["seed"], chosen[0]["decoder"], 0.0)


def _parse_selectors(pairs, where):
    out = []
    for pair in pairs or ():
        if "=" not in pair:
            raise ValueError(f"{where}: selector {pair!r} is not key=value")
        key, value = pair.split("=", 1)
        if key not in ("kind", "M", "N_relays", "decoder", "seed"):
            raise ValueError(f"{where}: cannot select on {key!r}")
        out.append((key, value))
    return out


def cmd_compare(path_a, path_b, mode, select_a, select_b):
    """Compare one mc curve from each CSV; report goes to stdout as JSON."""
    curve_a = _curve_from_rows(read_rows(path_a), _parse_selectors(select_a, "--select-a"), path_a)
    curve_b = _curve_from_rows(read_rows(path_b), _parse_selectors(select_b, "--select-b"), path_b)
    report = compare_curves(curve_a, curve_b, mode=mode)
    payload = {
        "mode": report.mode,
        "rows": [
            {"snr_db": row.snr_db, "value": row.value,
             "low": row.low, "high": row.high}
            for row in report.rows
        ],
    }
    json.dump(payload, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


# ---------------------------------------------------------------------------
# complexity


def ml_op_formula(m):
    return 15 * m * m + 20 * m


def pl_op_formula(m):
    return 33 * (m - 1)


def complexity_table(sizes):
    rows = []
    for m in sizes:
        ml_measured = count_ops("ml", m)
        pl_measured = count_ops("pl", m)
        rows.append({
            "M": m,
            "ml_measured": ml_measured, "ml_formula": ml_op_formula(m),
            "pl_measured": pl_measured, "pl_formula": pl_op_formula(m),
            "ml_equal": ml_measured == ml_op_formula(m),
            "pl_equal": pl_measured == pl_op_formula(m),
        })
    return rows


def cmd_complexity(sizes, output=None):
    rows = complexity_table(sizes)
    header = f"{'M':>4} {'ml_measured':>12} {'ml_formula':>11} " \
             f"{'pl_measured':>12} {'pl_formula':>11} {'ml_equal':>9} {'pl_equal':>9}"
    print(header)
    for row in rows:
        print(f"{row['M']:>4} {row['ml_measured']:>12} {row['ml_formula']:>11} "
              f"{row['pl_measured']:>12} {row['pl_formula']:>11} "
              f"{str(row['ml_equal']):>9} {str(row['pl_equal']):>9}")
    if output:
        with open(output, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        print(f"wrote {output}")
    return 0 if all(r["ml_equal"] and r["pl_equal"] for r in rows) else 1


# ---------------------------------------------------------------------------
# entry point


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="diffrelay",
        description="Differential decode-and-forward link simulator and analyzer",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    for verb in ("calibrate", "sweep"):
        p = sub.add_parser(verb)
        p.add_argument("config", help="YAML run config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--output-dir", default=None,
                       help=f"override output directory (or ${OUTPUT_DIR_ENV})")
        if verb == "sweep":
            p.add_argument("--workers", type=int, default=1,
                           help="parallel batches per grid point")

    p = sub.add_parser("complexity")
    p.add_argument("--sizes", type=int, nargs="+",
                   default=[2, 4, 8, 16, 32, 64])
    p.add_argument("--output", default=None, help="also write the table as CSV")

    p = sub.add_parser("compare")
    p.add_argument("csv_a")
    p.add_argument("csv_b")
    p.add_argument("--mode", choices=("ratio", "horizontal_db"), default="ratio")
    p.add_argument("--select-a", action="append", default=[],
                   metavar="KEY=VALUE")
    p.add_argument("--select-b", action="append", default=[],
                   metavar="KEY=VALUE")
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        if args.verb == "complexity":
            return cmd_complexity(args.sizes, args.output)
        if args.verb == "compare":
            return cmd_compare(args.csv_a, args.csv_b, args.mode,
                               args.select_a, args.select_b)
        config = load_config(args.config, seed=args.seed,
                             output_dir=args.output_dir)
        if args.verb == "calibrate":
            return cmd_calibrate(config)
        return cmd_sweep(config, workers=args.workers)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
