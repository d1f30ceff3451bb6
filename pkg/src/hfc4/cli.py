"""Command line interface: INI configs in, CSV diagnostics + binary
snapshots + JSON metadata out.

Exit codes: 0 completed, 2 config/validation rejection, 3 drift-guard
abort, 4 budget refusal.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from configparser import ConfigParser
from dataclasses import asdict
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__, diagnostics, model, spectral
from .diagnostics import (BudgetError, DiagnosticsRecord, default_weight,
                          localized_interaction, make_record_fn,
                          pair_identity_check, scattering_residual,
                          spectral_negativity, triple_inequality_monitor)
from .dynamics import (DriftGuardError, EvolveSchedule, IntegratorConfig,
                       SystemState, evolve)
from .model import (ModelParams, PotentialSpec, is_biharmonic_admissible,
                    operational_validity, scattering_pairs, validate_params)
from .spectral import Field, Grid

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DRIFT = 3
EXIT_BUDGET = 4


class ConfigError(ValueError):
    pass


_KNOWN_KEYS = {
    "model": {"d", "n_components", "p", "gamma1", "gamma2", "rho1", "rho2",
              "sigma1", "sigma2", "b", "b_jk"},
    "grid": {"n", "l"},
    "integrator": {"dt", "t", "diagnostics_stride", "drift_guard"},
    "potential": {"family", "v0", "s"},
    "initial": {"kind", "amplitude", "width", "center", "velocity", "kmax",
                "cutoff", "sharpness"},
    "diagnostics": {"norms", "eps", "ball_radius", "stride", "snapshot_times",
                    "tensor", "tensor_stride", "fit_window"},
    "run": {"tag", "seed"},
}


def _number(tok: str, h: float = None) -> float:
    tok = tok.strip()
    if tok in ("inf", "+inf", "infinity"):
        return math.inf
    if h is not None and tok.endswith("h"):
        return float(Fraction(tok[:-1])) * h
    if "/" in tok:
        return float(Fraction(tok))
    return float(tok)


def _float_list(text: str) -> list:
    return [_number(t) for t in text.replace(";", ",").split(",") if t.strip()]


def _vector_list(text: str, d: int, n: int) -> list:
    """Per-component vectors: components split by ';', entries by spaces."""
    parts = [p for p in text.split(";") if p.strip()]
    vecs = [[_number(t) for t in p.split()] for p in parts]
    if len(vecs) == 1:
        vecs = vecs * n
    if len(vecs) != n or any(len(v) != d for v in vecs):
        raise ConfigError(f"need {n} vectors of length {d}, got {text!r}")
    return vecs


def load_config(path: str) -> dict:
    """Parse and fully validate the INI config; unknown sections or keys
    are rejected before any computation."""
    parser = ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config {path}")
    cfg: dict = {}
    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in _KNOWN_KEYS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
        cfg[section] = dict(parser[section])
    for required in ("model", "grid", "integrator"):
        if required not in cfg:
            raise ConfigError(f"missing required section [{required}]")
    return cfg


def build_problem(cfg: dict):
    """Config dict -> (params, grid, potential, integrator, diagnostics opts,
    run opts).  Raises ConfigError on malformed values."""
    m = cfg["model"]
    try:
        n_comp = int(m.get("n_components", "1"))
        b_jk_text = m.get("b_jk", "0")
        rows = [r for r in b_jk_text.split(";") if r.strip()]
        if len(rows) == 1 and "," not in rows[0] and n_comp > 1:
            b_jk = np.full((n_comp, n_comp), _number(rows[0]))
        else:
            b_jk = np.array([[_number(t) for t in r.split(",")] for r in rows])
        params = ModelParams(
            d=int(m["d"]), N=n_comp, p=_number(m["p"]),
            gamma1=_number(m["gamma1"]), gamma2=_number(m["gamma2"]),
            rho1=_number(m.get("rho1", "0")), rho2=_number(m.get("rho2", "0")),
            sigma1=int(m.get("sigma1", "0")), sigma2=int(m.get("sigma2", "0")),
            b=_number(m.get("b", "0")), b_jk=b_jk)
        g = cfg["grid"]
        grid = Grid(params.d, int(g["n"]), _number(g["l"]))
        it = cfg["integrator"]
        integ = IntegratorConfig(
            dt=_number(it.get("dt", "5e-3")),
            diagnostics_stride=int(it.get("diagnostics_stride", "10")),
            drift_guard=_number(it.get("drift_guard", "1e-4")))
        t_final = _number(it.get("t", "1"))
        pot_cfg = cfg.get("potential", {})
        potential = PotentialSpec(
            family=pot_cfg.get("family", "zero"),
            V0=_number(pot_cfg.get("v0", "0")),
            s=_number(pot_cfg.get("s", "1")))
        dg = cfg.get("diagnostics", {})
        diag = {
            "norm_labels": [t.strip() for t in
                            dg.get("norms", "2, inf").split(",") if t.strip()],
            "eps": _number(dg.get("eps", "2h"), h=grid.h),
            "ball_radius": _number(dg.get("ball_radius", "2")),
            "stride": int(dg.get("stride", "4")),
            "snapshot_times": _float_list(dg.get("snapshot_times", "")),
            "tensor": dg.get("tensor", "false").lower() == "true",
            "tensor_stride": int(dg.get("tensor_stride", "4")),
            "fit_window": _float_list(dg.get("fit_window", "1, 10")),
        }
        run = {"tag": cfg.get("run", {}).get("tag", "run"),
               "seed": int(cfg.get("run", {}).get("seed", "0"))}
        return params, grid, potential, integ, t_final, diag, run
    except ConfigError:
        raise
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"malformed config: {exc}") from exc


def build_initial_state(cfg: dict, params: ModelParams, grid: Grid,
                        seed: int) -> SystemState:
    ic = cfg.get("initial", {"kind": "gaussian"})
    kind = ic.get("kind", "gaussian")
    n = params.N
    if kind == "gaussian":
        amps = _float_list(ic.get("amplitude", "1"))
        widths = _float_list(ic.get("width", "1"))
        amps = amps * n if len(amps) == 1 else amps
        widths = widths * n if len(widths) == 1 else widths
        if len(amps) != n or len(widths) != n:
            raise ConfigError("need one amplitude/width per component")
        centers = _vector_list(ic.get("center", "0 " * params.d), params.d, n)
        vels = _vector_list(ic.get("velocity", "0 " * params.d), params.d, n)
        fields = [spectral.gaussian_field(grid, width=widths[j],
                                          center=centers[j],
                                          velocity=vels[j],
                                          amplitude=amps[j])
                  for j in range(n)]
        return SystemState(0.0, fields)
    if kind == "band-limited":
        cutoff = _number(ic.get("cutoff", "1"), h=grid.h)
        sharpness = int(ic.get("sharpness", "8"))
        amps = _float_list(ic.get("amplitude", "1"))
        amps = amps * n if len(amps) == 1 else amps
        if len(amps) != n:
            raise ConfigError("need one amplitude per component")
        fields = [spectral.band_limited_field(grid, cutoff=cutoff,
                                              sharpness=sharpness,
                                              amplitude=amps[j])
                  for j in range(n)]
        return SystemState(0.0, fields)
    if kind == "random-smooth":
        kmax = int(ic.get("kmax", "3"))
        width = _float_list(ic.get("width", "2"))[0]
        amp = _float_list(ic.get("amplitude", "1"))[0]
        rng = np.random.default_rng(seed)
        fields = [random_smooth_field(grid, rng, kmax=kmax, width=width,
                                      amplitude=amp) for _ in range(n)]
        return SystemState(0.0, fields)
    raise ConfigError(f"unknown initial data kind {kind!r}")


def random_smooth_field(grid: Grid, rng, kmax: int = 3, width: float = 2.0,
                        amplitude: float = 1.0) -> Field:
    """Gaussian envelope times a random low-mode trigonometric polynomial."""
    env = np.exp(-grid.radius_sq() / (2 * width ** 2))
    vals = np.zeros(grid.shape, dtype=np.complex128)
    base = 2 * np.pi / grid.L
    nmodes = 4
    ks = rng.integers(-kmax, kmax + 1, size=(nmodes, grid.d))
    cs = rng.standard_normal(nmodes) + 1j * rng.standard_normal(nmodes)
    for kvec, c in zip(ks, cs):
        phase = np.zeros(grid.shape)
        for i, xi in enumerate(grid.coords()):
            phase = phase + base * kvec[i] * xi
        vals += c * np.exp(1j * phase)
    vals *= env
    peak = float(np.max(np.abs(vals)))
    if peak > 0:
        vals *= amplitude / peak
    return Field(grid, vals)


# ---------------------------------------------------------------------------
# Output writers

def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def csv_header(norm_labels: list) -> list:
    cols = ["t", "j", "mass_j", "E_total", "E_kin4", "E_kin2", "E_pot",
            "E_choquard", "E_hf"]
    cols += [f"Lr_{lab}_j" for lab in norm_labels]
    cols += ["M_j", "tensor_total", "residual_morawetz", "Q_localized",
             "scattering_residual"]
    return cols


def write_csv(path: Path, records: list, norm_labels: list,
              extras: dict = None) -> None:
    """One row per (record, component).  extras maps a record time to a
    dict of trailing-column overrides (applied to every j-row there)."""
    extras = extras or {}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(csv_header(norm_labels))
        for rec in records:
            extra = extras.get(round(rec.t, 9), {})
            for j in range(len(rec.mass)):
                row = [_fmt(rec.t), str(j), _fmt(rec.mass[j]),
                       _fmt(rec.energy.total), _fmt(rec.energy.kin4),
                       _fmt(rec.energy.kin2), _fmt(rec.energy.pot),
                       _fmt(rec.energy.choquard), _fmt(rec.energy.hf)]
                for lab in norm_labels:
                    row.append(_fmt(rec.norms[lab][j]))
                row.append(_fmt(rec.morawetz[j]))
                row.append(_fmt(extra.get("tensor_total", rec.tensor_total)))
                row.append(_fmt(extra.get("residual_morawetz",
                                          rec.residual_morawetz)))
                row.append(_fmt(extra.get("Q_localized", rec.q_localized)))
                row.append(_fmt(extra.get("scattering_residual",
                                          rec.scattering_residual)))
                writer.writerow(row)


def write_metadata(path: Path, cfg: dict, params: ModelParams, grid: Grid,
                   result_info: dict) -> None:
    report = validate_params(params)
    payload = {
        "package_version": __version__,
        "config": cfg,
        "grid": {"d": grid.d, "n": grid.n, "L": grid.L},
        "admissibility": report.to_dict(),
        **result_info,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def write_snapshots(outdir: Path, snapshots: dict) -> None:
    snapdir = outdir / "snapshots"
    snapdir.mkdir(parents=True, exist_ok=True)
    for t, st in sorted(snapshots.items()):
        with open(snapdir / f"snapshot_t{t:.6f}.bin", "wb") as fh:
            spectral.write_snapshot(fh, st.grid, st.t, st.fields)


# ---------------------------------------------------------------------------
# Subcommands

def _norm_value(label: str) -> float:
    return _number(label)


def _decay_slopes(records: list, norm_labels: list, window) -> dict:
    lo, hi = window
    ts = np.array([r.t for r in records])
    sel = (ts >= lo) & (ts <= hi)
    out = {}
    for lab in norm_labels:
        slopes = []
        n_comp = len(records[0].mass)
        for j in range(n_comp):
            vals = np.array([r.norms[lab][j] for r in records])[sel]
            tt = ts[sel]
            good = vals > 0
            if np.sum(good) < 2:
                slopes.append(None)
                continue
            slope = np.polyfit(np.log(tt[good]), np.log(vals[good]), 1)[0]
            slopes.append(float(slope))
        out[lab] = slopes
    return out


def _run_simulation(cfg: dict, outdir: Path, want_scattering: bool = False):
    params, grid, potential, integ, t_final, diag, run = build_problem(cfg)
    problems = operational_validity(params)
    if potential.family != "zero":
        pot_report = model.potential_admissibility(potential, grid)
        if not pot_report.ok:
            problems.append("potential fails nonnegativity/repulsion checks")
    if problems:
        for p in problems:
            logger.error("validation: %s", p)
        return EXIT_VALIDATION, None
    state = build_initial_state(cfg, params, grid, run["seed"])

    norm_pairs = [(lab, _norm_value(lab)) for lab in diag["norm_labels"]]
    weight = diagnostics.RegularizedAbsWeight(diag["eps"])
    record_fn = make_record_fn(params, potential, tuple(norm_pairs),
                               weight, diag["tensor_stride"], diag["tensor"])
    snapshot_times = sorted(set(diag["snapshot_times"]) | {0.0, t_final})
    schedule = EvolveSchedule(tuple(snapshot_times), record_fn)
    try:
        result = evolve(state, t_final, params, potential, integ, schedule)
    except DriftGuardError as exc:
        logger.error("drift guard: %s", exc)
        return EXIT_DRIFT, None
    except BudgetError as exc:
        logger.error("budget: %s", exc)
        return EXIT_BUDGET, None

    outdir.mkdir(parents=True, exist_ok=True)
    extras: dict = {}
    info: dict = {"boundary_warning": result.boundary_warning,
                  "steps_taken": result.steps_taken}

    snaps = [result.snapshots[t] for t in sorted(result.snapshots)]
    if len(snaps) > 1:
        mon = localized_interaction(snaps, params, diag["ball_radius"],
                                    diag["stride"])
        for t, q in zip(mon.times, mon.cumulative):
            extras.setdefault(round(float(t), 9), {})["Q_localized"] = q
        info["localized_monitor"] = {
            "times": mon.times.tolist(),
            "integrand": mon.integrand.tolist(),
            "cumulative": mon.cumulative.tolist(),
            "c_box": mon.c_box,
        }
    if want_scattering:
        series = []
        for a, b in zip(snaps, snaps[1:]):
            res = scattering_residual(a, b, params)
            series.append({"t_from": a.t, "t_to": b.t, "residual": res})
            extras.setdefault(round(b.t, 9), {})["scattering_residual"] = res
        info["scattering_series"] = series

    write_csv(outdir / "run.csv", result.records, diag["norm_labels"], extras)
    write_snapshots(outdir, result.snapshots)
    return EXIT_OK, (cfg, params, grid, diag, result, info, outdir)


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    params, grid, potential, _, _, _, _ = build_problem(cfg)
    report = validate_params(params)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    pairs = scattering_pairs(params)
    for pr in pairs:
        ok = pr.q is not None and is_biharmonic_admissible(pr.q, pr.r, params.d)
        print(f"{pr.name}: q={pr.q} r={pr.r} theta={pr.theta} "
              f"admissible={ok} theta_ok={pr.theta_ok}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    code, payload = _run_simulation(cfg, Path(args.outdir))
    if code != EXIT_OK:
        return code
    cfg, params, grid, diag, result, info, outdir = payload
    write_metadata(outdir / "metadata.json", cfg, params, grid, info)
    print(f"completed: {outdir / 'run.csv'}")
    return EXIT_OK


def cmd_decay(args) -> int:
    cfg = load_config(args.config)
    code, payload = _run_simulation(cfg, Path(args.outdir))
    if code != EXIT_OK:
        return code
    cfg, params, grid, diag, result, info, outdir = payload
    slopes = _decay_slopes(result.records, diag["norm_labels"],
                           diag["fit_window"])
    info["decay_slopes"] = slopes
    info["fit_window"] = diag["fit_window"]
    write_metadata(outdir / "metadata.json", cfg, params, grid, info)
    for lab, vals in slopes.items():
        print(f"decay slope L^{lab}: "
              + ", ".join("n/a" if v is None else f"{v:.6f}" for v in vals))
    return EXIT_OK


def cmd_scattering(args) -> int:
    cfg = load_config(args.config)
    params, _, _, _, _, _, _ = build_problem(cfg)
    if params.sigma2 != 0:
        logger.error("scattering experiment requires sigma2 = 0")
        return EXIT_VALIDATION
    code, payload = _run_simulation(cfg, Path(args.outdir),
                                    want_scattering=True)
    if code != EXIT_OK:
        return code
    cfg, params, grid, diag, result, info, outdir = payload
    write_metadata(outdir / "metadata.json", cfg, params, grid, info)
    for row in info["scattering_series"]:
        print(f"residual [{row['t_from']:.3f} -> {row['t_to']:.3f}]: "
              f"{row['residual']:.6e}")
    return EXIT_OK


def cmd_check_identities(args) -> int:
    cfg = load_config(args.config)
    params, _, _, _, _, diag, run = build_problem(cfg)
    rng = np.random.default_rng(run["seed"])
    failures = []

    def report(name: str, value: float, tol: float):
        ok = value <= tol
        print(f"{'PASS' if ok else 'FAIL'} {name}: {value:.3e} (tol {tol:.1e})")
        if not ok:
            failures.append(name)

    grid1 = Grid(1, 64, 24.0)
    f1 = random_smooth_field(grid1, rng)
    f2 = random_smooth_field(grid1, rng)
    res = pair_identity_check(f1, f2)
    report("pair identity d=1 n=64", res.residual, 1e-3)
    grid2 = Grid(2, 16, 12.0)
    g1 = random_smooth_field(grid2, rng)
    g2 = random_smooth_field(grid2, rng)
    res2 = pair_identity_check(g1, g2)
    report("pair identity d=2 n=16", res2.residual, 1e-2)

    tri = triple_inequality_monitor(params.d, 200000, run["seed"])
    report("triple inequality (min, negated)", -tri["min_normalized"], 1e-12)

    neg = spectral_negativity(SystemState(0.0, [f1]))
    report("spectral negativity", neg, 0.0)

    bad_pairs = [p.name for p in scattering_pairs(params)
                 if p.q is None or not is_biharmonic_admissible(p.q, p.r, params.d)]
    print(("PASS" if not bad_pairs else "FAIL")
          + f" pair admissibility relation: offenders={bad_pairs}")
    if bad_pairs:
        failures.append("pair admissibility")

    return EXIT_OK if not failures else 1


def cmd_replay(args) -> int:
    rundir = Path(args.rundir)
    meta = json.loads((rundir / "metadata.json").read_text())
    cfg = meta["config"]
    params, grid, potential, integ, t_final, diag, run = build_problem(cfg)
    norm_pairs = [(lab, _norm_value(lab)) for lab in diag["norm_labels"]]
    weight = diagnostics.RegularizedAbsWeight(diag["eps"])
    record_fn = make_record_fn(params, potential, tuple(norm_pairs), weight)
    records = []
    for path in sorted((rundir / "snapshots").glob("snapshot_t*.bin")):
        with open(path, "rb") as fh:
            _, t, fields = spectral.read_snapshot(fh)
        records.append(record_fn(SystemState(t, fields)))
    records.sort(key=lambda r: r.t)
    write_csv(rundir / "replay.csv", records, diag["norm_labels"])
    print(f"completed: {rundir / 'replay.csv'}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="hfc4",
        description="Fourth-order coupled Choquard/Hartree-Fock simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, needs_out=True, rundir=False):
        p = sub.add_parser(name)
        if rundir:
            p.add_argument("rundir", help="existing run directory")
        else:
            p.add_argument("config", help="INI config path")
        if needs_out:
            p.add_argument("-o", "--outdir", default="runs/out",
                           help="output directory")
        p.set_defaults(fn=fn)

    add("validate", cmd_validate, needs_out=False)
    add("simulate", cmd_simulate)
    add("decay-experiment", cmd_decay)
    add("scattering-experiment", cmd_scattering)
    add("check-identities", cmd_check_identities, needs_out=False)
    add("replay", cmd_replay, needs_out=False, rundir=True)
    return ap


def run(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        logger.error("config: %s", exc)
        return EXIT_VALIDATION
    except (ValueError,) as exc:
        logger.error("validation: %s", exc)
        return EXIT_VALIDATION
    except DriftGuardError as exc:
        logger.error("drift guard: %s", exc)
        return EXIT_DRIFT
    except BudgetError as exc:
        logger.error("budget: %s", exc)
        return EXIT_BUDGET


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
