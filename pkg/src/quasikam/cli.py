"""Command-line runner: config in, deterministic CSV/JSON out, exit codes for CI.

Exit codes: 0 ok, 1 usage or config error, 2 small denominator, 3 hypothesis
or experiment failure.
"""

import argparse
import csv
import io
import json
import math
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from . import derivative_lab as dl
from .config import ConfigError, RunConfig, load_config
from .kam_engine import DIAGNOSTIC_COLUMNS, diagnostics_rows, run_induction
from .lattice_algebra import dump_csv
from .spectral_lab import (LocalizationFailure, OracleCapExceeded, center_bijection,
                           decay_profile, exact_diagonalize, kam_vs_exact, minami_mc,
                           minami_sweep, spacing_mc, wegner_sweep)
from .torus_model import derive_seed

EXIT_OK, EXIT_USAGE, EXIT_SMALL_DENOMINATOR, EXIT_FAILURE = 0, 1, 2, 3


def _plain(obj):
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats spelled out."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


class Output:
    """Single owner of everything written under the output directory."""

    def __init__(self, out_dir: str, cfg: RunConfig, command: str):
        self.dir = out_dir
        self.cfg = cfg
        self.command = command
        os.makedirs(out_dir, exist_ok=True)

    def _header(self) -> List[str]:
        echo = json.dumps(self.cfg.data, sort_keys=True, separators=(",", ":"))
        return [f"# command={self.command} version={__version__} config_hash={self.cfg.hash}",
                f"# config={echo}"]

    def csv(self, name: str, columns: Sequence[str], rows: Sequence[Dict[str, Any]]) -> str:
        buf = io.StringIO()
        buf.write("\n".join(self._header()) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c, "")) for c in columns])
        return self._write(name, buf.getvalue())

    def json(self, name: str, passed: bool, metrics: Dict[str, Any]) -> str:
        doc = {"config_hash": self.cfg.hash, "command": self.command, "pass": bool(passed),
               "metrics": _plain(metrics), "version": __version__, "config": self.cfg.data}
        return self._write(name, json.dumps(doc, sort_keys=True, indent=2) + "\n")

    def _write(self, name: str, text: str) -> str:
        path = os.path.join(self.dir, name)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        return path


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def resolve_seed(cfg: RunConfig, verify: bool = True):
    """Run the induction, resampling theta after a small denominator.

    Attempt 0 uses the master seed, attempt a > 0 the child seed
    derive_seed(master, "resample", a).  Returns (config for the accepted
    seed, result, attempt log).
    """
    sch = cfg.section("schedule")
    master = cfg.model.master_seed
    log = []
    for a in range(sch["max_resamples"] + 1):
        seed = master if a == 0 else derive_seed(master, "resample", a)
        model = cfg.model.with_seed(seed)
        res = run_induction(model.hamiltonian(), cfg.schedule, stop_tol=sch["stop_tol"],
                            verify=verify)
        entry = {"attempt": a, "seed": seed, "status": res.status}
        if res.status == "small_denominator":
            entry["small_denominator"] = res.error.to_dict()
        log.append(entry)
        if res.status != "small_denominator":
            break
    return model, res, log


def cmd_run_kam(cfg: RunConfig, out: Output, dump: bool = False, workers: int = 1) -> int:
    model, res, log = resolve_seed(cfg)
    rows = diagnostics_rows(res)
    out.csv("kam_steps.csv", DIAGNOSTIC_COLUMNS, rows)
    require = cfg.section("schedule")["require"]
    hyp_ok = res.hypotheses_ok(require)
    metrics = {"status": res.status, "steps": res.final.j, "seed": model.master_seed,
               "attempts": log, "psi_norms": res.psi_norms(), "require": require,
               "hypotheses_ok": hyp_ok, "reports": [r.to_dict() for r in res.reports]}
    if res.error is not None:
        metrics["error"] = str(res.error)
    if dump:
        mdir = os.path.join(out.dir, "matrices")
        os.makedirs(mdir, exist_ok=True)
        dump_csv(res.states[0].H, os.path.join(mdir, "H.csv"))
        for s in res.states:
            dump_csv(s.U, os.path.join(mdir, f"U_{s.j}.csv"))
            dump_csv(s.Psi, os.path.join(mdir, f"Psi_{s.j}.csv"))
    passed = res.converged and hyp_ok
    out.json("kam_report.json", passed, metrics)
    if res.status == "small_denominator":
        return EXIT_SMALL_DENOMINATOR
    return EXIT_OK if passed else EXIT_FAILURE


def cmd_verify_theorem1(cfg: RunConfig, out: Output, workers: int = 1) -> int:
    model, res, log = resolve_seed(cfg, verify=False)
    ora = cfg.section("oracle")
    H = model.hamiltonian()
    es = exact_diagonalize(H, cap=ora["cap"])
    hnorm = float(np.max(np.abs(H.data).sum(axis=0)))
    resid = float(es.residuals(H).max())
    ortho = es.orthonormality_error()
    claims = {"A": {"max_residual": resid, "orthonormality": ortho,
                    "pass": resid <= 1e-9 * max(hnorm, 1.0) and ortho <= 1e-10}}
    metrics = {"seed": model.master_seed, "attempts": log, "claims": claims}
    rows = []
    try:
        cmap = center_bijection(es)
    except LocalizationFailure as exc:
        claims["B"] = {"pass": False, "error": f"{type(exc).__name__}: {exc}"}
        claims["C"] = {"pass": False, "error": "no centre bijection"}
        cmap = None
    if cmap is not None:
        prof = decay_profile(es, cmap)
        need = ora["rate_fraction"] * cfg.schedule.m
        min_peak = float(cmap.peak_mass.min())
        claims["B"] = {"min_peak_mass": min_peak, "pass": min_peak > 0.5}
        claims["C"] = {"min_rate": prof.min_rate, "required": need,
                       "max_envelope_violation": prof.max_violation,
                       "pass": bool(np.isnan(prof.min_rate) or prof.min_rate >= need)}
        for i, k in enumerate(cmap.eig_of_site.tolist()):
            rows.append({"site": " ".join(map(str, model.region.site(i))), "eig_index": k,
                         "eigenvalue": float(es.eigenvalues[k]),
                         "peak_mass": float(cmap.peak_mass[i]),
                         "rate": float(prof.rates[i]), "violation": float(prof.violations[i])})
    t = ora["shift_t"]
    es_t = exact_diagonalize(H.shifted(t), cap=ora["cap"])
    cov = {"t": t, "max_error": float(np.max(np.abs(es_t.eigenvalues - es.eigenvalues - t))),
           "vectors_bitwise": bool(np.array_equal(es.eigenvectors, es_t.eigenvectors))}
    cov["pass"] = cov["max_error"] <= 1e-12 and cov["vectors_bitwise"]
    claims["covariance"] = cov
    if res.converged:
        cmp = kam_vs_exact(res.final, es)
        metrics["kam"] = {"steps": res.final.j, "max_error": cmp.max_error,
                          "min_overlap": cmp.min_overlap, "bound_ok": bool(cmp.bound_ok.all()),
                          "pass": bool(cmp.bound_ok.all()) and cmp.min_overlap >= 1 - 1e-6}
    else:
        metrics["kam"] = {"status": res.status, "pass": False}
    out.csv("centers.csv", ["site", "eig_index", "eigenvalue", "peak_mass", "rate", "violation"],
            rows)
    passed = all(c["pass"] for c in claims.values())
    out.json("theorem1.json", passed, metrics)
    return EXIT_OK if passed else EXIT_FAILURE


def cmd_spacing(cfg: RunConfig, out: Output, workers: int = 1) -> int:
    sp = cfg.section("spacing")
    d0 = cfg.schedule.delta[0]
    grid = [0.0] + [f * d0 for f in sp["s_factors"]]
    res = spacing_mc(cfg.model, grid, sp["trials"], L=sp["L"], workers=workers)
    rows = [{"s": s, **e.to_dict()} for s, e in zip(res.s_grid, res.estimates)]
    out.csv("spacing.csv", ["s", "trials", "successes", "p_hat", "stderr"], rows)
    p0 = res.estimates[0].p_hat
    passed = bool(res.r2 >= sp["min_r2"]) and p0 == 0.0
    out.json("spacing.json", passed, {"delta_0": d0, "p_hat_0": p0, **res.to_dict()})
    return EXIT_OK if passed else EXIT_FAILURE


def cmd_wegner(cfg: RunConfig, out: Output, workers: int = 1) -> int:
    we = cfg.section("wegner")
    center = we["center"]
    if center is None:
        center = float(np.mean(cfg.model.potential()))
    widths = we["widths"] or [0.0125, 0.025, 0.05, 0.1]
    sites = None if we["sites"] is None else [tuple(s) for s in we["sites"]]
    res = wegner_sweep(cfg.model, center, widths, we["trials"], sites, workers)
    rows = [{"width": w, "lo": r.interval[0], "hi": r.interval[1], "trials": r.trials,
             "mean_count": r.mean_count, "count_stderr": r.count_stderr,
             "p_any": r.any_level.p_hat, "p_any_stderr": r.any_level.stderr,
             "double_rate": r.double_rate, "failures": r.failures}
            for w, r in zip(widths, res)]
    out.csv("wegner.csv", list(rows[0]), rows)
    x = np.array(widths)
    y = np.array([r.mean_count for r in res])
    density = float(np.dot(x, y) / np.dot(x, x))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - density * x) ** 2)) / ss_tot if ss_tot > 0 else math.nan
    passed = bool(r2 >= we["min_r2"])
    out.json("wegner.json", passed, {"center": center, "density": density, "r2": r2,
                                     "results": [r.to_dict() for r in res]})
    return EXIT_OK if passed else EXIT_FAILURE


def cmd_minami(cfg: RunConfig, out: Output, workers: int = 1) -> int:
    mi = cfg.section("minami")
    sites = [tuple(s) for s in mi["sites"]]
    if mi["intervals"] is not None:
        iv = [tuple(v) for v in mi["intervals"]]
        if len(iv) != len(sites) or any(len(v) != 2 for v in iv):
            raise ConfigError("minami.intervals: need one [lo, hi] pair per site")
        res = minami_mc(cfg.model, sites, iv, mi["trials"], workers)
        rate = res.failures / res.trials
        rows = [{"cell": 0, **res.estimate.to_dict(), "failures": res.failures}]
        out.csv("minami.csv", ["cell", "trials", "successes", "p_hat", "stderr", "failures"], rows)
        passed = rate < mi["max_failure_rate"]
        out.json("minami.json", passed, {"intervals": iv, "failure_rate": rate,
                                         **res.estimate.to_dict()})
        return EXIT_OK if passed else EXIT_FAILURE
    centers = tuple(mi["centers"]) if mi["centers"] else None
    widths = tuple(mi["base_widths"]) if mi["base_widths"] else None
    try:
        sw = minami_sweep(cfg.model, sites, mi["trials"], mi["ratios"], centers, widths,
                          pilot=mi["pilot"], workers=workers)
    except LocalizationFailure as exc:
        out.csv("minami.csv", ["rho1", "rho2", "trials", "successes", "p_hat", "stderr", "pass"], [])
        out.json("minami.json", False, {"error": str(exc)})
        return EXIT_FAILURE
    rows = [{"rho1": r1, "rho2": r2, **e.to_dict(), "pass": ok}
            for (r1, r2, e), ok in zip(sw.cells, sw.cell_pass)]
    out.csv("minami.csv", ["rho1", "rho2", "trials", "successes", "p_hat", "stderr", "pass"], rows)
    # Cells with zero expected counts agree with any model; require the design's power target.
    passed = (sw.target_met and sw.passed_cells >= mi["min_cells"]
              and sw.failure_rate < mi["max_failure_rate"])
    out.json("minami.json", passed, sw.to_dict())
    return EXIT_OK if passed else EXIT_FAILURE


_DERIV_COLUMNS = ["probe", "quantity", "step", "h", "estimate", "bound", "margin", "pass"]


def _row(probe, quantity, estimate, bound, passed, step="", h=""):
    margin = bound - estimate if isinstance(bound, float) and isinstance(estimate, float) else ""
    return {"probe": probe, "quantity": quantity, "step": step, "h": h, "estimate": estimate,
            "bound": bound, "margin": margin, "pass": passed}


def _fd_block(model, sch, d):
    z = tuple(d["z"])
    rows, info = [], {}
    nb = (z[0] + 1,) + z[1:]
    for x in (z, nb):
        if not model.region.contains(x):
            continue
        rep = dl.fd_derivative(model, sch, "lam", x, dl.Perturbation(0.0, site=z), h=d["h"])
        err = abs(rep.richardson - rep.predicted)
        rows.append(_row("fd", f"lam0 x={list(x)}", rep.richardson, rep.predicted, err <= 1e-9,
                         0, rep.h))
        info[f"lam0 {list(x)}"] = rep.to_dict()
    rep = dl.fd_derivative(model, sch, "lam_exact", z, dl.Perturbation(0.0, site=z), h=d["h"])
    rows.append(_row("fd", "hellmann_feynman", rep.richardson, rep.predicted,
                     rep.discrepancy <= 1e-6, "", rep.h))
    info["hellmann_feynman"] = rep.to_dict()
    return rows, info


def _lemma_block(name, rep):
    rows = [_row(name, "hypothesis_ball_gap", rep.hypothesis_ball, rep.threshold,
                 rep.hypothesis_ball_ok),
            _row(name, "hypothesis_support_gap", rep.hypothesis_support, rep.threshold,
                 rep.hypothesis_support_ok)]
    rows += [_row(name, r.quantity, r.measured, r.bound, r.passed, r.step) for r in rep.rows]
    if rep.status == "run_failed":
        rows.append(_row(name, "run", rep.detail, "", False))
    return rows, rep.to_dict(), rep.passed


def cmd_derivatives(cfg: RunConfig, out: Output, workers: int = 1) -> int:
    model, res, log = resolve_seed(cfg, verify=False)
    d = cfg.section("derivatives")
    sch = cfg.schedule
    metrics: Dict[str, Any] = {"seed": model.master_seed, "attempts": log, "blocks": {}}
    rows: List[dict] = []
    if res.status == "small_denominator":
        rows.append(_row("base", "run", res.status, "", False))
        out.csv("derivatives.csv", _DERIV_COLUMNS, rows)
        out.json("derivatives.json", False, metrics)
        return EXIT_SMALL_DENOMINATOR
    z = tuple(d["z"])
    blocks = {
        "fd": lambda: _fd_block(model, sch, d) + (None,),
        "base_lemma": lambda: _lemma_block(
            "base_lemma", dl.check_base_lemma(model, sch, z, d["h"], d["safety"])),
        "induction_lemma": lambda: _lemma_block(
            "induction_lemma", dl.check_induction_lemma(model, sch, d["J"], z, d["h"], d["safety"])),
        "remote_decay": lambda: _remote(dl.check_remote_decay(model, sch, d["x_grid"], z, d["h"],
                                                              d["safety"])),
        "covariance": lambda: _simple("covariance", dl.check_covariance_shift(
            model, sch, cfg.section("oracle")["shift_t"],
            stop_tol=cfg.section("schedule")["stop_tol"])),
        "stochastic_support": lambda: _simple("stochastic_support", dl.check_stochastic_support(
            model, sch, d["support_step"], tuple(d["support_site"]))),
        "jacobian": lambda: _jacobian(dl.eigen_map_jacobian(
            model, sch, [tuple(s) for s in d["jacobian_sites"]], d["jacobian_h_factor"])),
        "covering": lambda: _simple("covering", dl.check_inverse_map_covering(
            model, sch, [tuple(s) for s in d["jacobian_sites"]], d["covering_scale"],
            d["covering_grid"])),
        "higher": lambda: _higher(model, sch, d),
    }
    all_ok = True
    for name, fn in blocks.items():
        if not d[name]:
            rows.append(_row(name, "skipped", "", "", ""))
            metrics["blocks"][name] = "skipped"
            continue
        try:
            brow, info, ok = fn()
        except (dl.FdProbeFailed, dl.CubeSeparationError, dl.NoExteriorCoefficient,
                LocalizationFailure) as exc:
            brow, info, ok = [_row(name, "error", f"{type(exc).__name__}: {exc}", "", False)], \
                {"error": str(exc)}, False
        if ok is None:
            ok = all(r["pass"] for r in brow)
        rows += brow
        metrics["blocks"][name] = {"pass": ok, "report": info}
        all_ok &= bool(ok)
    out.csv("derivatives.csv", _DERIV_COLUMNS, rows)
    out.json("derivatives.json", all_ok, metrics)
    return EXIT_OK if all_ok else EXIT_FAILURE


def _simple(name, rep):
    info = rep.to_dict()
    return [_row(name, "all", "", "", rep.passed)], info, rep.passed


def _remote(rep):
    rows = []
    for r in rep.rows:
        ok_l = r["lam_pass"] or r["vacuous"]
        ok_p = r["phi_pass"] or r["vacuous"]
        rows.append(_row("remote_decay", f"lam |x|={r['distance']}", r["lam"], r["lam_bound"], ok_l))
        rows.append(_row("remote_decay", f"phi |x|={r['distance']}", r["phi"], r["phi_bound"], ok_p))
    for zr in rep.zero_zone:
        rows.append(_row("remote_decay", f"zero_zone r>{zr['radius']}", float(zr["nonzero"]), 0.0,
                         zr["nonzero"] == 0, zr["step"]))
    return rows, rep.to_dict(), rep.passed


def _jacobian(rep):
    rows = [_row("jacobian", "norm_J_minus_I", rep.deviation, 0.25, rep.passed, rep.steps, rep.h),
            _row("jacobian", "max_offdiag", rep.max_offdiag, rep.offdiag_bound,
                 rep.max_offdiag <= rep.offdiag_bound, rep.steps, rep.h)]
    return rows, rep.to_dict(), rep.passed


def _higher(model, sch, d):
    rows, info = [], {}
    for r in d["higher_orders"]:
        rep = dl.check_higher_derivatives(model, sch, r, tuple(d["z"]))
        est = rep.richardson[-1] if rep.richardson else rep.detail
        rows.append(_row("higher", f"order {r}", est, "", rep.stable, rep.step, rep.hs[0]))
        info[str(r)] = rep.to_dict()
    return rows, info, all(r["pass"] for r in rows)


COMMANDS = {
    "run-kam": cmd_run_kam,
    "verify-theorem1": cmd_verify_theorem1,
    "spacing": cmd_spacing,
    "wegner": cmd_wegner,
    "minami": cmd_minami,
    "derivatives": cmd_derivatives,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="quasikam", description="KAM diagonalization and spectral experiments "
                "for quasi-periodic lattice operators.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML config (defaults throughout when omitted)")
        s.add_argument("--out", default="out", help="output directory")
        s.add_argument("--seed", type=int, help="override hull.master_seed")
        s.add_argument("--threads", type=int, default=1, help="worker threads for Monte Carlo")
        if name == "run-kam":
            s.add_argument("--dump-matrices", action="store_true",
                           help="write H, U^j and Psi^j as CSV")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("quasikam: error: --threads must be positive", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config, args.seed)
        out = Output(args.out, cfg, args.command)
        fn = COMMANDS[args.command]
        if args.command == "run-kam":
            return fn(cfg, out, dump=args.dump_matrices, workers=args.threads)
        return fn(cfg, out, workers=args.threads)
    except (ConfigError, OracleCapExceeded, OSError) as exc:
        print(f"quasikam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
