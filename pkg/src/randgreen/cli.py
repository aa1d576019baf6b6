"""Command-line experiment driver.

Each subcommand computes its outputs in memory, stages them in a temporary
directory together with ``manifest.json`` and commits them into ``--out``
only on success.  Exit codes: 0 success, 2 configuration error, 3
computational error, 4 acceptance failure (``verify``).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import shutil
import sys
import tempfile
import time
import warnings
from pathlib import Path
from typing import Callable, Dict, Optional

import numpy as np

from . import __version__, green, measure, stats, transfer
from .config import _SCHEMA, COMMANDS, ExperimentConfig, load_config, parse_point
from .ensemble import MapSequence, derive_seed, tail_distance_check
from .errors import ConfigError, RandGreenError
from .proj import MIN_NORM_SAFETY
from .parallel import default_workers

log = logging.getLogger("randgreen")

EXIT_OK, EXIT_CONFIG, EXIT_COMPUTE, EXIT_VERIFY = 0, 2, 3, 4
SEQ_SEED = 21
DELTA_PROXY_NOTE = ("distance to the degenerate locus is measured by |Res|^(1/2d) of the "
                    "unit-norm coefficients; sphere-norm minima are scaled by "
                    f"{MIN_NORM_SAFETY} before use in certified bounds")


def _json(obj) -> str:
    def default(o):
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.floating):
            return float(o)
        if isinstance(o, np.bool_):
            return bool(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, complex):
            return [o.real, o.imag]
        raise TypeError(f"not serializable: {type(o)}")

    def clean(x):
        if isinstance(x, float) and not math.isfinite(x):
            return None if math.isnan(x) else ("inf" if x > 0 else "-inf")
        if isinstance(x, dict):
            return {str(k): clean(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [clean(v) for v in x]
        return x

    return json.dumps(clean(obj), indent=2, sort_keys=True, default=default) + "\n"


def _sequence(cfg: ExperimentConfig) -> MapSequence:
    sec = cfg.section("sequence")
    seed = sec.get("seed")
    if seed is None:
        seed = derive_seed(cfg.seed, SEQ_SEED)
    return MapSequence(cfg.ensemble(), int(seed))


def _params(cfg: ExperimentConfig, command: str) -> dict:
    out = {k: v[1] for k, v in _SCHEMA[command].items()}
    out.update(cfg.section(command))
    return out


def _header(cfg, command):
    return {"command": command, "config_hash": cfg.hash, "seed": cfg.seed,
            "ensemble": cfg.ensemble().describe(), "version": __version__}


# ----------------------------------------------------------------------------
# subcommands: each returns {relative path: text}
# ----------------------------------------------------------------------------

def cmd_green_eval(cfg, workers):
    p = _params(cfg, "green-eval")
    s = _sequence(cfg)
    rows = []
    for text in p["points"]:
        z = parse_point(text)
        est = green.green_function(s, z, p["n"], p["lift"])
        res = green.invariance_residual(s, z, p["n"], p["lift"])
        rows.append({"point": text, "value": est.value, "truncation_bound": est.truncation_bound,
                     "invariance_residual": res})
    return {"green.json": _json({**_header(cfg, "green-eval"), "n": p["n"], "lift": p["lift"],
                                 "points": rows})}


def cmd_potential_grid(cfg, workers):
    p = _params(cfg, "potential-grid")
    s = _sequence(cfg)
    h = p["half_width"]
    g = green.potential_grid(s, p["chart"], p["resolution"], p["n"], (-h, h, -h, h), p["lift"])
    summary = {**_header(cfg, "potential-grid"), "chart": g.chart, "resolution": g.resolution,
               "extent": list(g.extent), "n": g.n_used, "truncation_bound": g.truncation_bound,
               "min": float(g.values.min()), "max": float(g.values.max())}
    return {f"potential_{g.chart}.txt": g.to_text(), "potential.json": _json(summary)}


def cmd_measure_sample(cfg, workers):
    p = _params(cfg, "measure-sample")
    s = _sequence(cfg)
    a = parse_point(p["start"]) if p["start"] else None
    m = measure.backward_sample_fiber(s, p["depth"], a, p["count"], cfg.seed)
    panel = cfg.panel()
    summary = {**_header(cfg, "measure-sample"), "depth": p["depth"], "count": p["count"],
               "panel": {psi.name: m.integrate(psi) for psi in panel},
               "circle": stats.circle_diagnostics(m).to_dict()}
    return {"fiber.csv": m.to_csv(), "measure.json": _json(summary)}


def cmd_equidist_test(cfg, workers):
    p = _params(cfg, "equidist-test")
    s = _sequence(cfg)
    rep, _, m_fib = stats.potential_vs_fiber(s, cfg.panel(), p["resolution"], p["n"],
                                             p["samples"], p["depth"], cfg.seed, p["half_width"])
    out = {**_header(cfg, "equidist-test"), **rep.to_dict(),
           "tolerance": p["tolerance"], "passed": rep.discrepancy <= p["tolerance"],
           "circle": stats.circle_diagnostics(m_fib).to_dict()}
    return {"equidist.json": _json(out)}


def cmd_markov_sample(cfg, workers):
    p = _params(cfg, "markov-sample")
    e = cfg.ensemble()
    x0 = parse_point(p["start"]) if p["start"] else measure.PointP1.from_vec(
        measure.generic_start(cfg.seed))
    path = measure.markov_chain(e, x0, p["length"], cfg.seed)
    tail = measure.EmpiricalMeasure.uniform(path.points[min(p["burn_in"], p["length"]):])
    summary = {**_header(cfg, "markov-sample"), "length": p["length"], "burn_in": p["burn_in"],
               "panel": {psi.name: tail.integrate(psi) for psi in cfg.panel()},
               "circle": stats.circle_diagnostics(tail).to_dict()}
    return {"chain.csv": path.to_csv(), "chain.json": _json(summary)}


def cmd_stationarity_test(cfg, workers):
    p = _params(cfg, "stationarity-test")
    rep = stats.stationarity_test(cfg.ensemble(), cfg.panel(), p["chains"], p["length"],
                                  p["burn_in"], cfg.seed, samples=p["samples"], k_se=p["k_se"])
    return {"stationarity.json": _json({**_header(cfg, "stationarity-test"), **rep.to_dict()})}


def _decay_csv(rep):
    rows = ["n,norm,se,noise_floor,censored"]
    rows += [f"{n},{v!r},{s!r},{f!r},{int(c)}" for n, v, s, f, c in
             zip(rep.ns, rep.norms, rep.se, rep.noise_floor, rep.censored)]
    return "\n".join(rows) + "\n"


def cmd_decay(cfg, workers):
    p = _params(cfg, "decay")
    s = _sequence(cfg)
    psi = cfg.observable(p["observable"])
    rep = transfer.decay_norm(s, cfg.ensemble(), psi, p["n_list"], p["samples"], cfg.seed,
                              p["n_pre"], p["mode"], p["mc_samples"])
    return {"decay.json": _json({**_header(cfg, "decay"), "observable": psi.name,
                                 **rep.to_dict()}),
            "decay.csv": _decay_csv(rep)}


def cmd_gordin(cfg, workers):
    p = _params(cfg, "gordin")
    e = cfg.ensemble()
    psi = cfg.observable(p["observable"])
    nu = measure.estimate_nu(e, p["nu_chains"], p["nu_length"], p["nu_burn_in"],
                             derive_seed(cfg.seed, 7))
    rep = transfer.sigma_squared(e, psi, p["J"], nu, p["mode"], p["paths"], cfg.seed,
                                 p["tail_tol"])
    return {"gordin.json": _json({**_header(cfg, "gordin"), "observable": psi.name,
                                  **rep.to_dict()})}


def cmd_correlation(cfg, workers):
    p = _params(cfg, "correlation")
    e = cfg.ensemble()
    phi, psi = cfg.observable(p["phi"]), cfg.observable(p["psi"])
    rep = stats.correlation(e, phi, psi, p["n_list"], p["chains"], cfg.seed, p["n_pre"],
                            workers)
    return {"correlation.json": _json({**_header(cfg, "correlation"), "phi": phi.name,
                                       "psi": psi.name, **rep.to_dict()}),
            "correlation.csv": rep.to_csv()}


def _clt_outputs(cfg, command, psi, rep):
    out = {"clt.json": _json({**_header(cfg, command), "observable": psi.name, **rep.to_dict()})}
    out.update(rep.csvs())
    return out


def cmd_clt_skew(cfg, workers):
    p = _params(cfg, "clt-skew")
    psi = cfg.observable(p["observable"])
    rep = stats.skew_clt(cfg.ensemble(), psi, p["n"], p["chains"], cfg.seed, p.get("sigma2"),
                         p["J"], p["paths"], p["n_pre"], workers)
    return _clt_outputs(cfg, "clt-skew", psi, rep)


def cmd_clt_markov(cfg, workers):
    p = _params(cfg, "clt-markov")
    psi = cfg.observable(p["observable"])
    rep = stats.markov_clt(cfg.ensemble(), psi, p["n"], p["chains"], cfg.seed, p.get("sigma2"),
                           p["J"], p["paths"], p["burn_in"], workers)
    return _clt_outputs(cfg, "clt-markov", psi, rep)


def cmd_holder_probe(cfg, workers):
    p = _params(cfg, "holder-probe")
    rep = green.holder_modulus(_sequence(cfg), p["region"], p["scales"], p["pairs"], p["n"],
                               cfg.seed, p["chart"], p["lift"])
    return {"holder.json": _json({**_header(cfg, "holder-probe"), **rep.__dict__})}


def cmd_tail_check(cfg, workers):
    p = _params(cfg, "tail-check")
    rep = tail_distance_check(_sequence(cfg), p["epsilon"], p["n"])
    return {"tail.json": _json({**_header(cfg, "tail-check"), **rep.__dict__})}


HANDLERS: Dict[str, Callable] = {
    "green-eval": cmd_green_eval, "potential-grid": cmd_potential_grid,
    "measure-sample": cmd_measure_sample, "equidist-test": cmd_equidist_test,
    "markov-sample": cmd_markov_sample, "stationarity-test": cmd_stationarity_test,
    "decay": cmd_decay, "gordin": cmd_gordin, "correlation": cmd_correlation,
    "clt-skew": cmd_clt_skew, "clt-markov": cmd_clt_markov,
    "holder-probe": cmd_holder_probe, "tail-check": cmd_tail_check,
}
assert set(HANDLERS) == set(COMMANDS)


# ----------------------------------------------------------------------------
# manifest and atomic commit
# ----------------------------------------------------------------------------

def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def build_manifest(cfg, command, outputs: Dict[str, bytes], workers, wall, caught) -> dict:
    files = [{"path": k, "sha256": _sha(v), "bytes": len(v)} for k, v in sorted(outputs.items())]
    digest = _sha("\n".join(f"{f['path']}:{f['sha256']}" for f in files).encode())
    seen, warns = set(), []
    for w in caught:
        key = (w.category.__name__, str(w.message))
        if key not in seen:
            seen.add(key)
            warns.append({"category": key[0], "message": key[1]})
    return {"command": command, "config_hash": cfg.hash, "seed": cfg.seed,
            "version": __version__, "outputs": files, "digest": digest,
            "wall_clock_seconds": wall, "workers": workers, "warnings": warns,
            "notes": {"delta_proxy": DELTA_PROXY_NOTE, "min_norm_safety": MIN_NORM_SAFETY}}


def commit(out_dir: Path, outputs: Dict[str, bytes], manifest: dict):
    """Stage everything next to ``out_dir`` and move it into place; manifest last."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".stage-", dir=out_dir.parent))
    try:
        for name, data in outputs.items():
            (stage / name).parent.mkdir(parents=True, exist_ok=True)
            (stage / name).write_bytes(data)
        (stage / "manifest.json").write_text(_json(manifest))
        if not out_dir.exists():
            os.replace(stage, out_dir)
            return
        for name in list(outputs) + ["manifest.json"]:
            (out_dir / name).parent.mkdir(parents=True, exist_ok=True)
            os.replace(stage / name, out_dir / name)
    finally:
        if stage.exists():
            shutil.rmtree(stage, ignore_errors=True)


def run(command: str, cfg: ExperimentConfig, out_dir, workers: int = 1) -> dict:
    """Execute one subcommand and commit its outputs; returns the manifest."""
    handler = HANDLERS[command]
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        texts = handler(cfg, workers)
    wall = time.perf_counter() - t0
    outputs = {k: v.encode() if isinstance(v, str) else v for k, v in texts.items()}
    manifest = build_manifest(cfg, command, outputs, workers, wall, caught)
    commit(Path(out_dir), outputs, manifest)
    return manifest


def _error_record(exc, code):
    rec = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("field", "line"):
        if getattr(exc, attr, None) is not None:
            rec[attr] = getattr(exc, attr)
    report = getattr(exc, "report", None)
    if report is not None and hasattr(report, "to_dict"):
        rec["report"] = report.to_dict()
    return rec


def main(argv: Optional[list] = None) -> int:
    ap = argparse.ArgumentParser(prog="randgreen", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=list(COMMANDS) + ["verify"])
    ap.add_argument("--config", help="TOML experiment file (not needed for verify)")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    ap.add_argument("--workers", type=int, default=None,
                    help="worker processes (default: $RANDGREEN_WORKERS or 1)")
    ap.add_argument("--verbose", "-v", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    workers = args.workers if args.workers is not None else default_workers()
    if workers < 1:
        print(_json(_error_record(ConfigError("--workers must be >= 1", "workers"), 2)),
              file=sys.stderr, end="")
        return EXIT_CONFIG
    if args.command == "verify":
        from .acceptance import run_all
        results = run_all(workers=workers, log=lambda line: print(line, flush=True))
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "acceptance.json").write_text(_json(
            [{"criterion": r.number, "name": r.name, "passed": r.passed, "detail": r.detail,
              "seconds": r.seconds} for r in results]))
        return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY
    try:
        if not args.config:
            raise ConfigError("--config is required", "config")
        cfg = load_config(args.config).with_seed(args.seed)
    except ConfigError as exc:
        print(_json(_error_record(exc, EXIT_CONFIG)), file=sys.stderr, end="")
        return EXIT_CONFIG
    try:
        manifest = run(args.command, cfg, args.out, workers)
    except ConfigError as exc:
        print(_json(_error_record(exc, EXIT_CONFIG)), file=sys.stderr, end="")
        return EXIT_CONFIG
    except (RandGreenError, ArithmeticError, ValueError) as exc:
        print(_json(_error_record(exc, EXIT_COMPUTE)), file=sys.stderr, end="")
        return EXIT_COMPUTE
    log.info("wrote %d outputs to %s (digest %s)", len(manifest["outputs"]), args.out,
             manifest["digest"][:16])
    print(manifest["digest"])
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
