"""Batch runner: ``monospde run|validate|list-builtins``.

Configs are INI files. Sections ``operator``, ``graph``, ``potential``,
``noise``, ``scheme``, ``study`` and ``output`` hold the shared settings;
``[study:KIND]`` sections override keys for one study kind. Every key is
validated and every default is echoed into the resolved manifest.
"""

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone

import numpy as np

from monospde import analysis
from monospde.integrator import (
    MultiplicativeNoise,
    NonContractionError,
    OverflowAbort,
    PicardDivergence,
    SegmentLimitError,
    extend_solution,
    solve_limit,
    solve_regularized,
)
from monospde.monotone import LIBRARY, ProxFailure, builtin_graph, builtin_potential, graph_names
from monospde.monotone import sine_modulation
from monospde.noise import MarkLaw, SemimartingaleSpec, sample_path, uniform_grid
from monospde.operators import build_laplacian_1d, laplacian_eigenpairs

log = logging.getLogger("monospde")

OUTPUT_ROOT_ENV = "MONOSPDE_OUTPUT_ROOT"
NUMERICAL_ERRORS = (ProxFailure, NonContractionError, PicardDivergence, SegmentLimitError,
                    OverflowAbort, FloatingPointError)

EXIT_OK, EXIT_CHECKS, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# schema

def _choice(*options):
    def check(v):
        if v not in options:
            raise ValueError(f"must be one of {', '.join(map(str, options))}")
    return check


def _positive(v):
    if not v > 0:
        raise ValueError("must be positive")


def _nonneg(v):
    if v < 0:
        raise ValueError("must be nonnegative")


def _at_least(lo):
    def check(v):
        if v < lo:
            raise ValueError(f"must be >= {lo}")
    return check


def _open_unit(v):
    if not 0 < v < 1:
        raise ValueError("must lie in (0, 1)")


def _unit_interval(v):
    if not 0 <= v < 1:
        raise ValueError("must lie in [0, 1)")


def _float_list(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("not a boolean")


# key -> (parser, default, check)
SCHEMA = {
    "operator": {
        "n": (int, 16, _at_least(2)),
        "length": (float, 1.0, _positive),
        "m": (int, 2, _at_least(1)),
    },
    "graph": {
        "name": (str, "exponential", None),
        "p": (float, None, _at_least(1.0)),
        "modulation_amplitude": (float, 0.0, _unit_interval),
        "modulation_frequency": (float, 1.0, _positive),
        "modulation_seed": (int, 0, _nonneg),
    },
    "potential": {
        "name": (str, "same", None),
    },
    "noise": {
        "k_dim": (int, 2, _at_least(1)),
        "variance": (float, 1.0, _nonneg),
        "jump_rate": (float, 0.0, _nonneg),
        "mark_law": (str, "normal", _choice("constant", "normal", "symmetric")),
        "mark_loc": (float, 0.0, None),
        "mark_scale": (float, 1.0, _nonneg),
        "drift": (float, 0.0, None),
        "coefficient": (str, "low-modes", _choice("low-modes", "random", "identity", "zero")),
        "coefficient_scale": (float, 1.0, None),
        "coefficient_seed": (int, 0, _nonneg),
    },
    "scheme": {
        "kind": (str, "limit", _choice("limit", "regularized", "multiplicative")),
        "lam": (float, 1e-3, _positive),
        "drift": (str, "implicit", _choice("implicit", "explicit")),
        "T": (float, 1.0, _positive),
        "steps": (int, 1024, _at_least(1)),
        "alpha": (float, 0.25, _open_unit),
        "max_picard": (int, 25, _at_least(1)),
        "tol": (float, 1e-10, _positive),
        "strength": (float, 0.1, None),
        "initial": (str, "heat", _choice("heat", "zero", "constant")),
        "initial_scale": (float, 1.0, None),
    },
    "study": {
        "kinds": (lambda s: [t.strip() for t in s.split(",") if t.strip()], ["solution"], None),
        "n_paths": (int, None, _at_least(1)),
        "seed_base": (int, 0, _nonneg),
    },
    "output": {
        "directory": (str, "artifacts", None),
        "verbosity": (int, 1, _choice(0, 1, 2)),
        "workers": (int, None, _at_least(1)),
    },
}

STUDY_KEYS = {
    "solution": {},
    "heat": {"factor": (float, 5.0, _positive)},
    "mp_audit": {},
    "residual": {
        "levels": (int, 3, _at_least(2)),
        "band_low": (float, 1.6, _positive),
        "band_high": (float, 2.4, _positive),
        "check_band": (_bool, True, None),
    },
    "apriori": {"kappa": (float, 64.0, _positive), "quota": (float, 0.99, _positive)},
    "lambda": {"lambdas": (_float_list, [1e-1, 1e-2, 1e-3, 1e-4], None)},
    "dependence_x0": {"deltas": (_float_list, [1e-1, 1e-2, 1e-3], None),
                      "spread_max": (float, 4.0, _positive)},
    "dependence_G": {"deltas": (_float_list, [1e-1, 1e-2, 1e-3], None),
                     "spread_max": (float, 4.0, _positive)},
    "picard": {},
    "gronwall": {"pairs": (int, 1000, _at_least(1)), "gronwall_steps": (int, 64, _at_least(2)),
                 "q_low": (float, 1.0, _nonneg), "q_high": (float, 6.0, _positive)},
    "ui": {"eps": (float, 0.1, _positive), "lam": (float, 1e-3, _positive),
           "bound": (float, None, _nonneg)},
}

DEFAULT_PATHS = {"solution": 1, "heat": 1, "mp_audit": 10_000, "residual": 50, "apriori": 1000,
                 "lambda": 20, "dependence_x0": 200, "dependence_G": 200, "picard": 3,
                 "gronwall": 200, "ui": 50}


def _parse_section(block, raw, schema):
    out = {}
    for key, text in raw.items():
        if key not in schema:
            raise ConfigError(f"{block} block: unknown key '{key}'")
        parser, _, check = schema[key]
        try:
            value = parser(text)
            if check is not None:
                check(value)
        except ValueError as exc:
            raise ConfigError(f"{block} block: bad value for '{key}' ({text!r}): {exc}") from None
        out[key] = value
    for key, (_, default, _) in schema.items():
        out.setdefault(key, default)
    return out


def parse_config(text: str) -> dict:
    """Parse and validate INI text into a fully resolved config dict."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    cfg = {}
    for block, schema in SCHEMA.items():
        raw = dict(cp[block]) if cp.has_section(block) else {}
        cfg[block] = _parse_section(block, raw, schema)
    for section in cp.sections():
        if section in SCHEMA:
            continue
        if not section.startswith("study:"):
            raise ConfigError(f"unknown block '{section}'")
        if section[6:] not in STUDY_KEYS:
            raise ConfigError(f"{section} block: unknown study kind")

    g = cfg["graph"]
    if g["name"] not in graph_names():
        raise ConfigError(f"graph block: unknown name '{g['name']}'")
    if g["name"] == "power":
        if g["p"] is None:
            raise ConfigError("graph block: power graph needs 'p'")
    elif g["p"] is not None:
        raise ConfigError("graph block: 'p' only applies to the power graph")
    pot = cfg["potential"]
    if pot["name"] == "same":
        pot["name"] = g["name"]
    if pot["name"] != g["name"]:
        raise ConfigError("potential block: name must match the graph")

    n, k = cfg["operator"]["n"], cfg["noise"]["k_dim"]
    if cfg["noise"]["coefficient"] == "low-modes" and k > n:
        raise ConfigError("noise block: low-modes coefficient needs k_dim <= operator n")
    if cfg["noise"]["coefficient"] == "identity" and k != n:
        raise ConfigError("noise block: identity coefficient needs k_dim == operator n")
    if cfg["scheme"]["kind"] == "multiplicative" and k != n:
        raise ConfigError("noise block: multiplicative scheme needs k_dim == operator n")

    kinds = cfg["study"]["kinds"]
    for kind in kinds:
        if kind not in STUDY_KEYS:
            raise ConfigError(f"study block: unknown study kind '{kind}'")
    common = {"n_paths": SCHEMA["study"]["n_paths"], "seed_base": SCHEMA["study"]["seed_base"]}
    studies = {}
    for kind in kinds:
        section = f"study:{kind}"
        raw = dict(cp[section]) if cp.has_section(section) else {}
        merged = _parse_section(section, raw, {**common, **STUDY_KEYS[kind]})
        if "n_paths" not in raw:
            merged["n_paths"] = cfg["study"]["n_paths"] or DEFAULT_PATHS[kind]
        if "seed_base" not in raw:
            merged["seed_base"] = cfg["study"]["seed_base"]
        studies[kind] = merged
    if "residual" in studies:
        levels = studies["residual"]["levels"]
        if cfg["scheme"]["steps"] % 2 ** (levels - 1):
            raise ConfigError("study:residual block: steps must be divisible by 2^(levels-1)")
    cfg["studies"] = studies
    if cfg["output"]["workers"] is None:
        cfg["output"]["workers"] = os.cpu_count() or 1
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text)


# --------------------------------------------------------------------------
# wiring

def build_graph(cfg):
    g = cfg["graph"]
    params = {"p": g["p"]} if g["name"] == "power" else {}
    graph = builtin_graph(g["name"], **params)
    if g["modulation_amplitude"] > 0:
        graph = graph.with_modulation(sine_modulation(
            g["modulation_seed"], g["modulation_amplitude"], g["modulation_frequency"]))
    return graph


def build_spec(cfg):
    nz = cfg["noise"]
    k = nz["k_dim"]
    return SemimartingaleSpec(
        k_dim=k,
        wiener_cov=nz["variance"] * np.eye(k),
        jump_rate=nz["jump_rate"],
        marks=MarkLaw(nz["mark_law"], (nz["mark_loc"],) * k, nz["mark_scale"]),
        drift=np.full(k, nz["drift"]),
    )


def build_coefficient(cfg, A):
    nz = cfg["noise"]
    n, k, s = A.dim, nz["k_dim"], nz["coefficient_scale"]
    kind = nz["coefficient"]
    if kind == "zero":
        return np.zeros((n, k))
    if kind == "identity":
        return s * np.eye(n)
    if kind == "random":
        return s * np.random.default_rng(nz["coefficient_seed"]).standard_normal((n, k))
    _, vecs = laplacian_eigenpairs(n, A.length)
    return s * vecs[:, :k] / np.sqrt(A.h)


def build_initial(cfg, A):
    sc = cfg["scheme"]
    if sc["initial"] == "zero":
        return np.zeros(A.dim)
    if sc["initial"] == "constant":
        return np.full(A.dim, sc["initial_scale"])
    return sc["initial_scale"] * analysis.heat_x0(A)


def _solution_study(cfg, opts):
    A = build_laplacian_1d(cfg["operator"]["n"], cfg["operator"]["length"])
    g = build_graph(cfg)
    sc = cfg["scheme"]
    spec = build_spec(cfg)
    seed = opts["seed_base"]
    Z = sample_path(spec, uniform_grid(sc["T"], sc["steps"]), seed)
    x0 = build_initial(cfg, A)
    if sc["kind"] == "multiplicative":
        noise = MultiplicativeNoise.sine_diagonal(sc["strength"])
        sol = extend_solution(A, g, noise, Z, x0, sc["alpha"], sc["max_picard"], sc["tol"])
    else:
        G = build_coefficient(cfg, A)
        if sc["kind"] == "limit":
            sol = solve_limit(A, g, G, Z, x0)
        else:
            sol = solve_regularized(A, g, sc["lam"], G, Z, x0, drift=sc["drift"])
    rep = analysis.StudyReport("solution", steps=sc["steps"], seed_base=seed)
    sup, va, xe = analysis.apriori_monitor(sol)
    rep.add("sup_norm_sq", sup)
    rep.add("v_energy", va)
    rep.add("xi_energy", xe)
    rep.passed = bool(xe >= -1e-9)
    rep.details = {**sol.manifest(), "seed": seed, "alpha": sc["alpha"]}
    return rep, sol


def _common(cfg):
    A = build_laplacian_1d(cfg["operator"]["n"], cfg["operator"]["length"])
    return A, build_graph(cfg), build_coefficient(cfg, A), build_spec(cfg), build_initial(cfg, A)


def run_study(kind, cfg):
    """Execute one study; returns ``(report, solution_or_None)``."""
    opts = cfg["studies"][kind]
    sc = cfg["scheme"]
    n_paths, seed = opts["n_paths"], opts["seed_base"]
    if kind == "solution":
        return _solution_study(cfg, opts)
    if kind == "heat":
        return analysis.heat_study(cfg["operator"]["n"], sc["T"], sc["steps"], seed,
                                   opts["factor"]), None
    if kind == "mp_audit":
        return analysis.mp_audit_study(n_paths, seed, sc["steps"], sc["T"]), None
    if kind == "gronwall":
        return analysis.gronwall_study(opts["pairs"], n_paths, opts["gronwall_steps"], seed,
                                       (opts["q_low"], opts["q_high"])), None
    A, g, G, spec, x0 = _common(cfg)
    if kind == "residual":
        band = (opts["band_low"], opts["band_high"]) if opts["check_band"] else None
        return analysis.residual_study(A, g, G, spec, x0, n_paths=n_paths, seed_base=seed,
                                       T=sc["T"], finest=sc["steps"], levels=opts["levels"],
                                       band=band), None
    if kind == "apriori":
        return analysis.apriori_study(A, g, G, spec, x0, kappa=opts["kappa"], n_paths=n_paths,
                                      seed_base=seed, T=sc["T"], steps=sc["steps"],
                                      quota=opts["quota"]), None
    if kind == "lambda":
        return analysis.lambda_study(A, g, G, spec, x0, tuple(opts["lambdas"]), n_paths=n_paths,
                                     seed_base=seed, T=sc["T"], steps=sc["steps"]), None
    if kind in ("dependence_x0", "dependence_G"):
        return analysis.dependence_study(A, g, G, spec, x0, tuple(opts["deltas"]),
                                         mode=kind.split("_")[1], n_paths=n_paths,
                                         seed_base=seed, T=sc["T"], steps=sc["steps"],
                                         spread_max=opts["spread_max"]), None
    if kind == "picard":
        return analysis.picard_study(A, g, sc["strength"], cfg["noise"]["variance"], x0,
                                     alpha=sc["alpha"], n_paths=n_paths, seed_base=seed,
                                     T=sc["T"], steps=sc["steps"], max_picard=sc["max_picard"],
                                     tol=sc["tol"]), None
    if kind == "ui":
        return _ui_study(cfg, opts, A, g, G, spec, x0), None
    raise ConfigError(f"study block: unknown study kind '{kind}'")


def _ui_study(cfg, opts, A, g, G, spec, x0):
    from monospde.monotone import yosida
    from monospde.noise import sample_ensemble

    sc = cfg["scheme"]
    Z = sample_ensemble(spec, uniform_grid(sc["T"], sc["steps"]),
                        range(opts["seed_base"], opts["seed_base"] + opts["n_paths"]))
    sol = solve_regularized(A, g, opts["lam"], G, Z, x0)
    family = [yosida(g, opts["lam"], sol.x[p]) for p in range(opts["n_paths"])]
    p = builtin_potential(cfg["potential"]["name"],
                          **({"p": cfg["graph"]["p"]} if cfg["graph"]["name"] == "power" else {}))
    diag = analysis.uniform_integrability_diag(family, p, opts["eps"], opts["bound"])
    rep = analysis.StudyReport("ui", steps=sc["steps"], seed_base=opts["seed_base"])
    for key in ("eps", "delta", "R", "M", "sup_mean", "worst_tail"):
        rep.add(key, diag[key], 0.0, opts["n_paths"])
    rep.passed = diag["pass"]
    rep.details = {"graph": g.name, "superlinear": diag["superlinear"],
                   "bounded": diag["bounded"]}
    return rep


def _worker(kind, cfg):
    """Run one study in a worker; returns serialisable results."""
    t0 = time.perf_counter()
    try:
        rep, sol = run_study(kind, cfg)
    except NUMERICAL_ERRORS as exc:
        return {"kind": kind, "error": f"{type(exc).__name__}: {exc}",
                "runtime": time.perf_counter() - t0}
    out = {"kind": kind, "report": rep, "runtime": time.perf_counter() - t0}
    if sol is not None and cfg["output"]["verbosity"] >= 1:
        out["solution"] = sol.rows(cfg["output"]["verbosity"])
        out["solution_manifest"] = sol.manifest()
    return out


# --------------------------------------------------------------------------
# artifacts

def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=analysis._jsonable)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def output_directory(cfg, base=None):
    directory = cfg["output"]["directory"]
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(directory):
        return os.path.join(root, directory)
    if base and not os.path.isabs(directory):
        return os.path.join(base, directory)
    return directory


def run(config_path, *, out_dir=None) -> int:
    """Run every study of a config; returns the process exit code."""
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = out_dir or output_directory(cfg)
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    kinds = list(cfg["studies"])
    workers = min(cfg["output"]["workers"], len(kinds))
    log.info("running %d studies with %d worker(s)", len(kinds), workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_worker, kinds, [cfg] * len(kinds)))
    else:
        results = [_worker(kind, cfg) for kind in kinds]

    checks, errors, files, runtimes = {}, {}, [], {}
    for res in results:
        kind = res["kind"]
        runtimes[kind] = res["runtime"]
        if "error" in res:
            errors[kind] = res["error"]
            checks[kind] = False
            log.error("%s aborted: %s", kind, res["error"])
            continue
        rep = res["report"]
        checks[kind] = bool(rep.passed)
        for suffix, writer in ((".csv", rep.write_csv), (".json", rep.write_json)):
            name = rep.stem + suffix
            writer(os.path.join(out, name))
            files.append(name)
        if "solution" in res:
            header, rows = res["solution"]
            name = f"path_{rep.stem}.csv"
            _write_csv(os.path.join(out, name), header, rows)
            files.append(name)
        log.info("%s: %s", kind, "pass" if rep.passed else "FAIL")

    if errors:
        code = EXIT_NUMERICAL
    else:
        code = EXIT_OK if all(checks.values()) else EXIT_CHECKS
    summary = {"schema_version": analysis.SCHEMA_VERSION, "checks": checks,
               "all_passed": bool(checks) and all(checks.values()) and not errors,
               "errors": errors, "exit_code": code}
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    files.append("summary.json")

    digest = hashlib.sha1()
    hashed_cfg = {k: v for k, v in cfg.items() if k != "output"}
    digest.update(_canonical(hashed_cfg).encode())
    for name in sorted(files):
        with open(os.path.join(out, name), "rb") as fh:
            data = fh.read()
        digest.update(f"blob {name} {len(data)}\0".encode())
        digest.update(data)
    manifest = {"config": cfg, "content_hash": digest.hexdigest(), "files": sorted(files),
                "created": datetime.now(timezone.utc).isoformat(),
                "runtime_seconds": runtimes}
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=analysis._jsonable)
        fh.write("\n")
    return code


def list_builtins() -> str:
    lines = ["graphs:"]
    lines += [f"  {name}" for name in graph_names()]
    lines.append("potentials:")
    lines += [f"  {name}" for name in graph_names()]
    lines.append("library:")
    lines += [f"  {name}" + (f" p={p['p']}" if p else "") for name, p in LIBRARY]
    lines.append("mark laws:")
    lines += [f"  {name}" for name in ("constant", "normal", "symmetric")]
    lines.append("noise coefficients:")
    lines += [f"  {name}" for name in sorted(("low-modes", "random", "identity", "zero"))]
    lines.append("multiplicative coefficients:")
    lines.append("  sine_diagonal")
    lines.append("schemes:")
    lines += [f"  {name}" for name in ("limit", "multiplicative", "regularized-explicit",
                                       "regularized-implicit")]
    lines.append("studies:")
    lines += [f"  {name}" for name in sorted(STUDY_KEYS)]
    return "\n".join(lines) + "\n"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="monospde", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the studies of a config")
    p_run.add_argument("config")
    p_run.add_argument("-o", "--output", help="artifact directory (overrides the config)")
    p_val = sub.add_parser("validate", help="check a config and print its resolved form")
    p_val.add_argument("config")
    sub.add_parser("list-builtins", help="list graphs, noise laws, schemes and studies")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")

    if args.command == "list-builtins":
        sys.stdout.write(list_builtins())
        return EXIT_OK
    if args.command == "validate":
        try:
            cfg = load_config(args.config)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return EXIT_OK
    return run(args.config, out_dir=args.output)


if __name__ == "__main__":
    sys.exit(main())
