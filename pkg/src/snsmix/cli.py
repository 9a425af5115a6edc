"""Command line entry point.

    snsmix <command> [--config FILE] [flags]

Commands: simulate, check-hormander, malliavin, mixing, control, selftest.
Every run writes its outputs, an echo of the resolved config and a
manifest with content hashes under output_dir.  Exit codes: 0 success,
1 validation error, 2 numerical blow-up, 3 failed selftest.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import re
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("snsmix")

EXIT_OK, EXIT_VALIDATION, EXIT_BLOWUP, EXIT_SELFTEST = 0, 1, 2, 3
COMMANDS = ("simulate", "check-hormander", "malliavin", "mixing", "control", "selftest")
FIELD_KEYS = ("x0", "x1", "x2", "x", "y")

# key -> (type, default); None means "not set"
SCHEMA = {
    "m": (int, 3),
    "n": (int, 2),
    "n0": (int, 1),
    "r": (float, 1.4),
    "sigma": (float, None),
    "K": (float, 0.0),
    "dt": (float, 1e-3),
    "T": (float, 1.0),
    "seed": (int, 0),
    "ensemble": (int, 1),
    "output_dir": (str, "snsmix-out"),
    "snapshot_every": (int, 0),
    "samples": (int, 20),
    "rank_one": (bool, False),
    "horizon": (float, 20.0),
    "burn_in": (float, None),
    "delta_match": (float, 1e-6),
    "bins": (int, 30),
    "epsilon": (float, 0.1),
    "tail_epsilons": (list, None),
    "q_exponent": (float, 1.0),
    "x0": (dict, None),
    "x1": (dict, None),
    "x2": (dict, None),
    "x": (dict, None),
    "y": (dict, None),
}

# per-command defaults layered over SCHEMA defaults
COMMAND_DEFAULTS = {
    "mixing": {"m": 2, "dt": 0.05, "ensemble": 1000,
               "x1": {"random": {"amplitude": 1.0}}, "x2": {"random": {"amplitude": 1.0}}},
    "control": {"m": 3, "T": 2.0, "dt": 4e-3,
                "x": {"random": {"amplitude": 1.0}}, "y": {"random": {"amplitude": 1.0}}},
    "check-hormander": {},
    "malliavin": {"x0": {"random": {"amplitude": 1.0}}},
}


class ConfigError(ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to the validation exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _key_line(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def load_config(path: str | Path) -> tuple[dict, dict]:
    """Parse and type-check a JSON config file.

    Returns the values and a map from key to "file:line" for later
    error messages.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}:1: config must be a JSON object")
    out, where_map = {}, {}
    for key, value in doc.items():
        where = f"{path}:{_key_line(text, key) or 1}"
        where_map[key] = where
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        try:
            out[key] = _coerce(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    return out, where_map


def _coerce(key, value):
    typ, _ = SCHEMA[key]
    if value is None:
        return None
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    if typ is list:
        if not isinstance(value, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key} must be a list of numbers, got {value!r}")
        return [float(v) for v in value]
    if typ is dict:
        if value == "zero":
            return {"zero": True}
        if not isinstance(value, dict):
            raise ConfigError(f"{key} must be a field object, \"zero\" or {{\"random\": {{...}}}}")
        return value
    raise AssertionError(key)


def resolve_config(command: str, file_cfg: dict, flags: dict, where: dict | None = None) -> dict:
    """Defaults, then command defaults, then the file, then flags."""
    cfg = {k: d for k, (_, d) in SCHEMA.items()}
    cfg.update(COMMAND_DEFAULTS.get(command, {}))
    cfg.update(file_cfg)
    given = {k: v for k, v in flags.items() if v is not None}
    cfg.update(given)
    try:
        validate(command, cfg)
    except ConfigError as exc:
        keys = exc.key if isinstance(exc.key, tuple) else (exc.key,)
        for k in keys:
            if where and k in where and k not in given:
                raise ConfigError(f"{where[k]}: {exc}", exc.key) from None
        raise
    return cfg


def validate(command: str, cfg: dict):
    def need(cond, msg, *keys):
        if not cond:
            raise ConfigError(msg, keys)

    need(cfg["m"] >= 2, f"m must be at least 2, got {cfg['m']}", "m")
    need(0 < cfg["n0"] < cfg["m"], f"need 0 < n0 < m, got n0={cfg['n0']}, m={cfg['m']}", "n0", "m")
    if command in ("check-hormander", "malliavin"):
        need(cfg["n0"] < cfg["n"] < cfg["m"],
             f"need n0 < n < m, got n0={cfg['n0']}, n={cfg['n']}, m={cfg['m']}", "n", "n0", "m")
    need(cfg["dt"] > 0, f"dt must be positive, got {cfg['dt']}", "dt")
    need(cfg["T"] > 0, f"T must be positive, got {cfg['T']}", "T")
    need(cfg["K"] >= 0, f"K must be non-negative, got {cfg['K']}", "K")
    need(cfg["r"] > 0, f"r must be positive, got {cfg['r']}", "r")
    need(cfg["seed"] >= 0, f"seed must be non-negative, got {cfg['seed']}", "seed")
    need(cfg["ensemble"] >= 1, f"ensemble must be positive, got {cfg['ensemble']}", "ensemble")
    need(cfg["snapshot_every"] >= 0, "snapshot_every must be non-negative", "snapshot_every")
    need(cfg["samples"] >= 0, "samples must be non-negative", "samples")
    if command == "mixing":
        need(cfg["ensemble"] >= 2, "mixing needs ensemble >= 2", "ensemble")
        need(cfg["horizon"] > 0, "horizon must be positive", "horizon")
        need(cfg["bins"] >= 2, "bins must be at least 2", "bins")
        need(cfg["delta_match"] > 0, "delta_match must be positive", "delta_match")
    if command == "control":
        need(cfg["m"] > 2 * cfg["n0"],
             f"control steers through modes with |k|_inf > 2 n0; need m > {2 * cfg['n0']}", "m", "n0")
        need(cfg["epsilon"] > 0, "epsilon must be positive", "epsilon")
    if cfg["tail_epsilons"] is not None:
        need(all(0 < e for e in cfg["tail_epsilons"]), "tail_epsilons must be positive", "tail_epsilons")
    for key in FIELD_KEYS:
        spec = cfg.get(key)
        if spec is None or "zero" in spec:
            continue
        if "random" in spec:
            opts = spec["random"]
            need(isinstance(opts, dict) and set(opts) <= {"amplitude", "gamma", "decay"},
                 f"{key}.random accepts amplitude, gamma, decay", key)
        else:
            need("coeffs" in spec, f"{key} must be a field object with 'm' and 'coeffs'", key)
            need(spec.get("m") == cfg["m"], f"{key} has cutoff {spec.get('m')}, config says m={cfg['m']}", key)


def build_field(cfg: dict, key: str):
    """Field for a config entry; random fields draw from a stream keyed by the seed."""
    from .field import GalerkinField, random_field

    spec = cfg.get(key)
    m = cfg["m"]
    if spec is None or "zero" in spec:
        return GalerkinField(m)
    if "random" in spec:
        opts = {"amplitude": 1.0, "gamma": 1.0, "decay": 2.0, **spec["random"]}
        rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence([cfg["seed"], 100, FIELD_KEYS.index(key)])))
        return random_field(m, rng, opts["amplitude"], opts["gamma"], opts["decay"])
    try:
        return GalerkinField.from_json(json.dumps(spec))
    except (ValueError, KeyError, TypeError, IndexError) as exc:
        raise ConfigError(f"{key}: {exc}", key) from None


def build_q(cfg: dict):
    from .noise import build_covariance

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_covariance(cfg["n0"], cfg["r"], cfg["m"], sigma=cfg["sigma"],
                                rank_one=cfg["rank_one"])


class Outputs:
    """Writes files under output_dir and remembers them for the manifest."""

    def __init__(self, root: Path):
        self.root = root
        self.files: list[str] = []

    def write(self, name: str, text: str):
        path = self.root / name
        path.write_text(text)
        self.files.append(name)
        return path

    def manifest(self, command, cfg, exit_code, wall_time, extra=None) -> dict:
        entries = []
        for name in self.files:
            data = (self.root / name).read_bytes()
            entries.append({"path": name, "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)})
        doc = {
            "command": command,
            "version": __version__,
            "seed": cfg["seed"],
            "config": cfg,
            "outputs": entries,
            "exit_code": exit_code,
            "wall_time": wall_time,
        }
        if extra:
            doc.update(extra)
        return doc


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _csv(rows, header=None) -> str:
    lines = [header] if header else []
    lines += [",".join(repr(float(v)) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


# commands ------------------------------------------------------------------

def cmd_simulate(cfg, out: Outputs) -> int:
    from .dynamics import SimConfig, simulate

    Q = build_q(cfg)
    x0 = build_field(cfg, "x0")
    sc = SimConfig(m=cfg["m"], dt=cfg["dt"], T=cfg["T"], K=cfg["K"], seed=cfg["seed"])
    summary = []
    for r in range(cfg["ensemble"]):
        run = simulate(x0, sc, Q, replica=r)
        name = "trajectory.jsonl" if cfg["ensemble"] == 1 else f"trajectory_{r:04d}.jsonl"
        out.write(name, run.to_jsonl(cfg["snapshot_every"] or None))
        summary.append({"replica": r, "final_energy": float(run.energy[-1]),
                        "final_enstrophy": float(run.enstrophy[-1]),
                        "final_logw": float(run.log_fk_weight[-1])})
    out.write("summary.json", _dump({"steps": sc.nsteps, "dt": sc.step_size, "replicas": summary}))
    print(f"simulated {cfg['ensemble']} replica(s), {sc.nsteps} steps of {sc.step_size:.6g}")
    return EXIT_OK


def cmd_check_hormander(cfg, out: Outputs) -> int:
    from .hormander import bracket_span_check

    Q = build_q(cfg)
    cert = bracket_span_check(Q, cfg["n"], samples=cfg["samples"], seed=cfg["seed"])
    out.write("certificate.json", cert.to_json() + "\n")
    print(f"{'k':>12}  rank  pairs")
    for k, v in cert.per_k.items():
        print(f"{str(k):>12}  {v['rank']:>4}  {v['pairs_used']:>5}")
    print(f"delta_hat = {cert.delta_hat:.6e}  (sigma_max {cert.sigma_max:.4g}, "
          f"{len(cert.delta_per_sample)} points, constant rank {cert.constant_rank}/{cert.dimension})")
    print("certificate: " + ("PASSED" if cert.passed else f"FAILED  witness {json.dumps(cert.witness)}"))
    return EXIT_OK


def cmd_malliavin(cfg, out: Outputs) -> int:
    from .dynamics import SimConfig, simulate
    from .tangent import MalliavinMatrix, low_jacobian, min_eigen_tail

    Q = build_q(cfg)
    x0 = build_field(cfg, "x0")
    sc = SimConfig(m=cfg["m"], dt=cfg["dt"], T=cfg["T"], K=cfg["K"], seed=cfg["seed"])
    n = cfg["n"]
    reps, lams = [], []
    first = None
    for r in range(cfg["ensemble"]):
        run = simulate(x0, sc, Q, replica=r)
        path = low_jacobian(run, n, Q, store_steps=[run.nsteps], residual_every=max(run.nsteps // 10, 1))
        mm = MalliavinMatrix.from_matrix(float(run.times[-1]), path.malliavin[-1])
        if first is None:
            first = mm
        lams.append(mm.lambda_min)
        reps.append({"replica": r, "lambda_min": mm.lambda_min,
                     "inverse_residual": float(np.nanmax(path.residual)),
                     "refreshes": path.refreshes})
    modes = Q.modes
    coords = [[int(c) for c in k] + [i] for k in modes.modes[modes.low_mask(n)] for i in (0, 1)]
    report = {"t": first.t, "n": n, "coordinates": coords, "eigenvalues": first.eigenvalues.tolist(),
              "replicas": reps}
    if cfg["tail_epsilons"]:
        if len(lams) < 100:
            raise ConfigError("tail estimates need ensemble >= 100")
        report["tail"] = []
        for e in cfg["tail_epsilons"]:
            te = min_eigen_tail(lams, e, cfg["q_exponent"])
            report["tail"].append({"epsilon": e, "probability": te.probability,
                                   "ci": [te.ci_low, te.ci_high], "count": te.count})
    out.write("malliavin.csv", _csv(first.M))
    out.write("malliavin.json", json.dumps(report, sort_keys=True) + "\n")
    print(f"lambda_min(M_t) at t={first.t:.6g}: " + ", ".join(f"{v:.4e}" for v in lams[:10])
          + (" ..." if len(lams) > 10 else ""))
    return EXIT_OK


def cmd_mixing(cfg, out: Outputs) -> int:
    from .ergodicity import mixing_estimate

    Q = build_q(cfg)
    res = mixing_estimate(build_field(cfg, "x1"), build_field(cfg, "x2"), Q, cfg["horizon"],
                          cfg["ensemble"], cfg["dt"], seed=cfg["seed"], bins=cfg["bins"],
                          delta_match=cfg["delta_match"], burn_in=cfg["burn_in"])
    out.write("mixing.csv", res.to_csv())
    out.write("coupling.csv", _csv(zip(res.times, res.coupling_tv, res.coupling_ci), "t,tv,ci"))
    out.write("mixing_summary.json", _dump(res.summary()))
    print(f"fit C={res.fit_C:.4g} c={res.fit_c:.4g} (reliable: {res.fit_reliable}), "
          f"spearman {res.spearman:.3f}, never separated: {res.never_separated}")
    return EXIT_OK


def cmd_control(cfg, out: Outputs) -> int:
    from .ergodicity import control_synthesis

    Q = build_q(cfg)
    res = control_synthesis(build_field(cfg, "x"), build_field(cfg, "y"), cfg["T"], Q,
                            epsilon=cfg["epsilon"], dt=cfg["dt"], seed=cfg["seed"])
    out.write("control.json", res.to_json() + "\n")
    print(f"|A(u(T) - y)| = {res.error:.3e} (epsilon {res.epsilon}), "
          f"max |u^h(T2)| = {res.high_at_T2}, {'PASSED' if res.passed else 'FAILED'}")
    return EXIT_OK


def cmd_selftest(cfg, out: Outputs) -> int:
    from .selftest import run_selftest

    rows = run_selftest(seed=cfg["seed"])
    width = max(len(r[0]) for r in rows)
    for name, ok, detail in rows:
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {detail}")
    out.write("selftest.json", _dump([{"check": n, "passed": ok, "detail": d} for n, ok, d in rows]))
    return EXIT_OK if all(ok for _, ok, _ in rows) else EXIT_SELFTEST


HANDLERS = {
    "simulate": cmd_simulate,
    "check-hormander": cmd_check_hormander,
    "malliavin": cmd_malliavin,
    "mixing": cmd_mixing,
    "control": cmd_control,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="snsmix", description="Galerkin stochastic Navier-Stokes diagnostics")
    parser.add_argument("--version", action="version", version=f"snsmix {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("-v", "--verbose", action="store_true")
        for key in ("m", "n", "n0", "seed", "ensemble"):
            p.add_argument(f"--{key}", type=int)
        for key in ("r", "sigma", "K", "dt", "T"):
            p.add_argument(f"--{key}", type=float)
        if name == "simulate":
            p.add_argument("--snapshot-every", dest="snapshot_every", type=int)
        if name == "check-hormander":
            p.add_argument("--samples", type=int)
            p.add_argument("--rank-one", dest="rank_one", action="store_true", default=None)
        if name == "malliavin":
            p.add_argument("--tail-epsilons", dest="tail_epsilons", type=float, nargs="+")
            p.add_argument("--q-exponent", dest="q_exponent", type=float)
        if name == "mixing":
            p.add_argument("--horizon", type=float)
            p.add_argument("--burn-in", dest="burn_in", type=float)
            p.add_argument("--delta-match", dest="delta_match", type=float)
            p.add_argument("--bins", type=int)
        if name == "control":
            p.add_argument("--epsilon", type=float)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    command = args.command
    flags = {k: v for k, v in vars(args).items() if k in SCHEMA}
    try:
        file_cfg, where = load_config(args.config) if args.config else ({}, {})
        cfg = resolve_config(command, file_cfg, flags, where)
        root = Path(cfg["output_dir"])
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write-test"
        probe.write_text("")
        probe.unlink()
    except ConfigError as exc:
        print(f"snsmix: config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"snsmix: cannot write output directory: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    from .dynamics import NumericalBlowup

    out = Outputs(root)
    out.write("config.json", _dump(cfg))
    log.info("%s: seed %d, output in %s", command, cfg["seed"], root)
    start = time.perf_counter()
    extra = None
    try:
        code = HANDLERS[command](cfg, out)
    except ConfigError as exc:
        print(f"snsmix: config error: {exc}", file=sys.stderr)
        code = EXIT_VALIDATION
    except NumericalBlowup as exc:
        print(f"snsmix: numerical blow-up: {exc}", file=sys.stderr)
        code, extra = EXIT_BLOWUP, {"blowup": {"time": exc.time, "step": exc.step}}
    except ValueError as exc:
        print(f"snsmix: invalid input: {exc}", file=sys.stderr)
        code = EXIT_VALIDATION
    wall = time.perf_counter() - start
    log.info("%s finished with exit code %d after %.2fs", command, code, wall)
    (root / "manifest.json").write_text(_dump(out.manifest(command, cfg, code, wall, extra)))
    return code


if __name__ == "__main__":
    sys.exit(main())
