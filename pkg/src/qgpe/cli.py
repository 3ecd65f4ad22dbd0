"""Command-line driver: ground-state search, time evolution, linear response, spectra and oracles.

Configuration is a TOML file whose top-level keys apply to every command and
whose ``[ground]``, ``[evolve]``, ``[respond]``, ``[spectrum]`` tables override
them per command; ``--set key=value`` overrides both. Outputs go to
``--out-dir``: JSON reports with sorted keys, CSV tables with LF line endings,
and ``qgpe-cmps-v1`` checkpoints.

Exit codes: 0 success, 1 configuration error, 2 no convergence, 3 integration
failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import cmps
from .bdg import excitation_spectrum, prepare_bundle, sweep_k
from .cmps import FiniteCMPS, UniformCMPS, canonical_residual, load_checkpoint, save_checkpoint
from .errors import NoConvergence, NotStationary, QGPEError, StepTooLarge
from .oracle import bethe_ground_energy, bogoliubov_dispersion
from .tdvp import (
    LiebLinigerParams,
    _flow_norm,
    ground_state_at_gamma,
    imaginary_time_finite,
    imaginary_time_ground_state,
    qgpe_rhs_uniform,
    real_time_evolve,
)
from .transfer import fixed_point_density, particle_density, propagate_density

log = logging.getLogger("qgpe")

EXIT_OK, EXIT_CONFIG, EXIT_NOCONV, EXIT_INTEGRATION = 0, 1, 2, 3


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the configuration-error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# -- configuration ----------------------------------------------------------------

def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_config(path: Optional[str], command: str, overrides=()) -> dict:
    """Merge top-level keys, the ``[command]`` table and ``key=value`` overrides."""
    raw = {}
    if path:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid config {path}: {exc}") from exc
    cfg = {k: v for k, v in raw.items() if not isinstance(v, dict)}
    section = raw.get(command, {})
    if not isinstance(section, dict):
        raise ConfigError(f"[{command}] must be a table")
    cfg.update(section)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg[key.strip()] = _parse_value(value.strip())
    return cfg


def _get(cfg, key, kind=float, default=None, positive=False, required=False):
    if key not in cfg or cfg[key] is None:
        if required:
            raise ConfigError(f"missing required parameter {key!r}")
        return default
    value = cfg[key]
    try:
        if kind is int:
            if isinstance(value, bool) or not float(value).is_integer():
                raise ValueError
            value = int(value)
        elif kind is float:
            value = float(value)
            if not math.isfinite(value):
                raise ValueError
        else:
            value = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"parameter {key!r} has invalid value {cfg[key]!r}") from None
    if positive and not value > 0:
        raise ConfigError(f"parameter {key!r} must be positive, got {value!r}")
    return value


def _params(cfg) -> LiebLinigerParams:
    g = _get(cfg, "g", required=True)
    mu = _get(cfg, "mu", required=True)
    if g < 0:
        log.warning("attractive coupling g=%g is experimental", g)
    return LiebLinigerParams(g, mu)


def _k_grid(cfg):
    """k values in units of ``k_F``: either ``k_over_kF = [...]`` or ``k_min``, ``k_max``, ``n_k``."""
    if "k_over_kF" in cfg:
        vals = cfg["k_over_kF"]
        if not isinstance(vals, list):
            raise ConfigError("k_over_kF must be a list")
        try:
            out = [float(v) for v in vals]
        except (TypeError, ValueError):
            raise ConfigError("k_over_kF must contain numbers") from None
        if not all(math.isfinite(v) for v in out):
            raise ConfigError("k_over_kF must be finite")
        return out
    n = _get(cfg, "n_k", int, 0)
    if n < 0:
        raise ConfigError("n_k must be non-negative")
    if n == 0:
        return []
    lo = _get(cfg, "k_min", float, 0.1)
    hi = _get(cfg, "k_max", float, 3.0)
    return [float(x) for x in np.linspace(lo, hi, n)]


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("QGPE_THREADS", "1")
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"QGPE_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError("thread count must be at least 1")
    return n


# -- output -------------------------------------------------------------------------

def _num(x):
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    if x is None:
        return ""
    return "%.17g" % float(x)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_num(v) for v in r])


def write_json(path: Path, doc) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(cmps._emit(doc) + "\n")


class _CsvStream:
    """Row-by-row CSV writer, flushed per row so long runs can be followed."""

    def __init__(self, path: Path, header):
        self.fh = open(path, "w", encoding="utf-8", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        self.w.writerow(header)

    def row(self, values):
        self.w.writerow([_num(v) for v in values])
        self.fh.flush()

    def close(self):
        self.fh.close()


def _uniform_observables(state: UniformCMPS, params):
    dens = fixed_point_density(state)
    from .tdvp import uniform_energy

    return uniform_energy(state, params, dens), float(particle_density(state, dens))


def _finite_observables(state: FiniteCMPS, params):
    from .tdvp import finite_energy

    dens = propagate_density(state)
    n = float(np.trapezoid(particle_density(state, dens), state.grid))
    return finite_energy(state, params, dens), n


def _residual(state):
    if isinstance(state, UniformCMPS):
        return state.canonical_residual()
    return max(canonical_residual(q, r) for q, r in zip(state.Qs, state.Rs))


def _load_state(cfg, key="checkpoint"):
    path = _get(cfg, key, str, required=True)
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"invalid checkpoint {path}: {exc}") from exc


# -- commands -----------------------------------------------------------------------

def cmd_ground(cfg, args, out: Path) -> int:
    D = _get(cfg, "D", int, required=True)
    if D < 1:
        raise ConfigError("D must be at least 1")
    tol = _get(cfg, "tol", float, 1e-8, positive=True)
    max_steps = _get(cfg, "max_steps", int, 100000)
    if max_steps < 1:
        raise ConfigError("max_steps must be at least 1")
    method = _get(cfg, "method", str, "lbfgs")
    if method not in ("flow", "lbfgs"):
        raise ConfigError("method must be 'flow' or 'lbfgs'")
    dtau = _get(cfg, "dtau", float, 0.05, positive=True)
    converged = True
    if "gamma" in cfg:
        gamma = _get(cfg, "gamma", float, positive=True)
        refine = _get(cfg, "refine", int, 0)
        try:
            res = ground_state_at_gamma(gamma, D, tol=tol, max_steps=max_steps, seed=args.seed,
                                        refine=refine, method=method)
            state, energies, params = res["state"], res["energies"], res["params"]
        except NoConvergence as exc:
            converged = False
            state, energies = exc.partial
            from .tdvp import chemical_potential_for_gamma

            params = LiebLinigerParams(float(gamma), chemical_potential_for_gamma(gamma))
    else:
        params = _params(cfg)
        try:
            state, energies = imaginary_time_ground_state(params, D, tol=tol, max_steps=max_steps,
                                                          seed=args.seed, dtau=dtau, method=method)
        except NoConvergence as exc:
            converged = False
            state, energies = exc.partial
    dens = fixed_point_density(state, canonical=True)
    n = float(particle_density(state, dens))
    _, Rd = qgpe_rhs_uniform(state, dens, params, "imaginary", 1e-14)
    report = {
        "D": D,
        "g": params.g,
        "mu": params.mu,
        "energy_density": energies[-1],
        "particle_density": n,
        "gamma": params.g / n if n > 0 else float("inf"),
        "grad_norm": _flow_norm(Rd, dens),
        "steps": len(energies) - 1,
        "converged": converged,
        "seed": args.seed,
    }
    save_checkpoint(out / "ground.cmps.json", state)
    write_json(out / "ground.json", report)
    write_csv(out / "ground_energy.csv", ["step", "energy_density"], enumerate(energies))
    print(cmps._emit(report))
    return EXIT_OK if converged else EXIT_NOCONV


def cmd_evolve(cfg, args, out: Path) -> int:
    state = _load_state(cfg)
    params = _params(cfg)
    mode = _get(cfg, "mode", str, "real")
    if mode not in ("real", "imaginary"):
        raise ConfigError("mode must be 'real' or 'imaginary'")
    uniform = isinstance(state, UniformCMPS)
    obs = _uniform_observables if uniform else _finite_observables
    header = ["step", "time", "energy", "density", "canonical_residual"]
    path = out / "evolve.csv"
    code = EXIT_OK

    if mode == "real":
        t_end = _get(cfg, "t_end", float, 1.0)
        dt = _get(cfg, "dt", float, 1e-2, positive=True)
        if t_end < 0:
            raise ConfigError("t_end must be non-negative")
        try:
            traj = real_time_evolve(state, params, t_end, dt, keep_states=True)
        except StepTooLarge as exc:
            log.error("%s", exc)
            traj = exc.partial
            code = EXIT_INTEGRATION
        except QGPEError as exc:
            log.error("integration failed: %s", exc)
            save_checkpoint(out / "evolve.cmps.json", state)
            return EXIT_INTEGRATION
        rows = [(i, t, e, n, _residual(s)) for i, (t, e, n, s) in
                enumerate(zip(traj.times, traj.energies, traj.densities, traj.states))]
        write_csv(path, header, rows)
        save_checkpoint(out / "evolve.cmps.json", traj.final)
        return code

    stream = _CsvStream(path, header)
    E0, n0 = obs(state, params)
    stream.row((0, 0.0, E0, n0, _residual(state)))
    counter = {"i": 0}

    def record(tau, st, E):
        counter["i"] += 1
        stream.row((counter["i"], tau, E, obs(st, params)[1], _residual(st)))

    tol = _get(cfg, "tol", float, 1e-8 if uniform else 1e-6, positive=True)
    max_steps = _get(cfg, "max_steps", int, 100000 if uniform else 20000)
    dtau = _get(cfg, "dtau", float, 0.05 if uniform else 1e-3, positive=True)
    try:
        if uniform:
            method = _get(cfg, "method", str, "flow")
            final, _ = imaginary_time_ground_state(params, state.D, tol=tol, max_steps=max_steps,
                                                   initial=state, dtau=dtau, method=method,
                                                   callback=record)
        else:
            final, _ = imaginary_time_finite(state, params, dtau, tol=tol, max_steps=max_steps,
                                             callback=record)
    except NoConvergence as exc:
        log.error("%s", exc)
        final = exc.partial[0]
        code = EXIT_NOCONV
    except QGPEError as exc:
        log.error("integration failed: %s", exc)
        final, code = state, EXIT_INTEGRATION
    finally:
        stream.close()
    save_checkpoint(out / "evolve.cmps.json", final)
    return code


def _bundle(cfg):
    state = _load_state(cfg)
    if not isinstance(state, UniformCMPS):
        raise ConfigError("linear response needs a uniform checkpoint")
    params = _params(cfg)
    tol = _get(cfg, "stationarity_tol", float, 1e-6, positive=True)
    return prepare_bundle(state, params, tol=tol)


def cmd_respond(cfg, args, out: Path) -> int:
    ks = _k_grid(cfg)
    omega = _get(cfg, "omega", float, 0.0)
    try:
        bundle = _bundle(cfg)
    except NotStationary as exc:
        log.error("%s", exc)
        return EXIT_NOCONV
    kF = math.pi * bundle.density
    rows = sweep_k(bundle, [x * kF for x in ks], omega=omega, threads=_threads(args))
    write_csv(out / "respond.csv", ["k_over_kF", "k", "amplitude", "residual", "error"],
              [(x, r.k, r.response, r.residual, r.error or "") for x, r in zip(ks, rows)])
    failed = sum(r.error is not None for r in rows)
    if rows and failed > 0.1 * len(rows):
        log.error("%d of %d response solves failed", failed, len(rows))
        return EXIT_INTEGRATION
    return EXIT_OK


def cmd_spectrum(cfg, args, out: Path) -> int:
    n_modes = _get(cfg, "n_modes", int, 4)
    if n_modes < 1:
        raise ConfigError("n_modes must be at least 1")
    if "k" in cfg:
        ks = cfg["k"]
        if not isinstance(ks, list):
            raise ConfigError("k must be a list")
        ks = [float(v) for v in ks]
        units = 1.0
    else:
        ks = _k_grid(cfg)
        units = None
    try:
        bundle = _bundle(cfg)
    except NotStationary as exc:
        log.error("%s", exc)
        return EXIT_NOCONV
    if units is None:
        units = math.pi * bundle.density
    from concurrent.futures import ThreadPoolExecutor

    def one(x):
        k = x * units
        try:
            w = excitation_spectrum(bundle, k, n_modes=n_modes)
            return [k] + [float(v) for v in w] + [None] * (n_modes - len(w)) + [""]
        except QGPEError as exc:
            return [k] + [None] * n_modes + [f"{type(exc).__name__}: {exc}"]

    threads = _threads(args)
    if threads > 1 and len(ks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, ks))
    else:
        rows = [one(x) for x in ks]
    header = ["k"] + [f"omega_{i + 1}" for i in range(n_modes)] + ["error"]
    write_csv(out / "spectrum.csv", header, rows)
    return EXIT_OK


def cmd_oracle(args, out: Optional[Path]) -> int:
    if args.which == "bethe":
        if not args.gamma:
            raise ConfigError("bethe needs --gamma")
        if any(not (g > 0 and math.isfinite(g)) for g in args.gamma):
            raise ConfigError("gamma must be positive and finite")
        try:
            doc = {"bethe": [{"gamma": g, "e": bethe_ground_energy(g)} for g in args.gamma]}
        except NoConvergence as exc:
            raise ConfigError(str(exc)) from exc
    else:
        if not args.k:
            raise ConfigError("bogoliubov needs --k")
        if args.g is None or args.rho is None or args.g < 0 or args.rho < 0:
            raise ConfigError("bogoliubov needs --g >= 0 and --rho >= 0")
        w = bogoliubov_dispersion(np.asarray(args.k), args.g, args.rho)
        doc = {"bogoliubov": [{"k": k, "omega": float(x)} for k, x in zip(args.k, w)],
               "g": args.g, "rho": args.rho}
    text = cmps._emit(doc)
    print(text)
    if out is not None:
        write_json(out / "oracle.json", doc)
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads for k sweeps (default: $QGPE_THREADS or 1)")
    common.add_argument("--out-dir", default=".", help="output directory (default: current)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="qgpe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("ground", parents=[common], help="uniform ground state by imaginary time")
    sub.add_parser("evolve", parents=[common], help="real- or imaginary-time evolution of a checkpoint")
    sub.add_parser("respond", parents=[common], help="static or dynamic density response sweep")
    sub.add_parser("spectrum", parents=[common], help="excitation spectrum on a k grid")
    po = sub.add_parser("oracle", parents=[common], help="reference values (Bethe, Bogoliubov)")
    po.add_argument("which", choices=["bethe", "bogoliubov"])
    po.add_argument("--gamma", type=float, nargs="+")
    po.add_argument("--k", type=float, nargs="+")
    po.add_argument("--g", type=float)
    po.add_argument("--rho", type=float)
    return p


COMMANDS = {"ground": cmd_ground, "evolve": cmd_evolve, "respond": cmd_respond, "spectrum": cmd_spectrum}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "oracle":
            return cmd_oracle(args, out if args.out_dir != "." else None)
        cfg = load_config(args.config, args.command, args.set)
        return COMMANDS[args.command](cfg, args, out)
    except (ConfigError, ValueError) as exc:
        parser.print_usage(sys.stderr)
        print(f"qgpe: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"qgpe: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
