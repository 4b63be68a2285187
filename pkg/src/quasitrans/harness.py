"""Command-line experiment driver.

    quasitrans CONFIG.yaml [--out DIR] [--verbose]

The config selects one experiment (dispersion, h-sweep, eps-sweep,
residual-trace or audit).  Every run writes ``inputs.json`` (enough to
rerun it), ``record.json``, CSV data with header rows and SVG plots.

Exit codes: 0 success, 2 configuration error, 3 no localized mode,
4 too many unconverged solves in a sweep, 5 audit failure.
``QUASITRANS_THREADS`` caps the BLAS and numba thread pools.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import ansatz, mode_solver
from . import transmission_solver as ts
from .ansatz import Envelope
from .errors import ConfigurationError, IterationError
from .fem_core import dump_triplets

log = logging.getLogger("quasitrans")

EXIT_OK, EXIT_CONFIG, EXIT_NO_MODE, EXIT_PARTIAL, EXIT_AUDIT = 0, 2, 3, 4, 5
KINDS = ("dispersion", "h-sweep", "eps-sweep", "residual-trace", "audit")


class NoModeError(LookupError):
    pass


@dataclass
class RunConfig:
    experiment: str
    profile: dict = field(default_factory=lambda: {"builtin": "fig1"})
    eps3: tuple = ("1", "1")
    omega0: list = field(default_factory=lambda: [3.0])
    mode_half_width: float = 40.0
    mode_h: float = 1e-3
    envelope: dict = field(default_factory=lambda: {"kind": "gaussian", "coefficient": 5e6})
    eps: list = field(default_factory=lambda: [3e-4])
    h: list = field(default_factory=lambda: [0.05])
    tol: float = 1e-8
    max_iter: int = 50
    min_iter: int | None = None
    theta: float = 1.0
    bounds_minus: tuple = (-6.0, 0.0, -6.0, 6.0)
    bounds_plus: tuple = (0.0, 6.0, -6.0, 6.0)
    load_form: str = "source"
    norm_eps: list = field(default_factory=lambda: [1e-5, 2e-5, 5e-5, 1e-4])
    ratio_bound: float = 1.0
    dump_matrices: bool = False
    output_dir: str | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigurationError("config file must contain a mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        if "experiment" not in raw:
            raise ConfigurationError("config needs an 'experiment' key")
        data = dict(raw)
        for key in ("omega0", "eps", "h", "norm_eps"):
            if key in data and not isinstance(data[key], (list, tuple)):
                data[key] = [data[key]]
        if isinstance(data.get("profile"), str):
            data["profile"] = {"builtin": data["profile"]}
        try:
            cfg = cls(**data)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None
        cfg.validate()
        return cfg

    def validate(self):
        if self.experiment not in KINDS:
            raise ConfigurationError(f"experiment must be one of {KINDS}, got {self.experiment!r}")
        for key in ("omega0", "eps", "h", "norm_eps"):
            vals = getattr(self, key)
            if not vals:
                raise ConfigurationError(f"{key} must be a non-empty list")
            try:
                setattr(self, key, [float(v) for v in vals])
            except (TypeError, ValueError):
                raise ConfigurationError(f"{key} must contain numbers") from None
        if any(not 0 < e < 1 for e in self.eps + self.norm_eps):
            raise ConfigurationError("eps values must lie in (0, 1)")
        if any(h <= 0 for h in self.h):
            raise ConfigurationError("h values must be positive")
        if not (isinstance(self.tol, (int, float)) and self.tol > 0):
            raise ConfigurationError(f"tol must be positive, got {self.tol}")
        if not isinstance(self.max_iter, int) or self.max_iter < 1:
            raise ConfigurationError(f"max_iter must be a positive integer, got {self.max_iter}")
        if self.min_iter is not None and not 1 <= self.min_iter <= self.max_iter:
            raise ConfigurationError("min_iter must lie in [1, max_iter]")
        if not 0 < self.theta <= 1:
            raise ConfigurationError("theta must lie in (0, 1]")
        if self.mode_h <= 0 or self.mode_half_width <= 0:
            raise ConfigurationError("mode grid parameters must be positive")
        if self.experiment == "eps-sweep" and len(self.eps) < 1:
            raise ConfigurationError("eps-sweep needs eps values")
        if self.experiment == "h-sweep" and len(self.h) < 3:
            raise ConfigurationError("h-sweep needs at least three h values")
        if len(self.eps3) != 2:
            raise ConfigurationError("eps3 is a pair [minus, plus]")
        # build these eagerly so bad expressions fail before any computation
        self.build_profile()
        self.build_envelope()

    def build_profile(self) -> mode_solver.DielectricProfile:
        spec = self.profile
        eps3 = tuple(str(e) for e in self.eps3)
        try:
            if "builtin" in spec:
                return mode_solver.builtin_profile(spec["builtin"], eps3=eps3)
            return mode_solver.DielectricProfile.from_expressions(
                str(spec["eps1_minus"]), str(spec["eps1_plus"]), *eps3,
                name=spec.get("name", "custom"))
        except ConfigurationError:
            raise
        except Exception as exc:
            raise ConfigurationError(f"bad profile specification {spec!r}: {exc}") from None

    def build_envelope(self) -> Envelope:
        kind = self.envelope.get("kind", "gaussian")
        if kind == "gaussian":
            return Envelope.gaussian(float(self.envelope.get("coefficient", 5e6)))
        if kind == "zero":
            return Envelope.constant(0.0)
        raise ConfigurationError(f"envelope kind must be 'gaussian' or 'zero', got {kind!r}")

    def solver_config(self, mode, profile, eps, h, **overrides) -> ts.SolverConfig:
        min_iter = self.min_iter
        if min_iter is None:
            min_iter = min(5, self.max_iter) if self.experiment == "residual-trace" else 1
        kw = dict(eps=eps, mode=mode, profile=profile, envelope=self.build_envelope(), h=h,
                  tol=self.tol, max_iter=self.max_iter, min_iter=min_iter, theta=self.theta,
                  bounds_minus=tuple(self.bounds_minus), bounds_plus=tuple(self.bounds_plus),
                  load_form=self.load_form)
        kw.update(overrides)
        return ts.SolverConfig(**kw)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from None
    return RunConfig.from_dict(raw)


@dataclass
class ExperimentRecord:
    kind: str
    inputs: dict
    scalars: dict = field(default_factory=dict)
    slopes: dict = field(default_factory=dict)
    wall_time: float = 0.0
    exit_code: int = EXIT_OK


# ------------------------------------------------------------------ output

def _atomic_write(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_csv(path: Path, header, rows, footer=None):
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    if footer is not None:
        w.writerow([_fmt(v) for v in footer])
    _atomic_write(path, buf.getvalue())


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_json(path: Path, obj):
    _atomic_write(path, json.dumps(obj, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _clean(v):
    return None if isinstance(v, float) and not math.isfinite(v) else v


# ------------------------------------------------------------- experiments

def compute_mode(cfg: RunConfig, omega0: float | None = None):
    profile = cfg.build_profile()
    grid = mode_solver.Grid1D.symmetric(cfg.mode_half_width, cfg.mode_h)
    omega0 = cfg.omega0[0] if omega0 is None else omega0
    try:
        return profile, mode_solver.compute_mode(profile, omega0, grid)
    except LookupError as exc:
        raise NoModeError(str(exc)) from None


def run_dispersion(cfg: RunConfig, out: Path) -> ExperimentRecord:
    from ._plots import line_plot
    rec = ExperimentRecord("dispersion", {})
    profile = cfg.build_profile()
    grid = mode_solver.Grid1D.symmetric(cfg.mode_half_width, cfg.mode_h)
    rows, primary = [], None
    for om in cfg.omega0:
        cands = mode_solver.solve_dispersion(profile, om, grid)
        if not cands:
            rows.append((om, float("nan"), float("nan"), float("nan")))
            continue
        best = cands[0]
        mode = mode_solver.reconstruct_mode(best.w3, profile, om, best.k0, grid)
        rows.append((om, best.k0, best.boundary_ratio, mode_solver.operator_residual(mode, profile)))
        if om == cfg.omega0[0]:
            primary = mode
    write_csv(out / "dispersion.csv", ["omega", "k0", "boundary_ratio", "residual_L"], rows)
    if primary is None:
        raise NoModeError(f"no localized mode for profile {profile.name!r} at omega={cfg.omega0[0]}")
    m = primary
    e1w1 = profile.eps1(m.x) * m.w1
    write_csv(out / "mode.csv", ["x1", "eps1_w1", "w2_imag", "w3"], zip(m.x, e1w1, m.w2_imag, m.w3))
    floor = 1e-16
    line_plot(out / "mode.svg", [
        (m.x, np.maximum(np.abs(e1w1), floor), "|eps1 w1|", "-"),
        (m.x, np.maximum(np.abs(m.w2_imag), floor), "|w2|", "-"),
        (m.x, np.maximum(np.abs(m.w3), floor), "|w3|", "--"),
    ], "x1", "amplitude", title=f"omega0={m.omega0:g}, k0={m.k0:.6f}", logy=True)
    diag = mode_solver.verify_mode(m, profile)
    print(f"k0 = {m.k0:.8f}")
    rec.scalars = {"k0": m.k0, **diag}
    return rec


def _solve(cfg: RunConfig, mode, profile, eps, h, logdir: Path, tag: str, **overrides):
    scfg = cfg.solver_config(mode, profile, eps, h, **overrides)
    problem = ts.TransmissionProblem(scfg)
    if cfg.dump_matrices:
        dump_triplets(problem.matrix, logdir / f"matrix_{tag}.txt")
    state = ts.solve(problem, log_path=logdir / f"solve_{tag}.jsonl")
    return problem, state


def _sweep_exit(n_failed: int, n_total: int) -> int:
    return EXIT_PARTIAL if n_failed > 0.25 * n_total else EXIT_OK


def run_eps_sweep(cfg: RunConfig, out: Path) -> ExperimentRecord:
    from ._plots import line_plot
    rec = ExperimentRecord("eps-sweep", {})
    profile, mode = compute_mode(cfg)
    logdir = out / "logs"
    logdir.mkdir(exist_ok=True)
    h = cfg.h[0]
    rows, ok_eps, ok_g, failed = [], [], [], []
    for i, eps in enumerate(cfg.eps):
        try:
            _, st = _solve(cfg, mode, profile, eps, h, logdir, f"eps{i}")
        except IterationError as exc:
            log.warning("eps=%g failed: %s", eps, exc)
            rows.append((eps, float("nan")))
            failed.append(eps)
            continue
        g = ts.norm_grad_phi(st.phi)
        rows.append((eps, g))
        if st.converged:
            ok_eps.append(eps)
            ok_g.append(g)
        else:
            log.warning("eps=%g did not converge in %d iterations", eps, st.n)
            failed.append(eps)
    footer = None
    if len(ok_eps) >= 4:
        slope = ansatz.fit_slope(ok_eps, ok_g)
        rec.slopes["norm_grad_phi_L2"] = slope
        footer = ("slope", slope)
        print(f"slope = {slope:.4f}")
    write_csv(out / "eps_sweep.csv", ["eps", "norm_grad_phi_L2"], rows, footer)
    if ok_eps:
        e = np.array(ok_eps)
        ref = ok_g[-1] * (e / e[-1]) ** 1.5
        line_plot(out / "eps_sweep.svg", [(e, ok_g, "||grad phi||_2", "o-"), (e, ref, "eps^(3/2)", "k--")],
                  "eps", "||grad phi||_2", logx=True, logy=True)
    rec.scalars = {"not_converged": failed, "h": h}
    rec.exit_code = _sweep_exit(len(failed), len(cfg.eps))
    return rec


def run_h_sweep(cfg: RunConfig, out: Path) -> ExperimentRecord:
    from ._plots import line_plot
    rec = ExperimentRecord("h-sweep", {})
    profile, mode = compute_mode(cfg)
    logdir = out / "logs"
    logdir.mkdir(exist_ok=True)
    eps = cfg.eps[0]
    rows, failed = [], []
    for i, h in enumerate(cfg.h):
        try:
            problem, st = _solve(cfg, mode, profile, eps, h, logdir, f"h{i}")
        except IterationError as exc:
            log.warning("h=%g failed: %s", h, exc)
            rows.append((h, float("nan")))
            failed.append(h)
            continue
        if not st.converged:
            failed.append(h)
        rows.append((h, ts.div_D_norm(st.phi, problem)))
    # order by decreasing h so the flag reads as "improves under refinement"
    ordered = sorted((r for r in rows if math.isfinite(r[1])), key=lambda r: -r[0])
    vals = [r[1] for r in ordered]
    monotone = len(vals) >= 2 and all(b < a for a, b in zip(vals, vals[1:]))
    write_csv(out / "h_sweep.csv", ["h", "div_D_norm"], rows, ("monotone", monotone))
    if ordered:
        line_plot(out / "h_sweep.svg", [([r[0] for r in ordered], vals, "", "o-")],
                  "h", "||div D||_2", logx=True, logy=True)
    rec.scalars = {"monotone": monotone, "eps": eps, "not_converged": failed}
    if len(vals) >= 2:
        rec.scalars["reduction_factors"] = [a / b for a, b in zip(vals, vals[1:])]
    rec.exit_code = _sweep_exit(len(failed), len(cfg.h))
    return rec


def run_residual_trace(cfg: RunConfig, out: Path) -> ExperimentRecord:
    from ._plots import line_plot
    rec = ExperimentRecord("residual-trace", {})
    profile, mode = compute_mode(cfg)
    logdir = out / "logs"
    logdir.mkdir(exist_ok=True)
    _, st = _solve(cfg, mode, profile, cfg.eps[0], cfg.h[0], logdir, "trace")
    rows = list(enumerate(st.residuals, start=1))
    write_csv(out / "residual_trace.csv", ["n", "residual"], rows)
    positive = [(n, r) for n, r in rows if r > 0]
    if positive:
        line_plot(out / "residual_trace.svg", [([p[0] for p in positive], [p[1] for p in positive], "", "o-")],
                  "iteration n", "residual", logy=True)
    rec.scalars = {"iterations": st.n, "converged": st.converged,
                   "relative_residual": _clean(st.relative_residual)}
    return rec


def run_audit(cfg: RunConfig, out: Path) -> ExperimentRecord:
    rec = ExperimentRecord("audit", {})
    profile, mode = compute_mode(cfg)
    logdir = out / "logs"
    logdir.mkdir(exist_ok=True)
    checks = {}

    # ansatz scalings
    env = cfg.build_envelope()
    norm_rows = []
    for eps in cfg.norm_eps:
        n = ansatz.norms(ansatz.AnsatzField(mode, env, eps, profile))
        norm_rows.append((eps, n["U0_L2"], n["U0_L4"], n["b_L2"], n["b_L1log"]))
    cols = ["U0_L2", "U0_L4", "b_L2", "b_L1log"]
    slopes = {}
    if len(norm_rows) >= 2 and all(r[1] > 0 for r in norm_rows):
        e = [r[0] for r in norm_rows]
        slopes = {c: ansatz.fit_slope(e, [r[i + 1] for r in norm_rows]) for i, c in enumerate(cols)}
        for c, target in (("U0_L2", 0.5), ("U0_L4", 0.75), ("b_L2", 1.5)):
            checks[f"slope_{c}"] = {"value": slopes[c], "target": target,
                                    "pass": abs(slopes[c] - target) <= 0.05}
    write_csv(out / "norm_sweep.csv", ["eps"] + cols, norm_rows,
              ("slope", *[slopes.get(c, "") for c in cols]) if slopes else None)

    # transmission solver invariants over the eps list
    h = cfg.h[0]
    audits, grads = [], []
    for i, eps in enumerate(cfg.eps):
        problem, st = _solve(cfg, mode, profile, eps, h, logdir, f"eps{i}")
        a = ts.estimate_audit(st, problem)
        a["eps"] = eps
        a["converged"] = st.converged
        a["norm_grad_phi_L2"] = ts.norm_grad_phi(st.phi)
        a["div_D_norm"] = ts.div_D_norm(st.phi, problem)
        audits.append(a)
        grads.append(a["norm_grad_phi_L2"])
        nonzero = np.any(problem.load(ts.FemField.zeros(problem.mesh)))
        checks[f"converged[eps={eps:g}]"] = {"pass": bool(st.converged)}
        checks[f"energy_descent[eps={eps:g}]"] = {
            "J_phi": a["energy_J_phi"], "J_0": a["energy_J_0"],
            "pass": bool(a["energy_J_phi"] < a["energy_J_0"]) if nonzero else True}
        checks[f"jump_tangential[eps={eps:g}]"] = {"value": a["jump_tangential"],
                                                   "pass": a["jump_tangential"] <= 1e-10}
    ratios = [a["ratio"] for a in audits if math.isfinite(a["ratio"])]
    if ratios:
        checks["estimate_ratio_bounded"] = {"max_ratio": max(ratios), "bound": cfg.ratio_bound,
                                            "pass": max(ratios) <= cfg.ratio_bound}

    # linear limit: eps3 = 0 must converge in one step to the direct solve
    lin_profile = profile.with_eps3("0", "0")
    lcfg = cfg.solver_config(mode, lin_profile, cfg.eps[0], h, min_iter=1)
    lproblem = ts.TransmissionProblem(lcfg)
    lstate = ts.solve(lproblem)
    direct = ts.solve_linear(lproblem)
    diff = np.concatenate([lstate.phi.phi_plus - direct.phi_plus, lstate.phi.phi_minus - direct.phi_minus])
    scale = max(np.linalg.norm(np.concatenate([direct.phi_plus, direct.phi_minus])), 1e-300)
    rel = float(np.linalg.norm(diff) / scale)
    checks["linear_limit"] = {"iterations": lstate.n, "relative_difference": rel,
                              "pass": lstate.converged and lstate.n == 1 and rel <= 1e-10}

    report = {"checks": checks, "solves": audits, "norm_slopes": slopes}
    if len(grads) >= 4 and all(g > 0 for g in grads):
        report["grad_phi_slope"] = ansatz.fit_slope(cfg.eps, grads)
        rec.slopes["norm_grad_phi_L2"] = report["grad_phi_slope"]
    rec.slopes.update(slopes if len(norm_rows) >= 4 else {})
    write_json(out / "audit.json", report)
    failed = [k for k, v in checks.items() if not v["pass"]]
    for k in failed:
        print(f"audit check failed: {k}: {checks[k]}", file=sys.stderr)
    print(f"audit: {len(checks) - len(failed)}/{len(checks)} checks passed")
    rec.scalars = {"failed_checks": failed}
    rec.exit_code = EXIT_AUDIT if failed else EXIT_OK
    return rec


RUNNERS = {
    "dispersion": run_dispersion,
    "eps-sweep": run_eps_sweep,
    "h-sweep": run_h_sweep,
    "residual-trace": run_residual_trace,
    "audit": run_audit,
}


def run(cfg: RunConfig, out: Path) -> ExperimentRecord:
    out.mkdir(parents=True, exist_ok=True)
    inputs = dataclasses.asdict(cfg)
    write_json(out / "inputs.json", inputs)
    t0 = time.perf_counter()
    try:
        rec = RUNNERS[cfg.experiment](cfg, out)
    except NoModeError as exc:
        rec = ExperimentRecord(cfg.experiment, {}, {"error": str(exc)}, exit_code=EXIT_NO_MODE)
        print(f"error: {exc}", file=sys.stderr)
    rec.inputs = inputs
    rec.wall_time = time.perf_counter() - t0
    write_json(out / "record.json", dataclasses.asdict(rec))
    return rec


def _apply_thread_limit():
    value = os.environ.get("QUASITRANS_THREADS")
    if not value:
        return None
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigurationError(f"QUASITRANS_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits
    try:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:  # pragma: no cover
        pass
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="quasitrans", description=__doc__.split("\n\n")[0])
    parser.add_argument("config", help="YAML run configuration")
    parser.add_argument("--out", help="output directory (default: <config stem>_out)")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_thread_limit()
        cfg = load_config(args.config)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg.output_dir or Path(args.config).with_suffix("").name + "_out")
    try:
        rec = run(cfg, out)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return rec.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
