"""Command-line scenario runner.

Usage::

    qfiltctl <kind> --scenario FILE [--out DIR] [--seed N] [--threads N] [--validate-only]
    qfiltctl <kind> --preset NAME ...
    qfiltctl presets

Exit codes: 0 success, 2 invalid scenario, 3 numerical failure,
4 a ``*-check`` kind ran but its check failed.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import bellman, ito, lqg, master
from .errors import NumericalError, QFiltError, ValidationError
from .filtering import ControlSignal, simulate_ensemble, simulate_trajectory
from .operators import matrix_to_json
from .scenario import KINDS, LINEAR_KINDS, Scenario, parse_scenario, preset_names, preset_text

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_CHECK_FAILED = 4


def _fmt(x: float) -> str:
    return repr(float(x))


class ArtifactWriter:
    """Writes CSV/JSON files under one directory and remembers their hashes."""

    def __init__(self, directory: Path, formats) -> None:
        self.directory = Path(directory)
        self.formats = set(formats)
        self.files: dict[str, str] = {}
        self.directory.mkdir(parents=True, exist_ok=True)

    def _write(self, name: str, data: bytes) -> None:
        (self.directory / name).write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()

    def csv(self, name: str, header, rows) -> None:
        if "csv" not in self.formats:
            return
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])
        self._write(name, buf.getvalue().encode("utf-8"))

    def json(self, name: str, obj) -> None:
        if "json" not in self.formats:
            return
        self._write(name, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))

    def manifest(self, kind: str, seed: int, status: str) -> dict:
        entries = [{"file": k, "sha256": v} for k, v in sorted(self.files.items())]
        man = {"kind": kind, "seed": seed, "status": status, "files": entries}
        data = (json.dumps(man, indent=2, sort_keys=True) + "\n").encode("utf-8")
        (self.directory / "manifest.json").write_bytes(data)
        return man


def _state_header(dim: int) -> list[str]:
    cols = []
    for i in range(dim):
        for j in range(dim):
            cols += [f"re_{i}{j}", f"im_{i}{j}"]
    return cols


def _state_row(rho: np.ndarray) -> list[float]:
    out = []
    for v in np.asarray(rho).ravel():
        out += [v.real, v.imag]
    return out


def _upper_header(m: int, prefix: str) -> list[str]:
    return [f"{prefix}_{i}{j}" for i in range(m) for j in range(i, m)]


def _upper_row(mat: np.ndarray) -> list[float]:
    m = mat.shape[0]
    return [mat[i, j] for i in range(m) for j in range(i, m)]


def _trace_norm(x: np.ndarray) -> float:
    return float(np.sum(np.abs(np.linalg.eigvalsh(0.5 * (x + x.conj().T)))))


@dataclass
class RunResult:
    status: int
    manifest: dict
    summary: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# pipelines


def _run_master(sc: Scenario, out: ArtifactWriter) -> dict:
    num = sc.numerics
    path = master.integrate_master(
        sc.coupling, sc.initial_state, num["T"], num["dt"],
        clip_tol=num["clip_tol"], allow_large_step=num["allow_large_step"],
    )
    out.csv("states.csv", ["t"] + _state_header(sc.coupling.dim), ([t] + _state_row(r) for t, r in zip(path.times, path.states)))
    summary = {
        "final_state": matrix_to_json(path.states[-1]),
        "max_trace_error": float(np.max(np.abs(np.trace(path.states, axis1=1, axis2=2) - 1.0))),
        "steps": len(path.times) - 1,
    }
    out.json("summary.json", summary)
    return summary


def _run_filter(sc: Scenario, out: ArtifactWriter, threads: int) -> dict:
    num = sc.numerics
    model = sc.filter_model
    control = None
    if sc.control is not None:
        u = sc.control.copy()
        control = ControlSignal(lambda t: u)
    ens = simulate_ensemble(
        model, sc.initial_state, num["T"], num["dt"], num["N"], num["seed"],
        control=control, scheme=num["scheme"], clip_tol=num["clip_tol"], threads=threads,
    )
    dim = sc.coupling.dim
    out.csv(
        "ensemble_mean.csv",
        ["t"] + _state_header(dim) + [f"se_{c}" for c in _state_header(dim)],
        ([t] + _state_row(m) + _state_row(s) for t, m, s in zip(ens.times, ens.mean, ens.stderr)),
    )
    for j in range(min(sc.output["trajectories"], num["N"])):
        rec = simulate_trajectory(
            model, sc.initial_state, num["T"], num["dt"], num["seed"], j,
            control=control, scheme=num["scheme"], clip_tol=num["clip_tol"],
        )
        header = ["t"] + [f"dY_{i}" for i in model.diffusive] + [f"dN_{i}" for i in model.counting]
        header += [f"u_{i}" for i in model.feedback] + _state_header(dim)
        rows = []
        for k, t in enumerate(rec.times):
            # increments on row k belong to the step that ends at t_k
            prev = k - 1
            incr = list(rec.dY[prev]) + [float(x) for x in rec.dN[prev]] + list(rec.u[prev]) if k else [0.0] * (
                len(model.diffusive) + len(model.counting) + len(model.feedback)
            )
            rows.append([t] + incr + _state_row(rec.states[k]))
        out.csv(f"trajectory_{j}.csv", header, rows)

    # master-equation oracle on the same grid
    gap = None
    if control is None:
        ref = master.integrate_master(sc.coupling, sc.initial_state, num["T"], num["dt"], clip_tol=num["clip_tol"], allow_large_step=True)
        gap = max(_trace_norm(a - b) for a, b in zip(ens.mean, ref.states))
    se_max = float(np.max(np.abs(ens.stderr.real) + np.abs(ens.stderr.imag)))
    summary = {
        "grid": {"T": num["T"], "dt": num["dt"], "steps": len(ens.times) - 1},
        "N": ens.n,
        "seed": ens.seed,
        "scheme": num["scheme"],
        "final_mean": matrix_to_json(ens.mean[-1]),
        "final_stderr": matrix_to_json(ens.stderr[-1]),
        "max_stderr": se_max,
        "master_trace_gap": gap,
    }
    if model.diffusive:
        summary["innovation_mean_max_abs"] = float(np.max(np.abs(ens.innovation_mean)))
        summary["innovation_var_max_rel_dev"] = float(np.max(np.abs(ens.innovation_var / num["dt"] - 1.0)))
    if model.counting:
        summary["mean_total_counts"] = [float(x) for x in ens.total_counts.mean(axis=0)]
        first = ens.first_jump_times
        summary["first_jump_fraction"] = float(np.mean(np.isfinite(first)))
    out.json("summary.json", summary)
    return summary


def _riccati_paths(sc: Scenario):
    num = sc.numerics
    sigma = lqg.filter_riccati_solve(sc.linear, sc.belief.cov, num["T"], num["dt"])
    omega = lqg.control_riccati_solve(sc.linear, sc.cost, num["T"], num["dt"])
    return sigma, omega


def _write_paths(out: ArtifactWriter, sigma, omega) -> None:
    m = sigma.values.shape[1]
    out.csv("sigma.csv", ["t"] + _upper_header(m, "sigma"), ([t] + _upper_row(s) for t, s in zip(sigma.times, sigma.values)))
    out.csv("omega.csv", ["t"] + _upper_header(m, "omega"), ([t] + _upper_row(o) for t, o in zip(omega.times, omega.values)))


def _run_lqg(sc: Scenario, out: ArtifactWriter, threads: int) -> dict:
    num = sc.numerics
    sigma, omega = _riccati_paths(sc)
    _write_paths(out, sigma, omega)
    best = lqg.min_cost(sc.linear, sc.cost, sigma, omega, sc.belief.mean, sc.belief.cov)
    res = lqg.simulate_closed_loop(sc.linear, sc.cost, sc.belief, num["T"], num["dt"], num["seed"], num["N"], threads=threads)
    heis = [lqg.heisenberg_check(s, sc.linear.J, sc.linear.hbar).min_eig for s in sigma.values]
    summary = {
        "N": num["N"],
        "seed": num["seed"],
        "min_cost": best,
        "mc_mean": res.mean,
        "mc_stderr": res.stderr,
        "z_score": (res.mean - best) / res.stderr if res.stderr > 0 else 0.0,
        "final_sigma": sigma.final.tolist(),
        "initial_omega": omega.values[0].tolist(),
        "heisenberg_min_eig": float(min(heis)),
        "innovation_var_max_rel_dev": float(np.max(np.abs(res.innovation_var / num["dt"] - 1.0), initial=0.0)),
    }
    if sc.free_particle is not None:
        fp = sc.free_particle
        summary["free_particle_crosscheck"] = lqg.free_particle_crosscheck(
            fp["alpha"], fp["beta"], fp["gamma"], fp["eps"], fp["mu"], fp["hbar"],
            sc.belief.cov, sc.cost.Omega_T, sc.belief.mean, num["T"], num["dt"],
        )
    out.json("closed_loop.json", summary)
    return summary


def _run_duality(sc: Scenario, out: ArtifactWriter) -> tuple[dict, bool]:
    num = sc.numerics
    tol = sc.check["tolerance"]
    reports = {"configured": lqg.duality_check(sc.linear, sc.cost, sc.belief.cov, num["T"], num["dt"]).to_json()}
    m = sc.check["random_model_dim"]
    if m:
        rng = np.random.default_rng(num["seed"])
        model = lqg.random_quantum_model(m, 1, 1, rng, sc.linear.hbar)
        cost = lqg.CostSpec.from_model(model, np.eye(m))
        s0 = lqg.random_admissible_cov(m, rng, sc.linear.hbar)
        reports[f"random_{m}d"] = lqg.duality_check(model, cost, s0, num["T"], num["dt"]).to_json()
    ok = all(r["riccati_gap"] <= tol for r in reports.values())
    summary = {"tolerance": tol, "pass": ok, "reports": reports}
    summary["duality_gap"] = max(r["riccati_gap"] for r in reports.values())
    out.json("duality.json", summary)
    return summary, ok


def _run_bellman(sc: Scenario, out: ArtifactWriter, threads: int) -> tuple[dict, bool]:
    num = sc.numerics
    chk = sc.check
    model, cost = sc.linear, sc.cost
    sigma, omega = _riccati_paths(sc)
    value = bellman.quadratic_value(model, cost, sigma, omega)
    rng = np.random.default_rng(num["seed"])
    rows = []
    worst = 0.0
    for pid in range(chk["points"]):
        k = int(rng.integers(0, len(value.times)))
        x = rng.normal(size=model.m)
        s = lqg.random_admissible_cov(model.m, rng, model.hbar) if np.any(model.J) else np.eye(model.m) * rng.uniform(0.1, 2.0)
        r = bellman.hjb_residual_lqg(value, model, cost, value.times[k], x, s)
        rows.append([value.times[k], str(pid), r])
        worst = max(worst, abs(r))
    out.csv("hjb_residuals.csv", ["t", "point", "residual"], rows)

    k_mid = len(value.times) // 2
    x = rng.normal(size=model.m)
    s = sigma.values[k_mid]
    pert = []
    for eps in chk["perturbations"]:
        pv = value.with_omega(value.Omega + eps * np.eye(model.m))
        pert.append(abs(bellman.hjb_residual_lqg(pv, model, cost, value.times[k_mid], x, s)))
    ratio = pert[0] / pert[1] if pert[1] > 0 else float("inf")
    expected = chk["perturbations"][0] / chk["perturbations"][1]
    linear_ok = bool(expected / 1.2 <= ratio <= expected * 1.2)

    summary = {
        "tolerance": chk["tolerance"],
        "max_abs_residual": worst,
        "perturbation_residuals": pert,
        "perturbation_ratio": ratio,
        "perturbation_expected_ratio": expected,
    }
    ok = worst <= chk["tolerance"] and linear_ok
    if chk["policies"]:
        gains = np.array([lqg.optimal_gain(o, model, cost) for o in omega.values])
        table = {"optimal": gains, "zero": np.zeros_like(gains), "scaled_1.2": 1.2 * gains, "scaled_0.8": 0.8 * gains}
        pol = {name: table[name] for name in chk["policies"]}
        cmp = bellman.policy_cost_mc(model, pol, sc.belief, num["T"], num["dt"], num["N"], num["seed"], cost=cost, threads=threads)
        comp = cmp.to_json()
        comp["min_cost"] = lqg.min_cost(model, cost, sigma, omega, sc.belief.mean, sc.belief.cov)
        dominated = True
        if "optimal" in cmp.names:
            for other in cmp.names:
                if other == "optimal":
                    continue
                key = ("optimal", other) if ("optimal", other) in cmp.differences else (other, "optimal")
                d, se = cmp.differences[key]
                diff = d if key[0] == "optimal" else -d
                if diff > 3 * se:
                    dominated = False
        comp["optimal_not_beaten"] = dominated
        out.json("policies.json", comp)
        summary["optimal_not_beaten"] = dominated
        ok = ok and dominated
    summary["pass"] = bool(ok)
    out.json("bellman.json", summary)
    return summary, bool(ok)


def _run_ito(sc: Scenario, out: ArtifactWriter) -> tuple[dict, bool]:
    tol = sc.check["tolerance"]
    germ = ito.germ_from_coupling(sc.coupling)
    rep = ito.check_pseudo_unitarity(germ, tol)
    names = ("scattering_unitarity", "creation_annihilation", "drift_dissipation")
    summary = {
        "tolerance": tol,
        "pass": bool(rep.ok),
        "residuals": {n: {"value": float(v), "pass": bool(v <= tol)} for n, v in zip(names, rep.residuals)},
        "germ": germ.to_json(),
    }
    out.json("ito.json", summary)
    return summary, bool(rep.ok)


def run_scenario(sc: Scenario, out_dir: str | Path | None = None, *, threads: int | None = None) -> RunResult:
    """Execute one scenario and write its artifacts plus ``manifest.json``.

    Numerical failures are reported in the manifest (status ``numerical``)
    and give exit code 3; failed checks give 4.
    """
    directory = Path(out_dir) if out_dir is not None else Path(sc.output["directory"])
    out = ArtifactWriter(directory, sc.output["formats"])
    threads = threads or sc.numerics.get("threads", 1)
    status = EXIT_OK
    summary: dict = {}
    try:
        if sc.kind == "master":
            summary = _run_master(sc, out)
        elif sc.kind in ("filter-diffusive", "filter-jump"):
            summary = _run_filter(sc, out, threads)
        elif sc.kind == "lqg-run":
            summary = _run_lqg(sc, out, threads)
        elif sc.kind == "duality-check":
            summary, ok = _run_duality(sc, out)
            status = EXIT_OK if ok else EXIT_CHECK_FAILED
        elif sc.kind == "bellman-check":
            summary, ok = _run_bellman(sc, out, threads)
            status = EXIT_OK if ok else EXIT_CHECK_FAILED
        elif sc.kind == "ito-check":
            summary, ok = _run_ito(sc, out)
            status = EXIT_OK if ok else EXIT_CHECK_FAILED
    except NumericalError as exc:
        where = f" in {exc.module}" if exc.module else ""
        at = f" at step {exc.step}" if exc.step is not None else ""
        dt = sc.numerics.get("dt")
        hint = f"; try numerics.dt <= {dt / 2:g}" if dt else ""
        summary = {"error": f"{type(exc).__name__}{where}{at}: {exc}{hint}"}
        out.json("error.json", summary)
        status = EXIT_NUMERICAL
    label = {EXIT_OK: "ok", EXIT_NUMERICAL: "numerical", EXIT_CHECK_FAILED: "check-failed"}[status]
    manifest = out.manifest(sc.kind, int(sc.numerics.get("seed", 0)), label)
    return RunResult(status, manifest, summary)


# ---------------------------------------------------------------------------
# argument handling


def retarget(text: str, kind: str) -> str:
    """Point a scenario at another kind of the same family.

    A linear-model scenario may be run as ``lqg-run``, ``duality-check`` or
    ``bellman-check``; a quantum-model one as ``master``, ``filter-*`` or
    ``ito-check`` (validation then enforces what each kind needs).
    Crossing families is a validation error.
    """
    raw = yaml.safe_load(text)
    if not isinstance(raw, dict) or raw.get("kind") == kind or raw.get("kind") not in KINDS:
        return text
    same = (raw["kind"] in LINEAR_KINDS) == (kind in LINEAR_KINDS)
    if not same:
        raise ValidationError(
            f"scenario kind {raw['kind']!r} cannot run as {kind!r}", [("kind", f"incompatible with subcommand {kind}")]
        )
    raw["kind"] = kind
    return yaml.safe_dump(raw, sort_keys=False)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qfiltctl", description="Quantum filtering and LQG control scenarios.")
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} scenario")
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--scenario", type=Path, help="scenario YAML file")
        src.add_argument("--preset", help="name of a built-in scenario")
        p.add_argument("--out", type=Path, help="output directory (overrides output.directory)")
        p.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides numerics.seed)")
        p.add_argument("--threads", type=int, help="worker threads for ensembles")
        p.add_argument("--validate-only", action="store_true", help="parse and validate, then exit")
    sub.add_parser("presets", help="list the built-in scenarios")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "presets":
        for name in preset_names():
            print(name)
        return EXIT_OK
    try:
        text = args.scenario.read_text(encoding="utf-8") if args.scenario else preset_text(args.preset)
        sc = parse_scenario(retarget(text, args.command))
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ValidationError("--seed must be an unsigned 64-bit integer", [("--seed", "out of range")])
            sc.numerics["seed"] = args.seed
        if args.threads is not None and args.threads < 1:
            raise ValidationError("--threads must be at least 1", [("--threads", "must be at least 1")])
    except OSError as exc:
        print(f"error: cannot read scenario: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for path, reason in exc.errors:
            print(f"  {path}: {reason}", file=sys.stderr)
        return EXIT_VALIDATION
    if args.validate_only:
        print(f"{sc.kind}: scenario is valid")
        return EXIT_OK
    try:
        result = run_scenario(sc, args.out, threads=args.threads)
    except QFiltError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if result.status == EXIT_NUMERICAL:
        print(f"numerical failure: {result.summary['error']}", file=sys.stderr)
    elif result.status == EXIT_CHECK_FAILED:
        print(f"{sc.kind}: check FAILED", file=sys.stderr)
    else:
        print(f"{sc.kind}: ok ({len(result.manifest['files'])} files)")
    return result.status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
