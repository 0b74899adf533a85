"""Scenario files: a YAML schema, its validation and model construction.

A scenario is a mapping with the top-level blocks ``kind``, ``model``,
``numerics`` and optionally ``cost``, ``control``, ``check`` and
``output``.  Every key is checked against the schema below; unknown keys
are errors, and all errors found in one pass are reported together with
their key paths.

Matrices may be written as nested lists of numbers, as complex strings
(``"1+2j"``), as ``{re: [[...]], im: [[...]]}``, or by name for the
common qubit operators (``sigma_x``, ``sigma_minus``, ...), optionally
scaled: ``{name: sigma_minus, scale: 0.5}``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import lqg
from .errors import QFiltError, ValidationError
from .filtering import FilterModel
from .operators import (
    SIGMA_MINUS,
    SIGMA_PLUS,
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    CouplingSet,
    DensityMatrix,
)

KINDS = (
    "master",
    "filter-diffusive",
    "filter-jump",
    "lqg-run",
    "duality-check",
    "bellman-check",
    "ito-check",
)
QUANTUM_KINDS = ("master", "filter-diffusive", "filter-jump", "ito-check")
LINEAR_KINDS = ("lqg-run", "duality-check", "bellman-check")

NAMED_MATRICES = {
    "identity": np.eye(2, dtype=complex),
    "sigma_x": SIGMA_X,
    "sigma_y": SIGMA_Y,
    "sigma_z": SIGMA_Z,
    "sigma_minus": SIGMA_MINUS,
    "sigma_plus": SIGMA_PLUS,
}

DEFAULT_CLIP_TOL = 1e-10
DEFAULT_CHECK_TOL = {"duality-check": 1e-8, "bellman-check": 1e-6, "ito-check": 1e-10}

# Allowed keys per block; values are documentation only.
SCHEMA: dict[str, dict[str, str]] = {
    "": {
        "kind": "scenario kind",
        "name": "free-form label",
        "model": "model block",
        "numerics": "numerics block",
        "cost": "LQG cost block",
        "control": "open-loop control for quantum filters",
        "check": "settings of *-check kinds",
        "output": "output block",
    },
    "model": {
        "hbar": "positive real, default 1",
        "hamiltonian": "Hermitian matrix",
        "jump_ops": "list of matrices, one per channel",
        "scattering": "optional list of unitaries",
        "diffusive": "0-based diffusive channel indices",
        "counting": "0-based counting channel indices",
        "feedback": "0-based feedback channel indices",
        "initial_state": "density matrix, or {basis: k}, {pure: [...]}, 'maximally_mixed'",
        "free_particle": "{alpha, beta, gamma, eps, mu}",
        "quantum": "{J, Lambda_e, Lambda_f, Minv}",
        "coefficients": "{A, B_e, C_f, F_e, E_f, G, H, J}",
        "belief": "{mean, cov}",
    },
    "model.free_particle": {"alpha": "", "beta": "", "gamma": "", "eps": "", "mu": ""},
    "model.quantum": {"J": "", "Lambda_e": "", "Lambda_f": "", "Minv": ""},
    "model.coefficients": {"A": "", "B_e": "", "C_f": "", "F_e": "", "E_f": "", "G": "", "H": "", "J": ""},
    "model.belief": {"mean": "", "cov": ""},
    "numerics": {
        "T": "horizon",
        "dt": "step",
        "N": "ensemble size",
        "seed": "unsigned 64-bit seed",
        "threads": "worker count",
        "clip_tol": "positivity clipping tolerance",
        "scheme": "kraus or euler",
        "allow_large_step": "skip the master stability guard",
    },
    "cost": {"E_f": "", "H": "", "Omega_T": ""},
    "control": {"constant": "one real per feedback channel"},
    "check": {
        "tolerance": "pass threshold",
        "points": "number of HJB test points",
        "perturbations": "two Omega perturbation sizes",
        "policies": "policy names for the MC comparison",
        "random_model_dim": "also check a random model of this phase-space dimension",
    },
    "output": {"directory": "", "formats": "subset of [csv, json]", "trajectories": "number of trajectory CSVs"},
}

POLICY_NAMES = ("optimal", "zero", "scaled_1.2", "scaled_0.8")


@dataclass
class Scenario:
    """A validated scenario with its model objects built."""

    kind: str
    name: str
    numerics: dict
    output: dict
    check: dict
    raw: dict
    coupling: CouplingSet | None = None
    filter_model: FilterModel | None = None
    initial_state: np.ndarray | None = None
    control: np.ndarray | None = None
    linear: lqg.LinearModel | None = None
    free_particle: dict | None = None
    cost: lqg.CostSpec | None = None
    belief: lqg.GaussianBelief | None = None
    extras: dict = field(default_factory=dict)


class _Collector:
    def __init__(self) -> None:
        self.errors: list[tuple[str, str]] = []

    def add(self, path: str, reason: str) -> None:
        self.errors.append((path, reason))

    def raise_if_any(self) -> None:
        if self.errors:
            lines = "; ".join(f"{p or '<root>'}: {r}" for p, r in self.errors)
            raise ValidationError(f"invalid scenario: {lines}", self.errors)


def _join(base: str, key: str) -> str:
    return f"{base}.{key}" if base else key


def _check_keys(block: Any, schema_key: str, path: str, col: _Collector) -> dict:
    if block is None:
        return {}
    if not isinstance(block, dict):
        col.add(path, "must be a mapping")
        return {}
    allowed = SCHEMA[schema_key]
    for k in block:
        if k not in allowed:
            col.add(_join(path, str(k)), "unknown key")
    return block


def _scalar_complex(v) -> complex:
    if isinstance(v, bool):
        raise ValueError("booleans are not numbers")
    if isinstance(v, (int, float, complex)):
        return complex(v)
    if isinstance(v, str):
        return complex(v.replace(" ", "").replace("i", "j") if "j" not in v else v.replace(" ", ""))
    raise ValueError(f"cannot read {v!r} as a number")


def parse_matrix(value, path: str, col: _Collector, *, real: bool = False, shape=None):
    """Read a matrix from its YAML form; records an error and returns None on failure."""
    try:
        if isinstance(value, str) and value in NAMED_MATRICES:
            mat = NAMED_MATRICES[value].copy()
        elif isinstance(value, dict) and "name" in value:
            extra = set(value) - {"name", "scale"}
            if extra:
                raise ValueError(f"unknown keys {sorted(extra)} in named matrix")
            if value["name"] not in NAMED_MATRICES:
                raise ValueError(f"unknown matrix name {value['name']!r}")
            mat = NAMED_MATRICES[value["name"]] * _scalar_complex(value.get("scale", 1.0))
        elif isinstance(value, dict):
            extra = set(value) - {"re", "im"}
            if extra or "re" not in value:
                raise ValueError("expected keys re and optional im")
            re = np.asarray(value["re"], dtype=float)
            im = np.asarray(value.get("im", np.zeros_like(re)), dtype=float)
            if re.shape != im.shape:
                raise ValueError("re and im shapes differ")
            mat = re + 1j * im
        else:
            arr = np.asarray(value, dtype=object)
            mat = np.vectorize(_scalar_complex, otypes=[complex])(arr) if arr.size else np.zeros(arr.shape, complex)
        mat = np.atleast_2d(np.asarray(mat, dtype=complex))
    except (ValueError, TypeError) as exc:
        col.add(path, f"not a matrix: {exc}")
        return None
    if mat.ndim != 2:
        col.add(path, f"expected a 2-d matrix, got {mat.ndim} dimensions")
        return None
    if not np.all(np.isfinite(mat)):
        col.add(path, "entries must be finite")
        return None
    if shape is not None and mat.shape != shape:
        col.add(path, f"shape {mat.shape} does not match expected {shape}")
        return None
    if real:
        if np.any(mat.imag != 0):
            col.add(path, "must be real")
            return None
        return mat.real.copy()
    return mat


def _number(block: dict, key: str, path: str, col: _Collector, *, default=None, positive=False, integer=False, minimum=None):
    if key not in block:
        if default is None:
            col.add(_join(path, key), "required")
        return default
    v = block[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        col.add(_join(path, key), "must be a number")
        return default
    if integer and (not float(v).is_integer()):
        col.add(_join(path, key), "must be an integer")
        return default
    v = int(v) if integer else float(v)
    if not np.isfinite(v):
        col.add(_join(path, key), "must be finite")
        return default
    if positive and v <= 0:
        col.add(_join(path, key), "must be positive")
    if minimum is not None and v < minimum:
        col.add(_join(path, key), f"must be at least {minimum}")
    return v


def _index_list(block: dict, key: str, path: str, col: _Collector) -> tuple:
    v = block.get(key, [])
    if not isinstance(v, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in v):
        col.add(_join(path, key), "must be a list of integers")
        return ()
    return tuple(v)


def _parse_numerics(raw: dict, kind: str, col: _Collector) -> dict:
    block = _check_keys(raw.get("numerics"), "numerics", "numerics", col)
    if "numerics" not in raw and kind != "ito-check":
        col.add("numerics", "required block missing")
    out: dict[str, Any] = {}
    if kind == "ito-check":
        out["seed"] = _number(block, "seed", "numerics", col, default=0, integer=True, minimum=0)
        return out
    out["T"] = _number(block, "T", "numerics", col, positive=True)
    out["dt"] = _number(block, "dt", "numerics", col, positive=True)
    if out["T"] is not None and out["dt"] is not None and out["dt"] >= out["T"]:
        col.add("numerics.dt", f"dt={out['dt']} must be smaller than numerics.T={out['T']}")
    needs_n = kind in ("filter-diffusive", "filter-jump", "lqg-run", "bellman-check")
    out["N"] = _number(block, "N", "numerics", col, default=None if needs_n else 1, integer=True)
    if out["N"] is not None and out["N"] < 1:
        col.add("numerics.N", "ensemble size must be at least 1")
    out["seed"] = _number(block, "seed", "numerics", col, default=0, integer=True, minimum=0)
    if out["seed"] is not None and out["seed"] >= 2**64:
        col.add("numerics.seed", "must fit in 64 bits")
    out["threads"] = _number(block, "threads", "numerics", col, default=1, integer=True, minimum=1)
    out["clip_tol"] = _number(block, "clip_tol", "numerics", col, default=DEFAULT_CLIP_TOL, positive=True)
    scheme = block.get("scheme", "kraus")
    if scheme not in ("kraus", "euler"):
        col.add("numerics.scheme", "must be 'kraus' or 'euler'")
    out["scheme"] = scheme
    als = block.get("allow_large_step", False)
    if not isinstance(als, bool):
        col.add("numerics.allow_large_step", "must be a boolean")
    out["allow_large_step"] = bool(als)
    return out


def _parse_state(value, dim: int, col: _Collector):
    path = "model.initial_state"
    if value is None:
        col.add(path, "required")
        return None
    if value == "maximally_mixed":
        return DensityMatrix.maximally_mixed(dim).matrix
    if isinstance(value, dict) and set(value) == {"basis"}:
        k = value["basis"]
        if not isinstance(k, int) or not 0 <= k < dim:
            col.add(path + ".basis", f"must be an integer in 0..{dim - 1}")
            return None
        return DensityMatrix.basis(dim, k).matrix
    if isinstance(value, dict) and set(value) == {"pure"}:
        vec = parse_matrix([value["pure"]], path + ".pure", col)
        if vec is None:
            return None
        if vec.shape != (1, dim) or np.linalg.norm(vec) == 0:
            col.add(path + ".pure", f"needs {dim} amplitudes, not all zero")
            return None
        return DensityMatrix.pure(vec[0]).matrix
    mat = parse_matrix(value, path, col, shape=(dim, dim))
    if mat is None:
        return None
    try:
        return DensityMatrix.from_array(mat).matrix
    except QFiltError as exc:
        col.add(path, str(exc))
        return None


def _parse_quantum_model(raw: dict, sc: Scenario, col: _Collector) -> None:
    block = _check_keys(raw.get("model"), "model", "model", col)
    for key in ("free_particle", "quantum", "coefficients", "belief"):
        if key in block:
            col.add(f"model.{key}", f"not used by kind {sc.kind}")
    hbar = _number(block, "hbar", "model", col, default=1.0, positive=True)
    h = parse_matrix(block.get("hamiltonian"), "model.hamiltonian", col) if "hamiltonian" in block else None
    if h is None and "hamiltonian" not in block:
        col.add("model.hamiltonian", "required")
    ops_raw = block.get("jump_ops", [])
    if not isinstance(ops_raw, list):
        col.add("model.jump_ops", "must be a list of matrices")
        ops_raw = []
    ops = [parse_matrix(o, f"model.jump_ops[{i}]", col) for i, o in enumerate(ops_raw)]
    scat = None
    if "scattering" in block:
        s_raw = block["scattering"]
        if not isinstance(s_raw, list):
            col.add("model.scattering", "must be a list of matrices")
        else:
            scat = [parse_matrix(s, f"model.scattering[{i}]", col) for i, s in enumerate(s_raw)]
    roles = {k: _index_list(block, k, "model", col) for k in ("diffusive", "counting", "feedback")}
    if h is None or any(o is None for o in ops) or (scat is not None and any(s is None for s in scat)):
        return
    try:
        sc.coupling = CouplingSet(h, tuple(ops), None if scat is None else tuple(scat), hbar)
    except QFiltError as exc:
        col.add("model", str(exc))
        return
    if sc.kind == "ito-check":
        return
    try:
        sc.filter_model = FilterModel(sc.coupling, roles["diffusive"], roles["counting"], roles["feedback"])
    except QFiltError as exc:
        col.add("model", str(exc))
        return
    if sc.kind == "filter-diffusive" and (not roles["diffusive"] or roles["counting"]):
        col.add("model.diffusive", "filter-diffusive needs diffusive channels and no counting channels")
    if sc.kind == "filter-jump" and (not roles["counting"] or roles["diffusive"]):
        col.add("model.counting", "filter-jump needs counting channels and no diffusive channels")
    sc.initial_state = _parse_state(block.get("initial_state"), sc.coupling.dim, col)
    ctrl = _check_keys(raw.get("control"), "control", "control", col)
    if "constant" in ctrl:
        u = ctrl["constant"]
        if not isinstance(u, list) or len(u) != len(roles["feedback"]):
            col.add("control.constant", f"needs one number per feedback channel ({len(roles['feedback'])})")
        else:
            try:
                sc.control = np.array([float(x) for x in u])
            except (TypeError, ValueError):
                col.add("control.constant", "must be numbers")


def _parse_linear_model(raw: dict, sc: Scenario, col: _Collector) -> None:
    block = _check_keys(raw.get("model"), "model", "model", col)
    for key in ("hamiltonian", "jump_ops", "scattering", "diffusive", "counting", "feedback", "initial_state"):
        if key in block:
            col.add(f"model.{key}", f"not used by kind {sc.kind}")
    if "control" in raw:
        col.add("control", f"not used by kind {sc.kind}")
    hbar = _number(block, "hbar", "model", col, default=1.0, positive=True)
    routes = [k for k in ("free_particle", "quantum", "coefficients") if k in block]
    if len(routes) != 1:
        col.add("model", "exactly one of free_particle, quantum, coefficients is required")
        return
    route = routes[0]
    try:
        if route == "free_particle":
            fp = _check_keys(block["free_particle"], "model.free_particle", "model.free_particle", col)
            vals = {k: _number(fp, k, "model.free_particle", col, default=0.0) for k in ("alpha", "beta", "gamma", "eps")}
            vals["mu"] = _number(fp, "mu", "model.free_particle", col, default=1.0, positive=True)
            if col.errors:
                return
            sc.linear, scal = lqg.free_particle_model(vals["alpha"], vals["beta"], vals["gamma"], vals["eps"], vals["mu"], hbar)
            sc.free_particle = dict(vals, hbar=hbar, scalars=scal)
        elif route == "quantum":
            q = _check_keys(block["quantum"], "model.quantum", "model.quantum", col)
            mats = {}
            for k in ("J", "Lambda_e", "Lambda_f", "Minv"):
                if k not in q:
                    col.add(f"model.quantum.{k}", "required")
                else:
                    mats[k] = parse_matrix(q[k], f"model.quantum.{k}", col, real=k in ("J", "Minv"))
            if col.errors:
                return
            sc.linear = lqg.derive_matrices(mats["J"], mats["Lambda_e"], mats["Lambda_f"], mats["Minv"], hbar)
        else:
            cb = _check_keys(block["coefficients"], "model.coefficients", "model.coefficients", col)
            mats = {}
            for k in ("A", "B_e", "C_f", "F_e", "E_f", "G", "H", "J"):
                if k in cb:
                    mats[k] = parse_matrix(cb[k], f"model.coefficients.{k}", col, real=True)
                elif k in ("A", "B_e", "C_f", "G", "H"):
                    col.add(f"model.coefficients.{k}", "required")
            if col.errors:
                return
            sc.linear = lqg.LinearModel.from_coefficients(
                mats["A"], mats["B_e"], mats["C_f"], mats["G"], mats["H"],
                F_e=mats.get("F_e"), E_f=mats.get("E_f"), J=mats.get("J"), hbar=hbar,
            )
    except QFiltError as exc:
        col.add(f"model.{route}", str(exc))
        return
    m = sc.linear.m
    bel = _check_keys(block.get("belief"), "model.belief", "model.belief", col)
    mean = parse_matrix([bel["mean"]], "model.belief.mean", col, real=True, shape=(1, m)) if "mean" in bel else np.zeros((1, m))
    cov = parse_matrix(bel["cov"], "model.belief.cov", col, real=True, shape=(m, m)) if "cov" in bel else None
    if "cov" not in bel:
        col.add("model.belief.cov", "required")
    if mean is not None and cov is not None:
        try:
            sc.belief = lqg.GaussianBelief(mean[0], cov)
        except QFiltError as exc:
            col.add("model.belief", str(exc))
            return
        if np.any(sc.linear.J) and not sc.belief.admissible(sc.linear.J, sc.linear.hbar):
            col.add("model.belief.cov", "violates the uncertainty bound Sigma + (i hbar/2) J >= 0")
    cost = _check_keys(raw.get("cost"), "cost", "cost", col)
    try:
        e_f = parse_matrix(cost["E_f"], "cost.E_f", col, real=True) if "E_f" in cost else sc.linear.E_f
        h = parse_matrix(cost["H"], "cost.H", col, real=True, shape=(m, m)) if "H" in cost else sc.linear.H
        om = parse_matrix(cost["Omega_T"], "cost.Omega_T", col, real=True, shape=(m, m)) if "Omega_T" in cost else np.zeros((m, m))
        if e_f is not None and e_f.shape != (sc.linear.d_f, m):
            col.add("cost.E_f", f"shape {e_f.shape} does not match ({sc.linear.d_f}, {m})")
        elif e_f is not None and h is not None and om is not None:
            sc.cost = lqg.CostSpec(e_f, h, om)
    except QFiltError as exc:
        col.add("cost", str(exc))


def _parse_check(raw: dict, kind: str, col: _Collector) -> dict:
    block = _check_keys(raw.get("check"), "check", "check", col)
    out = {"tolerance": _number(block, "tolerance", "check", col, default=DEFAULT_CHECK_TOL.get(kind, 1e-8), positive=True)}
    out["points"] = _number(block, "points", "check", col, default=100, integer=True, minimum=1)
    pert = block.get("perturbations", [1e-3, 1e-4])
    if not (isinstance(pert, list) and len(pert) == 2 and all(isinstance(p, (int, float)) and p > 0 for p in pert)):
        col.add("check.perturbations", "must be two positive numbers")
        pert = [1e-3, 1e-4]
    out["perturbations"] = [float(p) for p in pert]
    pol = block.get("policies", list(POLICY_NAMES) if kind == "bellman-check" else [])
    if not isinstance(pol, list) or any(p not in POLICY_NAMES for p in pol):
        col.add("check.policies", f"must be a list drawn from {list(POLICY_NAMES)}")
        pol = []
    out["policies"] = list(pol)
    rmd = block.get("random_model_dim", 0)
    if not isinstance(rmd, int) or isinstance(rmd, bool) or rmd < 0 or rmd % 2:
        col.add("check.random_model_dim", "must be a non-negative even integer")
        rmd = 0
    out["random_model_dim"] = rmd
    return out


def _parse_output(raw: dict, col: _Collector) -> dict:
    block = _check_keys(raw.get("output"), "output", "output", col)
    formats = block.get("formats", ["csv", "json"])
    if not isinstance(formats, list) or any(f not in ("csv", "json") for f in formats):
        col.add("output.formats", "must be a list drawn from [csv, json]")
        formats = ["csv", "json"]
    directory = block.get("directory", "out")
    if not isinstance(directory, str):
        col.add("output.directory", "must be a string")
        directory = "out"
    traj = _number(block, "trajectories", "output", col, default=1, integer=True, minimum=0)
    return {"directory": directory, "formats": list(formats), "trajectories": traj}


def parse_scenario(text: str) -> Scenario:
    """Validate scenario text and build its model objects.

    Raises
    ------
    ValidationError
        With ``errors`` listing every ``(key path, reason)`` found.
    """
    col = _Collector()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValidationError(f"scenario is not valid YAML: {exc}", [("<root>", "parse error")]) from exc
    if not isinstance(raw, dict):
        raise ValidationError("scenario must be a mapping", [("<root>", "must be a mapping")])
    _check_keys(raw, "", "", col)
    kind = raw.get("kind")
    if kind not in KINDS:
        col.add("kind", f"must be one of {list(KINDS)}")
        col.raise_if_any()
    if "model" not in raw:
        col.add("model", "required block missing")
        col.raise_if_any()
    numerics = _parse_numerics(raw, kind, col)
    sc = Scenario(
        kind=kind,
        name=str(raw.get("name", kind)),
        numerics=numerics,
        output=_parse_output(raw, col),
        check=_parse_check(raw, kind, col),
        raw=raw,
    )
    if kind in QUANTUM_KINDS:
        if "cost" in raw:
            col.add("cost", f"not used by kind {kind}")
        _parse_quantum_model(raw, sc, col)
    else:
        _parse_linear_model(raw, sc, col)
    col.raise_if_any()
    return sc


def preset_names() -> list[str]:
    files = resources.files("qfiltctl").joinpath("presets").iterdir()
    return sorted(Path(f.name).stem for f in files if f.name.endswith(".yaml"))


def preset_text(name: str) -> str:
    if name not in preset_names():
        raise ValidationError(f"unknown preset {name!r}; available: {preset_names()}", [("preset", "unknown")])
    return resources.files("qfiltctl").joinpath("presets", f"{name}.yaml").read_text(encoding="utf-8")


__all__ = ["KINDS", "Scenario", "parse_matrix", "parse_scenario", "preset_names", "preset_text"]
