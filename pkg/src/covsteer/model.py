"""MJLS problem instances: dynamics, Markov chain, cost weights, boundary data
and chance constraints, plus their JSON file format.

Matrices are stored stacked over time so downstream code can index
``model.a[k, i]`` without caring whether the file was time-invariant.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

STOCHASTIC_TOL = 1e-12
PD_MARGIN = 1e-10
SYMMETRY_TOL = 1e-9
MIN_MODE_PROBABILITY = 1e-9


class ModelError(ValueError):
    """Base class for problems with a model file or instance."""


class ModelParseError(ModelError):
    pass


class ModelSchemaError(ModelError):
    pass


class ModelValidationError(ModelError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid model: " + "; ".join(self.violations))


@dataclass(frozen=True)
class ModeDynamics:
    a_mat: np.ndarray
    b_mat: np.ndarray
    g_mat: np.ndarray


@dataclass(frozen=True)
class MarkovChain:
    transition: np.ndarray
    rho0: np.ndarray

    @property
    def num_modes(self) -> int:
        return self.transition.shape[0]


@dataclass(frozen=True)
class MjlsModel:
    """Finite-horizon MJLS covariance steering instance.

    ``a``, ``b``, ``g`` have shape ``(T, N, ., .)``; ``bias`` is ``(T, n_x)``;
    ``q_weight``/``r_weight`` are ``(T, ., .)``.
    """

    a: np.ndarray
    b: np.ndarray
    g: np.ndarray
    chain: MarkovChain
    bias: np.ndarray
    q_weight: np.ndarray
    r_weight: np.ndarray
    mu0: np.ndarray
    sigma0: np.ndarray
    mu_f: np.ndarray
    sigma_f: np.ndarray
    time_invariant: bool = True

    @property
    def horizon(self) -> int:
        return self.a.shape[0]

    @property
    def num_modes(self) -> int:
        return self.a.shape[1]

    @property
    def n_x(self) -> int:
        return self.a.shape[2]

    @property
    def n_u(self) -> int:
        return self.b.shape[3]

    @property
    def n_w(self) -> int:
        return self.g.shape[3]

    @property
    def transition(self) -> np.ndarray:
        return self.chain.transition

    @property
    def rho0(self) -> np.ndarray:
        return self.chain.rho0

    def mode(self, k: int, i: int) -> ModeDynamics:
        return ModeDynamics(self.a[k, i], self.b[k, i], self.g[k, i])

    @classmethod
    def from_modes(cls, modes, chain, horizon, *, q_weight, r_weight, mu0,
                   sigma0, mu_f, sigma_f, bias=None) -> "MjlsModel":
        """Build a model from a list of :class:`ModeDynamics` (broadcast over
        time) or a list of ``horizon`` such lists."""
        if isinstance(modes[0], ModeDynamics):
            per_step = [list(modes)] * horizon
            time_invariant = True
        else:
            per_step = [list(m) for m in modes]
            time_invariant = False
        a = np.array([[m.a_mat for m in step] for step in per_step], dtype=float)
        b = np.array([[m.b_mat for m in step] for step in per_step], dtype=float)
        g = np.array([[m.g_mat for m in step] for step in per_step], dtype=float)
        n_x = a.shape[2]
        return cls(
            a=a, b=b, g=g, chain=chain,
            bias=_per_step(np.zeros(n_x) if bias is None else bias, horizon, 1),
            q_weight=_per_step(q_weight, horizon, 2),
            r_weight=_per_step(r_weight, horizon, 2),
            mu0=np.asarray(mu0, dtype=float), sigma0=np.asarray(sigma0, dtype=float),
            mu_f=np.asarray(mu_f, dtype=float), sigma_f=np.asarray(sigma_f, dtype=float),
            time_invariant=time_invariant,
        )


def _per_step(value, horizon: int, ndim: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == ndim:
        return np.broadcast_to(arr, (horizon,) + arr.shape).copy()
    return arr


@dataclass(frozen=True)
class Halfplane:
    """Constraint ``normal @ v + offset <= 0``."""

    normal: np.ndarray
    offset: float


@dataclass(frozen=True)
class TubeBound:
    d_max: float
    risk: float


@dataclass(frozen=True)
class NormBound:
    u_max: np.ndarray  # per mode
    risk: np.ndarray   # per mode


@dataclass(frozen=True)
class ChanceConstraintSet:
    state_halfplanes: tuple = ()
    state_risk: float = 0.05
    state_tube: Optional[TubeBound] = None
    control_halfplanes: tuple = ()
    control_risk: Optional[np.ndarray] = None
    control_norm: Optional[NormBound] = None
    state_split: Optional[np.ndarray] = None
    control_split: Optional[np.ndarray] = None
    include_terminal: bool = False

    @property
    def is_empty(self) -> bool:
        return (not self.state_halfplanes and self.state_tube is None
                and not self.control_halfplanes and self.control_norm is None)


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def _is_symmetric(m, tol=0.0) -> bool:
    return bool(np.max(np.abs(m - m.T), initial=0.0) <= tol)


def _min_eig(m) -> float:
    return float(np.linalg.eigvalsh(0.5 * (m + m.T)).min())


def validate(model: MjlsModel, cc: Optional[ChanceConstraintSet] = None) -> ValidationReport:
    """Check every invariant of the instance; never raises."""
    from .propagation import propagate_mode_distribution

    out = []
    T, N, n_x = model.horizon, model.num_modes, model.n_x
    if T < 1:
        out.append("horizon must be >= 1")
    if model.a.shape[2:] != (n_x, n_x):
        out.append("A not square")
    if model.b.shape[:3] != (T, N, n_x):
        out.append("B row count differs from n_x")
    if model.g.shape[:3] != (T, N, n_x):
        out.append("G row count differs from n_x")
    if model.bias.shape != (T, n_x):
        out.append("bias has wrong shape")
    if model.q_weight.shape != (T, n_x, n_x):
        out.append("Q has wrong shape")
    if model.r_weight.shape != (T, model.n_u, model.n_u):
        out.append("R has wrong shape")
    for name, v in (("mu0", model.mu0), ("mu_f", model.mu_f)):
        if v.shape != (n_x,):
            out.append(f"{name} has wrong shape")
    for name, m in (("sigma0", model.sigma0), ("sigma_f", model.sigma_f)):
        if m.shape != (n_x, n_x):
            out.append(f"{name} has wrong shape")
    if out:
        return ValidationReport(out)

    P, rho0 = model.transition, model.rho0
    if P.shape != (N, N):
        out.append("transition matrix shape does not match number of modes")
    else:
        if np.any(P < 0):
            out.append("transition has negative entries")
        for r, s in enumerate(P.sum(axis=1)):
            if abs(s - 1.0) > STOCHASTIC_TOL:
                out.append(f"transition row {r} not stochastic (sums to {s:.12g})")
    if rho0.shape != (N,):
        out.append("rho0 length does not match number of modes")
    else:
        if abs(rho0.sum() - 1.0) > STOCHASTIC_TOL:
            out.append("rho0 does not sum to 1")
        if np.any(rho0 <= 0):
            out.append("rho0 entries must be positive")

    for k in range(T):
        Q, R = model.q_weight[k], model.r_weight[k]
        if not _is_symmetric(Q):
            out.append(f"Q[{k}] not symmetric")
        elif _min_eig(Q) < -PD_MARGIN:
            out.append(f"Q[{k}] not positive semidefinite")
        if not _is_symmetric(R):
            out.append(f"R[{k}] not symmetric")
        if _min_eig(R) <= PD_MARGIN:
            out.append(f"R[{k}] not positive definite")
    for name, m in (("sigma0", model.sigma0), ("sigma_f", model.sigma_f)):
        if not _is_symmetric(m):
            out.append(f"{name} not symmetric")
        elif _min_eig(m) <= 0:
            out.append(f"{name} not positive definite")
    if not np.all(np.isfinite(model.a)) or not np.all(np.isfinite(model.b)) \
            or not np.all(np.isfinite(model.g)):
        out.append("dynamics contain non-finite entries")

    if not out:
        rho = propagate_mode_distribution(model.chain, T)
        if rho.min() < MIN_MODE_PROBABILITY:
            k, i = np.unravel_index(np.argmin(rho), rho.shape)
            out.append(f"mode probability rho[{k}][{i}] = {rho[k, i]:.3g} "
                       f"below {MIN_MODE_PROBABILITY:g}")
    if cc is not None:
        out.extend(_validate_cc(cc, model))
    return ValidationReport(out)


def _validate_cc(cc: ChanceConstraintSet, model: MjlsModel) -> list:
    out = []

    def risk_ok(r):
        r = np.atleast_1d(np.asarray(r, dtype=float))
        return bool(np.all((r > 0) & (r <= 0.5)))

    for h in cc.state_halfplanes:
        if h.normal.shape != (model.n_x,):
            out.append("state halfplane normal has wrong length")
    for h in cc.control_halfplanes:
        if h.normal.shape != (model.n_u,):
            out.append("control halfplane normal has wrong length")
    if cc.state_halfplanes and not risk_ok(cc.state_risk):
        out.append("state risk outside (0, 0.5]")
    if cc.state_tube is not None:
        if cc.state_tube.d_max <= 0:
            out.append("d_max must be positive")
        if not risk_ok(cc.state_tube.risk):
            out.append("tube risk outside (0, 0.5]")
    if cc.control_halfplanes and (cc.control_risk is None or not risk_ok(cc.control_risk)):
        out.append("control risk outside (0, 0.5]")
    if cc.control_norm is not None:
        if np.any(cc.control_norm.u_max <= 0):
            out.append("u_max must be positive")
        if not risk_ok(cc.control_norm.risk):
            out.append("control norm risk outside (0, 0.5]")
    if cc.state_split is not None:
        if len(cc.state_split) != len(cc.state_halfplanes):
            out.append("state risk split length differs from halfplane count")
        elif not risk_ok(cc.state_split) or cc.state_split.sum() > cc.state_risk + 1e-15:
            out.append("state risk split exceeds budget")
    if cc.control_split is not None:
        split = np.atleast_2d(cc.control_split)
        if split.shape != (model.num_modes, len(cc.control_halfplanes)):
            out.append("control risk split has wrong shape")
        elif not risk_ok(split) or np.any(split.sum(axis=1) > cc.control_risk + 1e-15):
            out.append("control risk split exceeds budget")
    return out


# ---------------------------------------------------------------- JSON format

_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}
_MAT = {"type": "array", "items": _VEC, "minItems": 1}
_MODE = {
    "type": "object",
    "properties": {"A": _MAT, "B": _MAT, "G": _MAT},
    "required": ["A", "B", "G"],
    "additionalProperties": False,
}
_NUM_OR_VEC = {"oneOf": [_NUM, _VEC]}

MODEL_SCHEMA = {
    "type": "object",
    "properties": {
        "n_x": {"type": "integer", "minimum": 1},
        "n_u": {"type": "integer", "minimum": 1},
        "n_w": {"type": "integer", "minimum": 1},
        "num_modes": {"type": "integer", "minimum": 1},
        "horizon": {"type": "integer", "minimum": 1},
        "modes": {"oneOf": [
            {"type": "array", "items": _MODE, "minItems": 1},
            {"type": "array", "items": {"type": "array", "items": _MODE, "minItems": 1},
             "minItems": 1},
        ]},
        "transition": _MAT,
        "rho0": _VEC,
        "bias": {"oneOf": [_VEC, _MAT]},
        "Q": {"oneOf": [_MAT, {"type": "array", "items": _MAT, "minItems": 1}]},
        "R": {"oneOf": [_MAT, {"type": "array", "items": _MAT, "minItems": 1}]},
        "mu0": _VEC,
        "sigma0": _MAT,
        "mu_f": _VEC,
        "sigma_f": _MAT,
        "chance_constraints": {
            "type": "object",
            "properties": {
                "state_halfplanes": {"type": "array", "items": {
                    "type": "object", "properties": {"a": _VEC, "b": _NUM},
                    "required": ["a", "b"], "additionalProperties": False}},
                "state_risk": _NUM,
                "state_tube": {"type": "object",
                               "properties": {"d_max": _NUM, "risk": _NUM},
                               "required": ["d_max", "risk"], "additionalProperties": False},
                "control_halfplanes": {"type": "array", "items": {
                    "type": "object", "properties": {"f": _VEC, "g": _NUM},
                    "required": ["f", "g"], "additionalProperties": False}},
                "control_risk": _NUM_OR_VEC,
                "control_norm": {"type": "object",
                                 "properties": {"u_max": _NUM_OR_VEC, "risk": _NUM_OR_VEC},
                                 "required": ["u_max", "risk"], "additionalProperties": False},
                "risk_split": {"type": "object",
                               "properties": {"state": _VEC, "control": _MAT},
                               "additionalProperties": False},
                "include_terminal": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
    },
    "required": ["n_x", "n_u", "n_w", "num_modes", "horizon", "modes", "transition",
                 "rho0", "Q", "R", "mu0", "sigma0", "mu_f", "sigma_f"],
    "additionalProperties": False,
}


def _symmetrize(name: str, m: np.ndarray, problems: list) -> np.ndarray:
    asym = np.max(np.abs(m - np.swapaxes(m, -1, -2)), initial=0.0)
    if asym > SYMMETRY_TOL:
        problems.append(f"{name} asymmetric by {asym:.3g}")
        return m
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def _shape_problems(doc: dict) -> list:
    n_x, n_u, n_w, N, T = (doc[k] for k in ("n_x", "n_u", "n_w", "num_modes", "horizon"))
    out = []

    def check(name, value, shape):
        arr = np.asarray(value, dtype=object)
        try:
            got = np.array(value, dtype=float).shape
        except ValueError:
            got = arr.shape
        if got != shape:
            out.append(f"{name} has shape {got}, expected {shape}")

    modes = doc["modes"]
    if isinstance(modes[0], list):
        if len(modes) != T:
            out.append(f"time-varying modes list has {len(modes)} steps, expected {T}")
        steps = modes
    else:
        steps = [modes]
    for k, step in enumerate(steps):
        if len(step) != N:
            out.append(f"modes[{k}] has {len(step)} entries, expected {N}")
        for i, m in enumerate(step):
            check(f"A[{k}][{i}]", m["A"], (n_x, n_x))
            check(f"B[{k}][{i}]", m["B"], (n_x, n_u))
            check(f"G[{k}][{i}]", m["G"], (n_x, n_w))
    check("transition", doc["transition"], (N, N))
    check("rho0", doc["rho0"], (N,))
    for name, shape in (("mu0", (n_x,)), ("mu_f", (n_x,)),
                        ("sigma0", (n_x, n_x)), ("sigma_f", (n_x, n_x))):
        check(name, doc[name], shape)
    if "bias" in doc:
        b = np.array(doc["bias"], dtype=object)
        check("bias", doc["bias"], (n_x,) if b.ndim == 1 else (T, n_x))
    for name, dim in (("Q", n_x), ("R", n_u)):
        arr = np.array(doc[name], dtype=object)
        check(name, doc[name], (dim, dim) if arr.ndim == 2 else (T, dim, dim))
    return out


def model_from_dict(doc: dict):
    """Build ``(model, cc)`` from a parsed JSON document."""
    try:
        jsonschema.validate(doc, MODEL_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ModelSchemaError(f"schema error at {where}: {exc.message}") from None

    problems = _shape_problems(doc)
    if problems:
        raise ModelValidationError(problems)

    T = doc["horizon"]
    modes = doc["modes"]

    def md(m):
        return ModeDynamics(np.array(m["A"], float), np.array(m["B"], float),
                            np.array(m["G"], float))

    if isinstance(modes[0], list):
        mode_list = [[md(m) for m in step] for step in modes]
    else:
        mode_list = [md(m) for m in modes]

    problems = []
    q_w = _symmetrize("Q", np.array(doc["Q"], float), problems)
    r_w = _symmetrize("R", np.array(doc["R"], float), problems)
    sigma0 = _symmetrize("sigma0", np.array(doc["sigma0"], float), problems)
    sigma_f = _symmetrize("sigma_f", np.array(doc["sigma_f"], float), problems)
    if problems:
        raise ModelValidationError(problems)

    chain = MarkovChain(np.array(doc["transition"], float), np.array(doc["rho0"], float))
    model = MjlsModel.from_modes(
        mode_list, chain, T, q_weight=q_w, r_weight=r_w,
        mu0=doc["mu0"], sigma0=sigma0, mu_f=doc["mu_f"], sigma_f=sigma_f,
        bias=doc.get("bias"),
    )
    cc = _cc_from_dict(doc.get("chance_constraints", {}), model.num_modes)
    report = validate(model, cc)
    if not report.ok:
        raise ModelValidationError(report.violations)
    return model, cc


def _per_mode(value, N) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    return np.full(N, float(arr)) if arr.ndim == 0 else arr


def _cc_from_dict(d: dict, N: int) -> ChanceConstraintSet:
    split = d.get("risk_split", {})
    tube = d.get("state_tube")
    norm = d.get("control_norm")
    return ChanceConstraintSet(
        state_halfplanes=tuple(Halfplane(np.array(h["a"], float), float(h["b"]))
                               for h in d.get("state_halfplanes", [])),
        state_risk=float(d.get("state_risk", 0.05)),
        state_tube=TubeBound(float(tube["d_max"]), float(tube["risk"])) if tube else None,
        control_halfplanes=tuple(Halfplane(np.array(h["f"], float), float(h["g"]))
                                 for h in d.get("control_halfplanes", [])),
        control_risk=_per_mode(d.get("control_risk", 0.05), N),
        control_norm=NormBound(_per_mode(norm["u_max"], N), _per_mode(norm["risk"], N))
        if norm else None,
        state_split=np.array(split["state"], float) if "state" in split else None,
        control_split=np.array(split["control"], float) if "control" in split else None,
        include_terminal=bool(d.get("include_terminal", False)),
    )


def model_to_dict(model: MjlsModel, cc: Optional[ChanceConstraintSet] = None) -> dict:
    def mode_dict(k, i):
        return {"A": model.a[k, i].tolist(), "B": model.b[k, i].tolist(),
                "G": model.g[k, i].tolist()}

    T, N = model.horizon, model.num_modes
    if model.time_invariant:
        modes = [mode_dict(0, i) for i in range(N)]
    else:
        modes = [[mode_dict(k, i) for i in range(N)] for k in range(T)]

    def compact(arr):
        if np.all(arr == arr[0]):
            return arr[0].tolist()
        return arr.tolist()

    doc = {
        "n_x": model.n_x, "n_u": model.n_u, "n_w": model.n_w,
        "num_modes": N, "horizon": T, "modes": modes,
        "transition": model.transition.tolist(), "rho0": model.rho0.tolist(),
        "bias": compact(model.bias), "Q": compact(model.q_weight), "R": compact(model.r_weight),
        "mu0": model.mu0.tolist(), "sigma0": model.sigma0.tolist(),
        "mu_f": model.mu_f.tolist(), "sigma_f": model.sigma_f.tolist(),
    }
    if cc is not None and not cc.is_empty:
        d = {}
        if cc.state_halfplanes:
            d["state_halfplanes"] = [{"a": h.normal.tolist(), "b": h.offset}
                                     for h in cc.state_halfplanes]
            d["state_risk"] = cc.state_risk
        if cc.state_tube is not None:
            d["state_tube"] = {"d_max": cc.state_tube.d_max, "risk": cc.state_tube.risk}
        if cc.control_halfplanes:
            d["control_halfplanes"] = [{"f": h.normal.tolist(), "g": h.offset}
                                       for h in cc.control_halfplanes]
            d["control_risk"] = np.asarray(cc.control_risk).tolist()
        if cc.control_norm is not None:
            d["control_norm"] = {"u_max": cc.control_norm.u_max.tolist(),
                                 "risk": cc.control_norm.risk.tolist()}
        split = {}
        if cc.state_split is not None:
            split["state"] = cc.state_split.tolist()
        if cc.control_split is not None:
            split["control"] = np.atleast_2d(cc.control_split).tolist()
        if split:
            d["risk_split"] = split
        if cc.include_terminal:
            d["include_terminal"] = True
        doc["chance_constraints"] = d
    return doc


def load_model(path):
    """Read a JSON model file. Returns ``(MjlsModel, ChanceConstraintSet)``."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ModelParseError(f"cannot read model file {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelParseError(f"{path}: malformed JSON ({exc})") from None
    return model_from_dict(doc)


def save_model(model: MjlsModel, path, cc: Optional[ChanceConstraintSet] = None) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model, cc), indent=1) + "\n")


def benchmark_instance(constrained: bool = True, *, state_constraint: bool = True,
                       q_weight: float = 1.0, r_weight: float = 1.0):
    """Two-mode, T=6 benchmark with a half-plane state constraint
    ``x[1] >= -10`` and a control-norm bound of 8, both at 95%."""
    modes = [
        ModeDynamics(np.array([[-0.2, 1.0], [-0.1, 0.1]]),
                     np.array([[1.0, 0.5], [2.0, 0.0]]), np.eye(2)),
        ModeDynamics(np.array([[0.2, 0.1], [-0.5, 0.1]]),
                     np.array([[0.0, 1.0], [-1.0, 2.0]]), 0.5 * np.eye(2)),
    ]
    chain = MarkovChain(np.array([[0.8, 0.2], [0.9, 0.1]]), np.array([0.3, 0.7]))
    model = MjlsModel.from_modes(
        modes, chain, 6, q_weight=q_weight * np.eye(2), r_weight=r_weight * np.eye(2),
        mu0=[25.0, 40.0], sigma0=6.0 * np.eye(2), mu_f=[5.0, 10.0],
        sigma_f=3.0 * np.eye(2), bias=[0.01, 0.01],
    )
    if not constrained:
        return model, ChanceConstraintSet()
    halfplanes = (Halfplane(np.array([0.0, -1.0]), -10.0),) if state_constraint else ()
    cc = ChanceConstraintSet(
        state_halfplanes=halfplanes,
        state_risk=0.05,
        control_norm=NormBound(np.full(2, 8.0), np.full(2, 0.05)),
    )
    return model, cc


def models_equal(m1: MjlsModel, m2: MjlsModel, atol: float = 0.0) -> bool:
    names = ("a", "b", "g", "bias", "q_weight", "r_weight", "mu0", "sigma0", "mu_f", "sigma_f")
    for n in names:
        x, y = getattr(m1, n), getattr(m2, n)
        if x.shape != y.shape or np.max(np.abs(x - y), initial=0.0) > atol:
            return False
    return (np.allclose(m1.transition, m2.transition, rtol=0, atol=atol)
            and np.allclose(m1.rho0, m2.rho0, rtol=0, atol=atol))
