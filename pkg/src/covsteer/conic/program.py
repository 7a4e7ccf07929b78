"""A small conic-program representation.

Variables are named blocks (scalar, vector, matrix or symmetric). Symmetric
blocks are stored as the scaled upper triangle (off-diagonals times sqrt(2)),
so the Euclidean inner product of two stored vectors equals ``Tr(A B)``.

Constraints are affine matrix expressions that must be zero or lie in a
nonnegative, second-order or PSD cone. The objective is
``0.5 x^T P x + q^T x + constant``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

SQRT2 = np.sqrt(2.0)


# ------------------------------------------------------------ vectorization

def triu_pairs(n: int):
    """Upper-triangle index pairs, column-major: (0,0),(0,1),(1,1),(0,2),..."""
    return [(a, b) for b in range(n) for a in range(b + 1)]


def svec(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    n = m.shape[0]
    return np.array([m[a, b] if a == b else SQRT2 * m[a, b] for a, b in triu_pairs(n)])


def smat(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = int(round((np.sqrt(8 * v.size + 1) - 1) / 2))
    m = np.empty((n, n))
    for val, (a, b) in zip(v, triu_pairs(n)):
        if a == b:
            m[a, a] = val
        else:
            m[a, b] = m[b, a] = val / SQRT2
    return m


def svec_operator(n: int) -> sp.csr_matrix:
    """Sparse map from row-major vec(M) (n*n) to svec(M) for symmetric M."""
    rows, cols, vals = [], [], []
    for r, (a, b) in enumerate(triu_pairs(n)):
        if a == b:
            rows.append(r), cols.append(a * n + a), vals.append(1.0)
        else:
            # average both triangles so a slightly asymmetric expression maps sensibly
            rows += [r, r]
            cols += [a * n + b, b * n + a]
            vals += [SQRT2 / 2, SQRT2 / 2]
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(triu_pairs(n)), n * n))


def _transpose_perm(r: int, c: int) -> sp.csr_matrix:
    idx = np.arange(r * c).reshape(r, c).T.ravel()
    return sp.csr_matrix((np.ones(r * c), (np.arange(r * c), idx)), shape=(r * c, r * c))


def _widen(m: sp.csr_matrix, n: int) -> sp.csr_matrix:
    if m.shape[1] == n:
        return m
    m = sp.csr_matrix(m)
    return sp.csr_matrix((m.data, m.indices, m.indptr), shape=(m.shape[0], n))


# -------------------------------------------------------------- expressions

class Affine:
    """Matrix-valued affine expression ``X(x) = mat(coef @ x) + const``.

    ``coef`` maps the program vector to the row-major vectorization of an
    ``(r, c)`` matrix.
    """

    # make numpy defer ``ndarray @ Affine`` and ``np.float64 * Affine`` to us
    __array_ufunc__ = None

    def __init__(self, coef, const):
        self.const = np.atleast_2d(np.asarray(const, dtype=float))
        self.coef = sp.csr_matrix(coef)

    @property
    def shape(self):
        return self.const.shape

    @property
    def nvar(self):
        return self.coef.shape[1]

    @classmethod
    def constant(cls, value, nvar: int = 0) -> "Affine":
        value = np.asarray(value, dtype=float)
        if value.ndim == 1:
            value = value[:, None]
        value = np.atleast_2d(value)
        return cls(sp.csr_matrix((value.size, nvar)), value)

    def _lift(self, other):
        if isinstance(other, Affine):
            return other
        return Affine.constant(other, self.nvar)

    def _aligned(self, other):
        n = max(self.nvar, other.nvar)
        return _widen(self.coef, n), _widen(other.coef, n)

    def __add__(self, other):
        other = self._lift(other)
        if other.shape != self.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        a, b = self._aligned(other)
        return Affine(a + b, self.const + other.const)

    __radd__ = __add__

    def __neg__(self):
        return Affine(-self.coef, -self.const)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, scalar):
        scalar = float(scalar)
        return Affine(self.coef * scalar, self.const * scalar)

    __rmul__ = __mul__

    def __matmul__(self, m):
        m = np.asarray(m, dtype=float)
        if m.ndim == 1:
            m = m[:, None]
        r, c = self.shape
        if m.shape[0] != c:
            raise ValueError(f"cannot multiply {self.shape} by {m.shape}")
        op = sp.kron(sp.identity(r), sp.csr_matrix(m.T))
        return Affine(op @ self.coef, self.const @ m)

    def __rmatmul__(self, m):
        m = np.asarray(m, dtype=float)
        if m.ndim == 1:
            m = m[None, :]
        r, c = self.shape
        if m.shape[1] != r:
            raise ValueError(f"cannot multiply {m.shape} by {self.shape}")
        op = sp.kron(sp.csr_matrix(m), sp.identity(c))
        return Affine(op @ self.coef, m @ self.const)

    @property
    def T(self):
        r, c = self.shape
        return Affine(_transpose_perm(r, c) @ self.coef, self.const.T)

    def sum(self):
        r, c = self.shape
        return Affine(sp.csr_matrix(np.ones((1, r * c))) @ self.coef, [[self.const.sum()]])

    def trace_with(self, m) -> "Affine":
        """Scalar ``Tr(M^T X)`` (``= Tr(M X)`` for symmetric ``M``)."""
        m = np.asarray(m, dtype=float)
        w = sp.csr_matrix(m.reshape(1, -1))
        return Affine(w @ self.coef, [[float(np.sum(m * self.const))]])

    def times_matrix(self, m) -> "Affine":
        """A 1x1 expression multiplied by a constant matrix."""
        if self.shape != (1, 1):
            raise ValueError("times_matrix needs a scalar expression")
        m = np.asarray(m, dtype=float)
        return Affine(sp.kron(sp.csr_matrix(m.reshape(-1, 1)), self.coef), m * self.const[0, 0])

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)[: self.nvar]
        return (self.coef @ x).reshape(self.shape) + self.const

    def rows(self, idx) -> "Affine":
        """Select rows of a column vector expression."""
        r, c = self.shape
        if c != 1:
            raise ValueError("rows() needs a column vector")
        idx = np.atleast_1d(idx)
        return Affine(self.coef[idx], self.const[idx])


def vstack(items) -> Affine:
    items = list(items)
    n = max(it.nvar for it in items)
    if len({it.shape[1] for it in items}) != 1:
        raise ValueError("vstack needs equal column counts")
    return Affine(sp.vstack([_widen(it.coef, n) for it in items]),
                  np.vstack([it.const for it in items]))


def hstack(items) -> Affine:
    return vstack([it.T for it in items]).T


def bmat(grid) -> Affine:
    return vstack([hstack(row) for row in grid])


def as_affine(value, nvar=0) -> Affine:
    return value if isinstance(value, Affine) else Affine.constant(value, nvar)


# ---------------------------------------------------------------- program

@dataclass(frozen=True)
class Block:
    name: str
    kind: str        # scalar | vector | matrix | symmetric
    shape: tuple
    offset: int
    size: int


@dataclass(frozen=True)
class Cone:
    kind: str        # nonneg | soc | psd
    dim: int

    @property
    def rows(self) -> int:
        return self.dim


@dataclass
class Membership:
    expr: Affine
    cone: Cone
    label: str = ""


@dataclass
class Equality:
    expr: Affine     # column vector, constrained to zero
    label: str = ""


class ConicProgram:
    def __init__(self, name: str = ""):
        self.name = name
        self.blocks: dict[str, Block] = {}
        self.nvar = 0
        self.equalities: list[Equality] = []
        self.memberships: list[Membership] = []
        self._p_terms: list = []
        self._q = np.zeros(0)
        self.constant = 0.0

    # variables ---------------------------------------------------------
    def add_variable(self, name: str, kind: str = "vector", *dims: int) -> Affine:
        if name in self.blocks:
            raise ValueError(f"duplicate block {name!r}")
        if kind == "scalar":
            shape, size = (1, 1), 1
        elif kind == "vector":
            (n,) = dims
            shape, size = (n, 1), n
        elif kind == "matrix":
            r, c = dims
            shape, size = (r, c), r * c
        elif kind == "symmetric":
            (n,) = dims
            shape, size = (n, n), n * (n + 1) // 2
        else:
            raise ValueError(f"unknown block kind {kind!r}")
        block = Block(name, kind, shape, self.nvar, size)
        self.blocks[name] = block
        self.nvar += size
        self._q = np.concatenate([self._q, np.zeros(size)])
        return self.var(name)

    def var(self, name: str) -> Affine:
        b = self.blocks[name]
        r, c = b.shape
        if b.kind == "symmetric":
            n = r
            rows, cols, vals = [], [], []
            for j, (a, bb) in enumerate(triu_pairs(n)):
                if a == bb:
                    rows.append(a * n + a), cols.append(b.offset + j), vals.append(1.0)
                else:
                    rows += [a * n + bb, bb * n + a]
                    cols += [b.offset + j] * 2
                    vals += [1 / SQRT2] * 2
            coef = sp.csr_matrix((vals, (rows, cols)), shape=(n * n, self.nvar))
        else:
            coef = sp.csr_matrix(
                (np.ones(b.size), (np.arange(b.size), b.offset + np.arange(b.size))),
                shape=(b.size, self.nvar))
        return Affine(coef, np.zeros((r, c)))

    def unpack(self, x: np.ndarray) -> dict:
        out = {}
        for name, b in self.blocks.items():
            v = np.asarray(x[b.offset:b.offset + b.size], dtype=float)
            if b.kind == "symmetric":
                out[name] = smat(v)
            elif b.kind == "scalar":
                out[name] = float(v[0])
            elif b.kind == "vector":
                out[name] = v.copy()
            else:
                out[name] = v.reshape(b.shape)
        return out

    # constraints -------------------------------------------------------
    def _check(self, expr: Affine):
        if expr.nvar > self.nvar:
            raise ValueError("expression references undeclared variables")

    def add_equality(self, lhs, rhs=0.0, *, symmetric: bool = False, label: str = ""):
        """``lhs == rhs``; with ``symmetric=True`` only the upper triangle is
        constrained, avoiding duplicate rows."""
        expr = as_affine(lhs, self.nvar) - rhs
        self._check(expr)
        r, c = expr.shape
        if symmetric:
            if r != c:
                raise ValueError("symmetric equality needs a square expression")
            idx = [a * r + b for a, b in triu_pairs(r)]
        else:
            idx = list(range(r * c))
        flat = Affine(expr.coef[idx], expr.const.reshape(-1)[idx][:, None])
        self.equalities.append(Equality(flat, label))

    def add_nonneg(self, expr: Affine, label: str = "") -> Membership:
        expr = as_affine(expr, self.nvar)
        self._check(expr)
        r, c = expr.shape
        flat = Affine(expr.coef, expr.const.reshape(-1, 1))
        m = Membership(flat, Cone("nonneg", r * c), label)
        self.memberships.append(m)
        return m

    def add_soc(self, t, v: Affine, label: str = "") -> Membership:
        """``||v|| <= t``."""
        t = as_affine(t, self.nvar)
        if t.shape != (1, 1):
            raise ValueError("SOC head must be scalar")
        stacked = vstack([t, as_affine(v, self.nvar)])
        self._check(stacked)
        m = Membership(stacked, Cone("soc", stacked.shape[0]), label)
        self.memberships.append(m)
        return m

    def add_psd(self, expr: Affine, label: str = "") -> Membership:
        expr = as_affine(expr, self.nvar)
        self._check(expr)
        r, c = expr.shape
        if r != c:
            raise ValueError(f"PSD membership needs a square expression, got {expr.shape}")
        m = Membership(expr, Cone("psd", r), label)
        self.memberships.append(m)
        return m

    # objective ---------------------------------------------------------
    def add_linear_objective(self, expr: Affine):
        expr = as_affine(expr, self.nvar)
        if expr.shape != (1, 1):
            raise ValueError("objective term must be scalar")
        self._q[: expr.nvar] += expr.coef.toarray().ravel()
        self.constant += float(expr.const[0, 0])

    def add_quadratic_objective(self, expr: Affine, weight):
        """Adds ``e^T W e`` for a column-vector expression ``e``; ``W`` PSD."""
        expr = as_affine(expr, self.nvar)
        W = np.atleast_2d(np.asarray(weight, dtype=float))
        F = _widen(expr.coef, self.nvar)
        g = expr.const.reshape(-1)
        self._p_terms.append((F.T @ sp.csr_matrix(2.0 * W) @ F))
        self._q += 2.0 * (F.T @ (W @ g))
        self.constant += float(g @ W @ g)

    @property
    def P(self) -> sp.csc_matrix:
        n = self.nvar
        P = sp.csc_matrix((n, n))
        for term in self._p_terms:
            t = sp.coo_matrix(term)
            P = P + sp.csc_matrix((t.data, (t.row, t.col)), shape=(n, n))
        return sp.csc_matrix(0.5 * (P + P.T))

    @property
    def q(self) -> np.ndarray:
        return self._q.copy()

    def has_quadratic(self) -> bool:
        return self.P.nnz > 0 and abs(self.P).max() > 0

    def objective_value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.constant)

    # diagnostics -------------------------------------------------------
    def residuals(self, x) -> dict:
        """Raw constraint violations at ``x`` (absolute, not scaled)."""
        eq = max((float(np.max(np.abs(e.expr.value(x))))
                  for e in self.equalities), default=0.0)
        cone = 0.0
        for m in self.memberships:
            v = m.expr.value(x)
            if m.cone.kind == "nonneg":
                viol = -float(v.min())
            elif m.cone.kind == "soc":
                v = v.ravel()
                viol = float(np.linalg.norm(v[1:]) - v[0])
            else:
                viol = -float(np.linalg.eigvalsh(0.5 * (v + v.T)).min())
            cone = max(cone, viol)
        return {"equality": eq, "cone": max(cone, 0.0)}

    def data_scale(self) -> float:
        scale = 0.0
        for e in self.equalities:
            scale = max(scale, float(np.max(np.abs(e.expr.const), initial=0.0)))
        for m in self.memberships:
            scale = max(scale, float(np.max(np.abs(m.expr.const), initial=0.0)))
        return scale

    def epigraph_form(self) -> "ConicProgram":
        """Equivalent program with a linear objective: ``0.5 x^T P x`` is
        replaced by a scalar ``t`` with ``||(t-1, sqrt2 F x)|| <= t+1``,
        ``P = F^T F``."""
        out = ConicProgram(self.name + "/epigraph")
        out.blocks = dict(self.blocks)
        out.nvar = self.nvar
        out._q = self._q.copy()
        out.constant = self.constant
        out.equalities = list(self.equalities)
        out.memberships = list(self.memberships)
        t = out.add_variable("__epigraph_t", "scalar")
        P = self.P.toarray()
        if np.any(P):
            lam, V = np.linalg.eigh(P)
            keep = lam > 1e-14 * max(lam.max(), 1.0)
            F = (np.sqrt(lam[keep])[:, None] * V[:, keep].T)
            Fx = Affine(sp.csr_matrix(SQRT2 * F, shape=(F.shape[0], out.nvar)),
                        np.zeros((F.shape[0], 1)))
            out.add_soc(t + 1.0, vstack([t - 1.0, Fx]), label="epigraph")
        out.add_linear_objective(t)
        return out

    def dump(self) -> str:
        """Plain-text listing: blocks, then each constraint as sparse
        ``(row, var, coef)`` triplets plus its constant column."""
        lines = [f"program {self.name or '<unnamed>'} nvar={self.nvar}"]
        for b in self.blocks.values():
            lines.append(f"block {b.name} {b.kind} {'x'.join(map(str, b.shape))} "
                         f"offset={b.offset} size={b.size}")
        P = sp.coo_matrix(self.P)
        lines.append(f"objective constant={self.constant!r}")
        for r, c, v in zip(P.row, P.col, P.data):
            if r <= c:
                lines.append(f"  P {r} {c} {v!r}")
        for j in np.flatnonzero(self._q):
            lines.append(f"  q {j} {self._q[j]!r}")

        def triplets(tag, expr):
            coo = sp.coo_matrix(expr.coef)
            lines.append(tag)
            for r, c, v in sorted(zip(coo.row, coo.col, coo.data)):
                lines.append(f"  {r} {c} {v!r}")
            for r, v in enumerate(expr.const.reshape(-1)):
                if v != 0:
                    lines.append(f"  {r} const {v!r}")

        for n, e in enumerate(self.equalities):
            triplets(f"equality {n} {e.label} rows={e.expr.shape[0]}", e.expr)
        for n, m in enumerate(self.memberships):
            triplets(f"cone {n} {m.label} {m.cone.kind}({m.cone.dim})", m.expr)
        return "\n".join(lines) + "\n"


def add_psd_block_2x2(prog: ConicProgram, top_left: Affine, top_right: Affine,
                      bottom_right: Affine, label: str = "") -> Membership:
    """Constrain ``[[Y, L], [L^T, S]]`` to be PSD (Schur-complement form of
    ``Y >= L S^{-1} L^T`` for ``S`` positive definite)."""
    m, m2 = top_left.shape
    r, c = top_right.shape
    n, n2 = bottom_right.shape
    if m != m2 or n != n2 or r != m or c != n:
        raise ValueError(f"block shapes do not conform: Y{top_left.shape}, "
                         f"L{top_right.shape}, S{bottom_right.shape}")
    return prog.add_psd(bmat([[top_left, top_right], [top_right.T, bottom_right]]), label)


@dataclass
class SolveSettings:
    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    max_iter: int = 200
    force_epigraph: bool = False
    verbose: bool = False

    def relaxed(self, factor: float = 10.0) -> "SolveSettings":
        return SolveSettings(self.feas_tol * factor, self.gap_tol * factor, self.max_iter,
                             self.force_epigraph, self.verbose)


@dataclass
class SolveResult:
    status: str                          # optimal | infeasible | unbounded | numerical_trouble
    values: Optional[dict] = None
    x: Optional[np.ndarray] = None
    objective: Optional[float] = None
    stats: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"
