"""Deterministic center-manifold computation by series expansion.

Works on systems in separated slow/fast form

    x' = Abar x + Fbar(x, y, params),      (center block, zero-real-part spectrum)
    y' = B y    + G(x, y),                 (stable block, negative spectrum)

with any number of grading parameters treated as state variables with zero
dynamics.  The manifold y = h(x, params) is found as a graded polynomial
ansatz whose coefficients are matched order by order against the invariance
condition

    h_x (Abar x + Fbar(x, h)) = B h + G(x, h),

using exact rational elimination throughout; no floating tolerance enters.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .stochpoly import (
    Grading,
    Poly,
    Registry,
    Term,
    UnsupportedOperation,
    VarKind,
    differentiate,
    substitute,
    truncate,
)

__all__ = [
    "SlowFastSystem",
    "ManifoldExpansion",
    "ResonanceError",
    "SpectralError",
    "slow_manifold",
    "cm_condition",
    "solve_center_manifold",
    "reduce_on_manifold",
]


class ResonanceError(RuntimeError):
    """The order-by-order linear solve was singular at some degree."""

    def __init__(self, order: int, monomials: Sequence[str]):
        self.order = order
        self.monomials = list(monomials)
        super().__init__(
            f"singular coefficient solve at order {order}; "
            f"offending monomials: {', '.join(self.monomials)}")


class SpectralError(RuntimeError):
    """Linear-block spectrum violates the slow/fast splitting assumptions."""


@dataclass
class SlowFastSystem:
    """A system in separated form over one shared registry.

    ``rhs`` maps every variable name (slow, fast, grading) to its full
    right-hand side.  Grading parameters must have identically zero rhs.
    The linear blocks are extracted from the rhs polynomials: ``A_bar`` is
    the slow-slow Jacobian block at the origin, ``B`` the fast-fast block.
    """

    registry: Registry
    slow: tuple
    fast: tuple
    grading_params: tuple
    rhs: dict
    grading: Grading = None
    noise_channels: int = 0

    def __post_init__(self):
        self.slow = tuple(self.slow)
        self.fast = tuple(self.fast)
        self.grading_params = tuple(self.grading_params)
        for g in self.grading_params:
            if not self.rhs.get(g, self.registry.zero()).is_zero:
                raise ValueError(f"grading parameter {g} must have zero rhs")
        if self.grading is None:
            self.grading = Grading.of(self.registry,
                                      self.slow + self.grading_params)
        self.A_bar = self._linear_block(self.slow, self.slow)
        self.B = self._linear_block(self.fast, self.fast)

    def _linear_block(self, rows, cols):
        n, m = len(rows), len(cols)
        out = [[Fraction(0)] * m for _ in range(n)]
        for i, rname in enumerate(rows):
            p = self.rhs[rname]
            for j, cname in enumerate(cols):
                out[i][j] = p.coefficient_of({cname: 1})
        return out

    @property
    def is_deterministic(self) -> bool:
        return all(self.rhs[v].is_deterministic
                   for v in self.slow + self.fast)

    def deterministic_part(self) -> "SlowFastSystem":
        rhs = {k: Poly(self.registry,
                       tuple(t for t in p.terms if t.is_deterministic))
               for k, p in self.rhs.items()}
        return SlowFastSystem(self.registry, self.slow, self.fast,
                              self.grading_params, rhs, self.grading,
                              noise_channels=0)

    def fast_decay_rates(self) -> dict:
        """Per fast variable decay rate; requires a diagonal fast block."""
        rates = {}
        for i, name in enumerate(self.fast):
            for j in range(len(self.fast)):
                if i != j and self.B[i][j] != 0:
                    raise UnsupportedOperation(
                        "fast linear block must be diagonal for rate extraction")
            lam = -self.B[i][i]
            if lam <= 0:
                raise SpectralError(f"fast variable {name} does not decay")
            rates[name] = lam
        return rates

    def check_spectrum(self, tol: float = 1e-9) -> None:
        """Numeric eigenvalue check: slow block center, fast block stable."""
        if self.slow:
            a = np.array([[float(c) for c in row] for row in self.A_bar])
            if a.size and np.max(np.abs(np.linalg.eigvals(a).real)) > tol:
                raise SpectralError("slow block has eigenvalues off the imaginary axis")
        if self.fast:
            b = np.array([[float(c) for c in row] for row in self.B])
            if np.max(np.linalg.eigvals(b).real) > -tol:
                raise SpectralError("fast block has non-decaying eigenvalues")


@dataclass
class ManifoldExpansion:
    """A truncated graph y = h(slow vars, grading params)."""

    target: str
    body: Poly
    order: int
    kind: str = "deterministic"          # deterministic | stochastic | averaged
    unreduced: tuple = ()

    def __post_init__(self):
        if self.kind == "deterministic" and not self.body.is_deterministic:
            raise ValueError("deterministic manifold carries noise content")

    def coefficients(self) -> dict:
        """{(monomial powers as sorted name tuple): Fraction} for tests/reports."""
        names = {v.index: v.name for v in self.body.registry.variables}
        out = {}
        for t in self.body.terms:
            key = tuple(sorted((names[i], e) for i, e in t.exps))
            if t.is_deterministic:
                out[key] = t.coef
        return out


def _single_fast(sys: SlowFastSystem) -> str:
    if len(sys.fast) != 1:
        raise UnsupportedOperation(
            "manifold solving supports exactly one fast variable")
    return sys.fast[0]


def slow_manifold(sys: SlowFastSystem) -> ManifoldExpansion:
    """Leading-order graph: grading params set to zero, fast rhs solved at
    its linear-in-fast order."""
    if not sys.is_deterministic:
        raise UnsupportedOperation("slow manifold wants the deterministic system")
    fast = _single_fast(sys)
    zero = {g: sys.registry.zero() for g in sys.grading_params}
    rhs0 = substitute(sys.rhs[fast], zero)
    b = rhs0.coefficient_of({fast: 1})
    if b == 0:
        raise UnsupportedOperation("fast equation has no linear self-coupling")
    forcing = substitute(rhs0, {fast: sys.registry.zero()})
    if forcing.mentions(fast):
        raise UnsupportedOperation("fast rhs not solvable at leading order")
    body = forcing * Fraction(-1, 1) * (1 / b)
    return ManifoldExpansion(fast, body.with_grading(sys.grading), order=0)


def cm_condition(sys: SlowFastSystem, h: ManifoldExpansion) -> Poly:
    """Invariance defect of the candidate graph, truncated at its order.

    Returns  sum_j dh/dx_j * (slow rhs_j | y:=h)  -  (fast rhs | y:=h);
    the graph is invariant through the stated order iff this vanishes.
    """
    if not h.body.is_deterministic:
        raise UnsupportedOperation("condition applies to deterministic graphs")
    bind = {h.target: h.body}
    out = sys.registry.zero()
    for s in sys.slow:
        out = out + differentiate(h.body, s) * substitute(sys.rhs[s], bind)
    out = out - substitute(sys.rhs[h.target], bind)
    if h.order:
        out = truncate(out, h.order, sys.grading)
    return out


def _monomials(registry: Registry, names, degree: int):
    """All monomials of exactly the given counted degree over ``names``."""
    idx = [registry[n].index for n in names]
    for combo in itertools.combinations_with_replacement(range(len(idx)), degree):
        exps: dict[int, int] = {}
        for k in combo:
            exps[idx[k]] = exps.get(idx[k], 0) + 1
        yield Poly(registry, (Term(Fraction(1),
                                   tuple(sorted(exps.items())), (), ()),))


def _solve_exact(A, b):
    """Gaussian elimination over Fractions; returns None if singular."""
    n = len(b)
    m = [row[:] + [rhs] for row, rhs in zip(A, b)]
    for col in range(n):
        piv = next((r for r in range(col, n) if m[r][col] != 0), None)
        if piv is None:
            return None
        m[col], m[piv] = m[piv], m[col]
        inv = 1 / m[col][col]
        m[col] = [x * inv for x in m[col]]
        for r in range(n):
            if r != col and m[r][col] != 0:
                f = m[r][col]
                m[r] = [x - f * y for x, y in zip(m[r], m[col])]
    return [m[r][n] for r in range(n)]


def solve_center_manifold(sys: SlowFastSystem, order: int) -> ManifoldExpansion:
    """Undetermined-coefficient solve of the invariance condition, order by order.

    The ansatz runs over every monomial of counted degree <= order in the slow
    variables and grading parameters, including the constant (solving, not
    assuming, that it vanishes at the origin).  Each degree gives a linear
    system over the unknown coefficients of that degree; a singular system
    raises ResonanceError naming the monomials involved.
    """
    if not sys.is_deterministic:
        raise UnsupportedOperation("deterministic solver; remove noise first")
    sys.check_spectrum()
    fast = _single_fast(sys)
    names = sys.slow + sys.grading_params
    reg = sys.registry
    h = reg.zero()

    for k in range(order + 1):
        monos = list(_monomials(reg, names, k))
        probe = ManifoldExpansion(fast, h, order=k)
        base = cm_condition(sys, probe)
        base_k = {m: Fraction(0) for m in monos}
        for t in base.terms:
            if sys.grading.degree(t) == k:
                key = Poly(reg, (Term(Fraction(1), t.exps, (), ()),))
                base_k[key] = t.coef
        cols = []
        for m in monos:
            # symmetric difference isolates the part linear in the probe
            # coefficient; even powers cancel and odd powers >= 3 only reach
            # degrees > k for k >= 1 (degree-0 ansatz rows would need a
            # cubic-in-fast nonlinearity to pollute, which none of the
            # supported systems have)
            plus = cm_condition(sys, ManifoldExpansion(fast, h + m, order=k))
            minus = cm_condition(sys, ManifoldExpansion(fast, h - m, order=k))
            probed = (plus - minus) * Fraction(1, 2)
            col = {mm: Fraction(0) for mm in monos}
            for t in probed.terms:
                if sys.grading.degree(t) == k:
                    key = Poly(reg, (Term(Fraction(1), t.exps, (), ()),))
                    col[key] = t.coef
            cols.append(col)
        A = [[cols[j][mi] for j in range(len(monos))] for mi in monos]
        b = [-base_k[mi] for mi in monos]
        sol = _solve_exact(A, b)
        if sol is None:
            raise ResonanceError(k, [str(m) for m in monos])
        for c, m in zip(sol, monos):
            if c != 0:
                h = h + c * m
    h = truncate(h, order, sys.grading)
    return ManifoldExpansion(fast, h.with_grading(sys.grading), order=order)


def reduce_on_manifold(sys: SlowFastSystem, h: ManifoldExpansion,
                       order: int | None = None) -> list:
    """Slow evolution equations with the fast variable replaced by its graph.

    No truncation is applied unless ``order`` is given; substituting a graph
    into polynomial right-hand sides is exact, and the bundled case studies
    compare the untruncated result directly against closed-form fixtures.
    """
    bind = {h.target: h.body}
    out = []
    for s in sys.slow:
        p = substitute(sys.rhs[s], bind)
        if order is not None:
            p = truncate(p, order, sys.grading)
        out.append(p)
    return out
