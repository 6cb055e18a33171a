"""Iterative construction of stochastic normal-form coordinate transforms.

Builds a near-identity change of variables

    x = X + xi(X, Y, tau),      X' = F(X, Y, tau),
    y = Y + eta(X, Y, tau),     Y' = -lambda Y + G(X, Y, tau),

that decouples slow from fast dynamics while keeping the noise projected
correctly.  Each sweep forms the exact defect of every governing equation
under the current transform, truncates it under a working grading, and
distributes every defect term to exactly one unknown:

fast equations (decay rate lambda, effective rate nu = lambda - sum b_j lambda_j
for a term carrying fast powers Y^b):

  * deterministic, nu != 0   -> map correction  term / nu
  * deterministic, nu == 0   -> evolution correction (resonant)
  * noisy, nu > 0            -> map correction with a history integral mem(nu, .)
  * noisy, nu <= 0           -> evolution correction (a map solution would be
                                secular or anticipating)

slow equations (zero linear rate):

  * deterministic, Y-free    -> evolution (anything else would be secular)
  * bare-noise, Y-free       -> evolution (white noise has no bounded primitive)
  * pure history integrals,
    Y-free                   -> split by integration by parts: the integral
                                moves into the map and its integrand re-enters
                                the routing, so the evolution ends up driven
                                by noise with a memory-free leading factor
  * Y-dependent, determ.     -> map correction  -term / (sum b_j lambda_j)
  * Y-dependent, noisy       -> map correction with an anticipating integral
                                (decays with Y; never visible in the slow model)

The working truncation is a per-sweep parameter.  Degrees are counted over
the new fast variables, grading parameters and noise amplitudes, plus one
per noise-symbol occurrence; slow-variable powers deliberately do not count,
which treats slow amplitudes as order one.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Mapping, Sequence

from .cmsolver import ManifoldExpansion, SlowFastSystem
from .stochpoly import (
    Convolution,
    Grading,
    Poly,
    Term,
    UnsupportedOperation,
    conv,
    differentiate,
    expectation,
    substitute,
    time_derivative,
    truncate,
)

__all__ = [
    "CoordinateTransform",
    "HomologicalProblem",
    "NormalFormEngine",
    "SolveFailure",
    "identity_transform",
    "residual",
    "solve_fast_correction",
    "solve_slow_correction",
    "iterate",
    "stochastic_cm",
    "averaged_cm",
    "slow_model",
    "default_engine_grading",
]


class SolveFailure(RuntimeError):
    """A defect term could not be routed; carries the offending term."""


@dataclass(frozen=True)
class CoordinateTransform:
    """Snapshot of the transform after some number of sweeps; immutable."""

    system: SlowFastSystem
    pairs: dict                  # original var name -> new var name
    maps: dict                   # original var name -> Poly in new vars
    evolutions: dict             # new var name -> Poly (rhs in new vars)
    iteration: int = 0

    @property
    def new_slow(self) -> tuple:
        return tuple(self.pairs[v] for v in self.system.slow)

    @property
    def new_fast(self) -> tuple:
        return tuple(self.pairs[v] for v in self.system.fast)

    def fast_weights(self) -> dict:
        """new fast var name -> decay rate."""
        rates = self.system.fast_decay_rates()
        return {self.pairs[v]: rates[v] for v in self.system.fast}


@dataclass
class HomologicalProblem:
    """One equation's defect plus what kind of correction may absorb it."""

    kind: str                    # "fast" | "slow"
    rate: Fraction | None        # decay rate for fast equations
    residual: Poly
    fast_weights: Mapping        # new fast var name -> decay rate


def default_engine_grading(sys: SlowFastSystem, pairs: Mapping) -> Grading:
    from .stochpoly import VarKind
    names = [pairs[v] for v in sys.fast]
    names += list(sys.grading_params)
    names += [v.name for v in sys.registry.variables
              if v.kind == VarKind.AMPLITUDE]
    return Grading.of(sys.registry, names, count_noise=True,
                      label="|(fast',params,amps,noise)|")


def identity_transform(sys: SlowFastSystem, pairs: Mapping) -> CoordinateTransform:
    reg = sys.registry
    maps = {}
    for v in sys.slow + sys.fast:
        maps[v] = reg.var(pairs[v])
    evolutions = {}
    for i, v in enumerate(sys.slow):
        evo = reg.zero()
        for j, w in enumerate(sys.slow):
            evo = evo + sys.A_bar[i][j] * reg.var(pairs[w])
        evolutions[pairs[v]] = evo
    rates = sys.fast_decay_rates()
    for v in sys.fast:
        evolutions[pairs[v]] = -rates[v] * reg.var(pairs[v])
    return CoordinateTransform(sys, dict(pairs), maps, evolutions, 0)


def _substituted_rhs(ct: CoordinateTransform, name: str) -> Poly:
    bind = {v: ct.maps[v] for v in ct.system.slow + ct.system.fast}
    return substitute(ct.system.rhs[name], bind)


def _material_derivative(ct: CoordinateTransform, p: Poly) -> Poly:
    """d/dtau of a map along the current new-variable evolutions."""
    out = time_derivative(p)
    for z, evo in ct.evolutions.items():
        dp = differentiate(p, z)
        if not dp.is_zero:
            out = out + dp * evo
    return out


def residual(ct: CoordinateTransform, order: int | None = None,
             grading: Grading | None = None) -> dict:
    """Exact per-equation defect of the current transform, optionally truncated."""
    out = {}
    for v in ct.system.slow + ct.system.fast:
        defect = _substituted_rhs(ct, v) - _material_derivative(ct, ct.maps[v])
        if order is not None:
            defect = truncate(defect, order, grading)
        out[v] = defect
    return out


def _fast_weight(term: Term, fast_weights: Mapping, registry) -> Fraction:
    total = Fraction(0)
    for name, lam in fast_weights.items():
        total += lam * term.exponent_of(registry[name].index)
    return total


def _strip_stochastic(term: Term):
    """Split a term into its deterministic shell and its time-dependent factor."""
    shell = Term(term.coef, term.exps, (), ())
    tdep = Term(Fraction(1), (), term.noise, term.convs)
    return shell, tdep


def _wrap_history(registry, term: Term, rate: Fraction, future: bool) -> Poly:
    """term with its stochastic factors folded into one kernel integral."""
    shell, tdep = _strip_stochastic(term)
    integrand = Poly(registry, (tdep,))
    return Poly(registry, (shell,)) * conv(rate, integrand, future=future)


def solve_fast_correction(hp: HomologicalProblem):
    """Distribute a fast-equation defect into (map correction, evolution correction)."""
    if hp.kind != "fast":
        raise ValueError("fast solver got a slow problem")
    reg = hp.residual.registry
    d_map, d_evo = reg.zero(), reg.zero()
    for t in hp.residual.terms:
        nu = hp.rate - _fast_weight(t, hp.fast_weights, reg)
        if t.is_deterministic:
            if nu == 0:
                d_evo = d_evo + Poly(reg, (t,))
            else:
                d_map = d_map + Poly(reg, (t.scaled(1 / nu),))
        elif nu > 0:
            d_map = d_map + _wrap_history(reg, t, nu, future=False)
        else:
            # secular (nu == 0) or anticipating (nu < 0) map content; keep the
            # evolution honest instead
            d_evo = d_evo + Poly(reg, (t,))
    return d_map, d_evo


def _slow_route_noise(reg, term: Term, d_map_acc: list, d_evo_acc: list):
    """Y-free noisy slow defect term: evolution if a bare noise factor leads,
    otherwise integrate by parts and recurse on the integrands."""
    if term.noise or not term.convs:
        d_evo_acc.append(term)
        return
    rho = sum((c.rate for c in term.convs), Fraction(0))
    if any(c.future for c in term.convs):
        raise SolveFailure(f"anticipating integral reached a slow evolution: {term}")
    d_map_acc.append(term.scaled(Fraction(-1) / rho))
    for k, c in enumerate(term.convs):
        peeled = Term(term.coef / rho, term.exps, term.noise,
                      term.convs[:k] + term.convs[k + 1:])
        for piece in (Poly(reg, (peeled,)) * c.integrand).terms:
            _slow_route_noise(reg, piece, d_map_acc, d_evo_acc)


def solve_slow_correction(hp: HomologicalProblem):
    """Distribute a slow-equation defect into (map correction, evolution correction)."""
    if hp.kind != "slow":
        raise ValueError("slow solver got a fast problem")
    reg = hp.residual.registry
    map_terms: list = []
    evo_terms: list = []
    for t in hp.residual.terms:
        w = _fast_weight(t, hp.fast_weights, reg)
        if w == 0:
            if t.is_deterministic:
                evo_terms.append(t)
            else:
                _slow_route_noise(reg, t, map_terms, evo_terms)
        else:
            if t.is_deterministic:
                map_terms.append(t.scaled(Fraction(-1) / w))
            else:
                for piece in _wrap_history(reg, t.scaled(Fraction(-1)), w,
                                           future=True).terms:
                    map_terms.append(piece)
    return (Poly.from_terms(reg, map_terms), Poly.from_terms(reg, evo_terms))


def iterate(ct: CoordinateTransform, order: int,
            grading: Grading | None = None) -> CoordinateTransform:
    """One sweep: odd sweeps correct the fast pairs, even sweeps the slow ones."""
    sysm = ct.system
    grading = grading or default_engine_grading(sysm, ct.pairs)
    sweep_fast = (ct.iteration % 2 == 0)
    weights = ct.fast_weights()
    rates = sysm.fast_decay_rates()

    targets = sysm.fast if sweep_fast else sysm.slow
    defects = {}
    for v in targets:
        d = _substituted_rhs(ct, v) - _material_derivative(ct, ct.maps[v])
        defects[v] = truncate(d, order, grading)

    new_maps = dict(ct.maps)
    new_evos = dict(ct.evolutions)
    for v in targets:
        if sweep_fast:
            hp = HomologicalProblem("fast", rates[v], defects[v], weights)
            d_map, d_evo = solve_fast_correction(hp)
        else:
            hp = HomologicalProblem("slow", None, defects[v], weights)
            d_map, d_evo = solve_slow_correction(hp)
        new_maps[v] = new_maps[v] + d_map
        new_evos[ct.pairs[v]] = new_evos[ct.pairs[v]] + d_evo

    out = CoordinateTransform(sysm, ct.pairs, new_maps, new_evos,
                              ct.iteration + 1)
    _assert_invariants(out)
    return out


def _assert_invariants(ct: CoordinateTransform) -> None:
    reg = ct.system.registry
    zero_fast = {z: reg.zero() for z in ct.new_fast}
    for v in ct.system.fast:
        if not substitute(ct.evolutions[ct.pairs[v]], zero_fast).is_zero:
            raise AssertionError(
                f"fast evolution for {ct.pairs[v]} breaks the Y=0 invariance")
    for v in ct.system.slow:
        if ct.evolutions[ct.pairs[v]].has_future_convolutions():
            raise AssertionError(
                f"slow evolution for {ct.pairs[v]} anticipates the noise")


def stochastic_cm(ct: CoordinateTransform, target: str | None = None) -> ManifoldExpansion:
    """Fast-variable map with all new fast coordinates set to zero."""
    sysm = ct.system
    target = target or sysm.fast[0]
    reg = sysm.registry
    zero_fast = {z: reg.zero() for z in ct.new_fast}
    body = substitute(ct.maps[target], zero_fast)
    return ManifoldExpansion(target, body, order=ct.iteration, kind="stochastic")


def averaged_cm(ct: CoordinateTransform, target: str | None = None) -> ManifoldExpansion:
    """Noise average of the stochastic manifold; unreduced moments ride along."""
    sm = stochastic_cm(ct, target)
    body, unreduced = expectation(sm.body)
    return ManifoldExpansion(sm.target, body, order=sm.order, kind="averaged",
                             unreduced=unreduced)


def slow_model(ct: CoordinateTransform, drop_convolutions: bool = False,
               drop_multiplicative: bool = False) -> dict:
    """Slow evolution equations, optionally stripped for simulation.

    ``drop_convolutions`` removes every term carrying a memory integral;
    ``drop_multiplicative`` removes noise terms with slow-state-dependent
    coefficients, leaving purely additive forcing.
    """
    reg = ct.system.registry
    slow_idx = [reg[z].index for z in ct.new_slow]
    out = {}
    for v in ct.system.slow:
        evo = ct.evolutions[ct.pairs[v]]
        if evo.has_future_convolutions():
            raise SolveFailure(f"slow evolution for {ct.pairs[v]} anticipates")
        kept = []
        for t in evo.terms:
            if drop_convolutions and t.convs:
                continue
            if (drop_multiplicative and (t.noise or t.convs)
                    and any(t.exponent_of(i) for i in slow_idx)):
                continue
            kept.append(t)
        out[ct.pairs[v]] = Poly.from_terms(reg, kept)
    return out


class NormalFormEngine:
    """Driver that owns the truncation schedule and iteration bookkeeping."""

    def __init__(self, sys: SlowFastSystem, pairs: Mapping,
                 schedule: Sequence[int], grading: Grading | None = None):
        if not schedule:
            raise ValueError("empty truncation schedule")
        self.system = sys
        self.pairs = dict(pairs)
        self.schedule = list(schedule)
        self.grading = grading or default_engine_grading(sys, pairs)
        self.history: list[CoordinateTransform] = [identity_transform(sys, pairs)]

    def order_for(self, iteration: int) -> int:
        k = min(iteration, len(self.schedule)) - 1
        return self.schedule[k]

    def run(self, iterations: int) -> CoordinateTransform:
        while self.history[-1].iteration < iterations:
            ct = self.history[-1]
            nxt = iterate(ct, self.order_for(ct.iteration + 1), self.grading)
            self.history.append(nxt)
        return self.history[iterations]

    @property
    def current(self) -> CoordinateTransform:
        return self.history[-1]
