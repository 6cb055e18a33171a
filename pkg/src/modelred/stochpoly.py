"""Exact term algebra for polynomials with white-noise symbols and memory kernels.

This is the expression language used by the manifold and normal-form layers:
multivariate polynomials over declared variables with Fraction coefficients,
extended by two kinds of stochastic factors,

* bare white-noise symbols ``phi_k`` (independent channels, zero mean,
  delta correlation), and
* exponential-kernel history integrals

      mem(c, u)(tau) = int_{-inf}^{tau} exp(-c (tau - s)) u(s) ds,

  together with their anticipating counterparts

      ant(c, u)(tau) = int_{tau}^{+inf} exp(+c (tau - s)) u(s) ds,

  where the integrand ``u`` is itself a (noise-only) expression, so nested
  integrals like mem(1, mem(1, phi)^2) are representable.

Everything is kept in canonical form: terms with identical factor structure
are merged, zero coefficients are dropped, and terms are sorted under a fixed
graded-lexicographic order so that structural equality is meaningful.
Coefficients are exact rationals; nothing here ever touches floats (the
simulation layer converts on the way out).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

__all__ = [
    "VarKind",
    "Variable",
    "Registry",
    "Grading",
    "Convolution",
    "Term",
    "Poly",
    "RegistryMismatch",
    "UnsupportedOperation",
    "conv",
    "add",
    "mul",
    "differentiate",
    "time_derivative",
    "substitute",
    "truncate",
    "expectation",
    "poly_to_dict",
    "poly_from_dict",
    "poly_to_json",
    "poly_from_json",
]


class RegistryMismatch(ValueError):
    """Raised when combining expressions built over different registries."""


class UnsupportedOperation(ValueError):
    """Raised for operations outside the supported term language."""


class VarKind(str, Enum):
    SLOW = "slow-state"
    FAST = "fast-state"
    GRADING = "grading-parameter"
    AMPLITUDE = "noise-amplitude"


@dataclass(frozen=True)
class Variable:
    name: str
    kind: VarKind
    index: int


def _as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, str):
        return Fraction(value)
    raise TypeError(f"exact coefficient expected, got {type(value).__name__}")


class Registry:
    """Declares the variables a family of polynomials may mention.

    Names are unique and kinds are fixed at declaration.  Polynomials carry a
    reference to their registry and refuse to combine across registries.
    """

    def __init__(self) -> None:
        self._vars: list[Variable] = []
        self._by_name: dict[str, Variable] = {}

    def declare(self, name: str, kind: VarKind) -> "Poly":
        if name in self._by_name:
            raise ValueError(f"variable {name!r} already declared")
        v = Variable(name, VarKind(kind), len(self._vars))
        self._vars.append(v)
        self._by_name[name] = v
        return self.var(name)

    def declare_many(self, names: Iterable[str], kind: VarKind) -> list["Poly"]:
        return [self.declare(n, kind) for n in names]

    def __getitem__(self, name: str) -> Variable:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    @property
    def variables(self) -> tuple[Variable, ...]:
        return tuple(self._vars)

    def var(self, name: str) -> "Poly":
        v = self._by_name[name]
        return Poly(self, (Term(Fraction(1), ((v.index, 1),), (), ()),))

    def noise(self, channel: int) -> "Poly":
        if channel < 1:
            raise ValueError("noise channels are numbered from 1")
        return Poly(self, (Term(Fraction(1), (), (channel,), ()),))

    def const(self, value) -> "Poly":
        c = _as_fraction(value)
        if c == 0:
            return Poly(self, ())
        return Poly(self, (Term(c, (), (), ()),))

    def zero(self) -> "Poly":
        return Poly(self, ())


@dataclass(frozen=True)
class Grading:
    """An order-counting convention: which variables contribute to the degree.

    ``counted`` holds variable indices whose exponents are summed.  When
    ``count_noise`` is set, every noise-symbol occurrence (including those
    buried inside convolution integrands) adds one to the degree as well.
    """

    counted: frozenset
    count_noise: bool = False
    label: str = ""

    @staticmethod
    def of(registry: Registry, names: Iterable[str], count_noise: bool = False,
           label: str = "") -> "Grading":
        idx = frozenset(registry[n].index for n in names)
        return Grading(idx, count_noise, label or "|(" + ",".join(names) + ")|")

    def degree(self, term: "Term") -> int:
        d = sum(e for i, e in term.exps if i in self.counted)
        if self.count_noise:
            d += term.noise_weight()
        return d


def _merge_grading(a: Grading | None, b: Grading | None) -> Grading | None:
    if a is None:
        return b
    if b is None or a == b:
        return a
    return None


@dataclass(frozen=True)
class Convolution:
    """One exponential-kernel integral factor.

    ``future`` flags the anticipating direction; those may appear inside
    coordinate-transform corrections but must never survive in a finalized
    slow evolution equation.  The integrand is restricted to noise-only
    content (no state variables) -- state-dependent prefactors always live
    outside the integral in this term language.
    """

    rate: Fraction
    integrand: "Poly"
    future: bool = False

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("kernel rate must be positive")
        for t in self.integrand.terms:
            if t.exps:
                raise UnsupportedOperation(
                    "convolution integrands must be free of state variables")

    def sort_key(self):
        return (self.rate, self.future, self.integrand.sort_key())

    def noise_weight(self) -> int:
        return max((t.noise_weight() for t in self.integrand.terms), default=0)

    def channels(self) -> frozenset:
        out = set()
        for t in self.integrand.terms:
            out |= t.channels()
        return frozenset(out)

    def __str__(self) -> str:
        kind = "ant" if self.future else "mem"
        return f"{kind}({self.rate}; {self.integrand})"


@dataclass(frozen=True)
class Term:
    """coefficient * prod(var^e) * prod(phi_k) * prod(convolutions)."""

    coef: Fraction
    exps: tuple          # ((var_index, exponent), ...) sorted by index
    noise: tuple         # sorted channel numbers, repetition = power
    convs: tuple         # Convolution factors, sorted by sort_key

    def structure(self):
        return (self.exps, self.noise, tuple(c.sort_key() for c in self.convs))

    def sort_key(self):
        total = sum(e for _, e in self.exps)
        return (total, self.exps, self.noise,
                tuple(c.sort_key() for c in self.convs))

    def noise_weight(self) -> int:
        return len(self.noise) + sum(c.noise_weight() for c in self.convs)

    def channels(self) -> frozenset:
        out = set(self.noise)
        for c in self.convs:
            out |= c.channels()
        return frozenset(out)

    @property
    def is_deterministic(self) -> bool:
        return not self.noise and not self.convs

    def exponent_of(self, index: int) -> int:
        for i, e in self.exps:
            if i == index:
                return e
        return 0

    def scaled(self, factor: Fraction) -> "Term":
        return Term(self.coef * factor, self.exps, self.noise, self.convs)


def _mul_terms(a: Term, b: Term) -> Term:
    exps: dict[int, int] = dict(a.exps)
    for i, e in b.exps:
        exps[i] = exps.get(i, 0) + e
    merged = tuple(sorted((i, e) for i, e in exps.items() if e))
    noise = tuple(sorted(a.noise + b.noise))
    convs = tuple(sorted(a.convs + b.convs, key=Convolution.sort_key))
    return Term(a.coef * b.coef, merged, noise, convs)


class Poly:
    """Canonical-form expression; immutable and safe to share."""

    __slots__ = ("registry", "terms", "grading", "_hash")

    def __init__(self, registry: Registry, terms: tuple,
                 grading: Grading | None = None):
        object.__setattr__(self, "registry", registry)
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "grading", grading)
        object.__setattr__(self, "_hash", None)

    def __setattr__(self, *a):  # immutability guard
        raise AttributeError("Poly is immutable")

    # -- construction ------------------------------------------------------

    @staticmethod
    def from_terms(registry: Registry, terms: Iterable[Term],
                   grading: Grading | None = None) -> "Poly":
        coefs: dict = {}
        exemplar: dict = {}
        for t in terms:
            if t.coef == 0:
                continue
            key = t.structure()
            coefs[key] = coefs.get(key, Fraction(0)) + t.coef
            exemplar.setdefault(key, t)
        out = tuple(sorted(
            (Term(c, exemplar[k].exps, exemplar[k].noise, exemplar[k].convs)
             for k, c in coefs.items() if c != 0),
            key=Term.sort_key))
        return Poly(registry, out, grading)

    def with_grading(self, grading: Grading | None) -> "Poly":
        return Poly(self.registry, self.terms, grading)

    # -- predicates --------------------------------------------------------

    @property
    def is_zero(self) -> bool:
        return not self.terms

    @property
    def is_deterministic(self) -> bool:
        return all(t.is_deterministic for t in self.terms)

    def constant_value(self) -> Fraction | None:
        """The Fraction value if this is a pure constant, else None."""
        if not self.terms:
            return Fraction(0)
        if len(self.terms) == 1:
            t = self.terms[0]
            if not t.exps and t.is_deterministic:
                return t.coef
        return None

    def mentions(self, name: str) -> bool:
        idx = self.registry[name].index
        return any(t.exponent_of(idx) for t in self.terms)

    def has_future_convolutions(self) -> bool:
        def scan(p: "Poly") -> bool:
            for t in p.terms:
                for c in t.convs:
                    if c.future or scan(c.integrand):
                        return True
            return False
        return scan(self)

    # -- arithmetic --------------------------------------------------------

    def _check(self, other: "Poly"):
        if self.registry is not other.registry:
            raise RegistryMismatch("operands built over different registries")

    def _coerce(self, other) -> "Poly":
        if isinstance(other, Poly):
            return other
        return self.registry.const(other)

    def __add__(self, other) -> "Poly":
        other = self._coerce(other)
        self._check(other)
        return Poly.from_terms(self.registry, self.terms + other.terms,
                               _merge_grading(self.grading, other.grading))

    __radd__ = __add__

    def __neg__(self) -> "Poly":
        return Poly(self.registry,
                    tuple(t.scaled(Fraction(-1)) for t in self.terms),
                    self.grading)

    def __sub__(self, other) -> "Poly":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Poly":
        return self._coerce(other) - self

    def __mul__(self, other) -> "Poly":
        other = self._coerce(other)
        self._check(other)
        out = [_mul_terms(a, b) for a in self.terms for b in other.terms]
        return Poly.from_terms(self.registry, out,
                               _merge_grading(self.grading, other.grading))

    __rmul__ = __mul__

    def __pow__(self, n: int) -> "Poly":
        if not isinstance(n, int) or n < 0:
            raise ValueError("only nonnegative integer powers")
        result = self.registry.const(1)
        base = self
        while n:
            if n & 1:
                result = result * base
            base = base * base if n > 1 else base
            n >>= 1
        return result

    def __eq__(self, other) -> bool:
        return (isinstance(other, Poly) and self.registry is other.registry
                and self.terms == other.terms)

    def __hash__(self):
        h = self._hash
        if h is None:
            h = hash(self.sort_key())
            object.__setattr__(self, "_hash", h)
        return h

    def sort_key(self):
        return tuple((t.coef,) + t.sort_key() for t in self.terms)

    # -- display -----------------------------------------------------------

    def __str__(self) -> str:
        if not self.terms:
            return "0"
        names = {v.index: v.name for v in self.registry.variables}
        parts = []
        for t in self.terms:
            factors = []
            for i, e in t.exps:
                factors.append(names[i] if e == 1 else f"{names[i]}^{e}")
            for ch in t.noise:
                factors.append(f"phi{ch}")
            for c in t.convs:
                factors.append(str(c))
            body = "*".join(factors)
            c = t.coef
            if not body:
                piece = str(c)
            elif c == 1:
                piece = body
            elif c == -1:
                piece = f"-{body}"
            else:
                cs = str(c) if c.denominator == 1 else f"({c})"
                piece = f"{cs}*{body}"
            parts.append(piece)
        out = parts[0]
        for piece in parts[1:]:
            out += f" - {piece[1:]}" if piece.startswith("-") else f" + {piece}"
        return out

    __repr__ = __str__

    # -- term helpers used by the solvers -----------------------------------

    def coefficient_of(self, powers: Mapping[str, int]) -> Fraction:
        """Coefficient of the deterministic monomial with exactly these powers."""
        want = tuple(sorted((self.registry[n].index, e)
                            for n, e in powers.items() if e))
        for t in self.terms:
            if t.exps == want and t.is_deterministic:
                return t.coef
        return Fraction(0)


# -- module-level operations -------------------------------------------------

def conv(rate, integrand: Poly, future: bool = False) -> Poly:
    """Wrap an expression in an exponential-kernel integral, as a Poly.

    Deterministic constant integrands integrate out immediately:
    mem(c, k) = k / c (and likewise for the anticipating direction).
    """
    r = _as_fraction(rate)
    if integrand.is_zero:
        return integrand.registry.zero()
    k = integrand.constant_value()
    if k is not None:
        return integrand.registry.const(k / r)
    factor = Convolution(r, integrand, future)
    return Poly(integrand.registry,
                (Term(Fraction(1), (), (), (factor,)),))


def add(a: Poly, b: Poly) -> Poly:
    return a + b


def mul(a: Poly, b: Poly) -> Poly:
    return a * b


def differentiate(p: Poly, name: str) -> Poly:
    """Formal partial derivative; stochastic factors are constants here."""
    v = p.registry[name]
    out = []
    for t in p.terms:
        e = t.exponent_of(v.index)
        if not e:
            continue
        exps = tuple((i, x - 1 if i == v.index else x)
                     for i, x in t.exps if not (i == v.index and x == 1))
        out.append(Term(t.coef * e, tuple((i, x) for i, x in exps if x),
                        t.noise, t.convs))
    return Poly.from_terms(p.registry, out, p.grading)


def time_derivative(p: Poly) -> Poly:
    """d/dtau, using d(mem(c,u)) = u - c*mem(c,u) and d(ant(c,u)) = c*ant(c,u) - u.

    Bare noise symbols are not differentiable; expressions handed here are
    coordinate-transform maps, which never carry bare noise.
    """
    reg = p.registry
    out = reg.zero()
    for t in p.terms:
        if t.noise:
            raise UnsupportedOperation("cannot differentiate bare noise symbols")
        for k, c in enumerate(t.convs):
            rest = Term(t.coef, t.exps, t.noise, t.convs[:k] + t.convs[k + 1:])
            rest_poly = Poly(reg, (rest,))
            wrapped = Poly(reg, (Term(Fraction(1), (), (), (c,)),))
            if c.future:
                out = out + rest_poly * (c.rate * wrapped - c.integrand)
            else:
                out = out + rest_poly * (c.integrand - c.rate * wrapped)
    return out


def substitute(p: Poly, bindings: Mapping[str, Poly]) -> Poly:
    """Simultaneous substitution of variables by expressions, then canonicalize."""
    reg = p.registry
    lifted: dict[int, Poly] = {}
    for name, target in bindings.items():
        if target.registry is not reg:
            raise RegistryMismatch("binding target from a different registry")
        lifted[reg[name].index] = target
    out = reg.zero()
    for t in p.terms:
        piece = Poly(reg, (Term(t.coef, tuple((i, e) for i, e in t.exps
                                              if i not in lifted),
                                t.noise, t.convs),))
        for i, e in t.exps:
            if i in lifted:
                piece = piece * lifted[i] ** e
        out = out + piece
    return out.with_grading(p.grading)


def truncate(p: Poly, order: int, grading: Grading | None = None) -> Poly:
    """Drop every term whose counted degree exceeds ``order``."""
    g = grading or p.grading
    if g is None:
        raise ValueError("no grading attached and none supplied")
    return Poly(p.registry,
                tuple(t for t in p.terms if g.degree(t) <= order),
                p.grading)


# -- expectations ------------------------------------------------------------

def _is_single_bare_noise(p: Poly) -> int | None:
    """Channel number if p is exactly one phi_k with coefficient 1."""
    if len(p.terms) == 1:
        t = p.terms[0]
        if t.coef == 1 and not t.exps and not t.convs and len(t.noise) == 1:
            return t.noise[0]
    return None


def _reduce_component(reg: Registry, bare: tuple, convs: tuple):
    """Expectation of one group of same-channel-entangled stochastic factors.

    Returns a Fraction, or None when no printed identity applies.  Supported:
    zero-mean cancellation for odd channel counts, E[mem(1,phi)^2] = 1/2 (and
    the anticipating twin), and pushing E inside an integral whose integrand
    is independent of everything else in the group.
    """
    counts: dict[int, int] = {}
    for ch in bare:
        counts[ch] = counts.get(ch, 0) + 1
    for c in convs:
        for t in c.integrand.terms:
            for ch in t.noise:
                counts[ch] = counts.get(ch, 0) + 1
            for inner in t.convs:
                for ich in inner.channels():
                    counts[ich] = counts.get(ich, 0) + 1

    if any(n % 2 for n in counts.values()):
        return Fraction(0)
    if bare:
        return None  # E[phi^2] and mixed phi*mem products have no finite identity
    if len(convs) == 1:
        c = convs[0]
        inner, unreduced = expectation(c.integrand)
        if unreduced:
            return None
        k = inner.constant_value()
        if k is None:
            return None
        return k / c.rate
    if len(convs) == 2 and convs[0] == convs[1]:
        c = convs[0]
        if c.rate == 1 and _is_single_bare_noise(c.integrand) is not None:
            return Fraction(1, 2)
    return None


def expectation(p: Poly):
    """Average over the noise: (reduced polynomial, unreduced terms).

    Applies E[phi] = 0, E[mem(c, phi)] = 0, E[mem(1, phi)^2] = 1/2,
    independence across channels, and linearity (E moves through integrals).
    Terms whose moment structure is not covered by those identities are
    returned in the second slot, never silently dropped.
    """
    reg = p.registry
    reduced: list[Term] = []
    unreduced: list[Term] = []
    for t in p.terms:
        if t.is_deterministic:
            reduced.append(t)
            continue
        # group stochastic factors by shared channels (independent groups factorize)
        items: list[tuple[frozenset, object, bool]] = []
        for ch in t.noise:
            items.append((frozenset([ch]), ch, True))
        for c in t.convs:
            items.append((c.channels(), c, False))
        groups: list[dict] = []
        for chans, obj, is_bare in items:
            hit = [g for g in groups if g["chans"] & chans]
            for g in hit[1:]:
                hit[0]["chans"] |= g["chans"]
                hit[0]["bare"] += g["bare"]
                hit[0]["convs"] += g["convs"]
                groups.remove(g)
            if hit:
                g = hit[0]
                g["chans"] |= chans
            else:
                g = {"chans": set(chans), "bare": [], "convs": []}
                groups.append(g)
            (g["bare"] if is_bare else g["convs"]).append(obj)

        factor = Fraction(1)
        ok = True
        for g in groups:
            val = _reduce_component(reg, tuple(g["bare"]), tuple(g["convs"]))
            if val is None:
                ok = False
                break
            factor *= val
            if factor == 0:
                break
        if not ok:
            unreduced.append(t)
        elif factor != 0:
            reduced.append(Term(t.coef * factor, t.exps, (), ()))
    return Poly.from_terms(reg, reduced, p.grading), tuple(unreduced)


# -- JSON expression format ---------------------------------------------------

def poly_to_dict(p: Poly) -> dict:
    terms = []
    names = {v.index: v.name for v in p.registry.variables}
    for t in p.terms:
        entry: dict = {"coef": str(t.coef)}
        if t.exps:
            entry["vars"] = {names[i]: e for i, e in t.exps}
        if t.noise:
            entry["noise"] = list(t.noise)
        if t.convs:
            entry["conv"] = [{
                "rate": str(c.rate),
                "dir": "future" if c.future else "past",
                "arg": poly_to_dict(c.integrand),
            } for c in t.convs]
        terms.append(entry)
    return {"terms": terms}


def poly_from_dict(registry: Registry, data: Mapping) -> Poly:
    out = []
    for entry in data.get("terms", []):
        coef = Fraction(entry["coef"])
        exps = tuple(sorted((registry[n].index, int(e))
                            for n, e in entry.get("vars", {}).items()))
        noise = tuple(sorted(int(c) for c in entry.get("noise", [])))
        convs = tuple(sorted(
            (Convolution(Fraction(c["rate"]),
                         poly_from_dict(registry, c["arg"]),
                         c.get("dir", "past") == "future")
             for c in entry.get("conv", [])),
            key=Convolution.sort_key))
        out.append(Term(coef, exps, noise, convs))
    return Poly.from_terms(registry, out)


def poly_to_json(p: Poly, **kwargs) -> str:
    return json.dumps(poly_to_dict(p), **kwargs)


def poly_from_json(registry: Registry, text: str) -> Poly:
    return poly_from_dict(registry, json.loads(text))
