"""Arithmetic over the paired fields Z_p × Z_q with q | p-1.

Exponentiation maps the Z_q component into Z_p through a q-th root of unity
ω: ``exp((x_p, x_q)) = (ω^x_q mod p, -)``. The Z_q component of the result
has no meaning, so it is marked invalid ("poisoned"); feeding it to another
exponentiation is an error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .ir import MuGraphError


class FieldError(MuGraphError):
    pass


class DivByZero(FieldError):
    def __init__(self, field_name: str):
        super().__init__(f"division by zero in Z_{field_name}")
        self.field = field_name


class NonResidue(FieldError):
    def __init__(self, field_name: str, value: int):
        super().__init__(f"{value} is not a quadratic residue in Z_{field_name}")
        self.field = field_name
        self.value = value


class PoisonedExponent(FieldError):
    pass


def is_prime(n: int) -> bool:
    if n < 2:
        return False
    i = 2
    while i * i <= n:
        if n % i == 0:
            return False
        i += 1
    return True


def egcd_inverse(a: int, m: int) -> int:
    """Inverse of ``a`` modulo ``m`` by the extended Euclidean algorithm."""
    r0, r1, s0, s1 = a % m, m, 1, 0
    while r1:
        qt = r0 // r1
        r0, r1 = r1, r0 - qt * r1
        s0, s1 = s1, s0 - qt * s1
    if r0 != 1:
        raise ZeroDivisionError(f"{a} has no inverse modulo {m}")
    return s0 % m


def multiplicative_order(a: int, p: int) -> int:
    x, k = a % p, 1
    while x != 1:
        x = x * a % p
        k += 1
        if k > p:
            raise ValueError(f"{a} is not a unit modulo {p}")
    return k


@dataclass(frozen=True)
class FieldParams:
    p: int = 227
    q: int = 113
    omega_base: int = 4

    def __post_init__(self) -> None:
        if not (is_prime(self.p) and is_prime(self.q)):
            raise ValueError("p and q must be prime")
        if (self.p - 1) % self.q:
            raise ValueError("q must divide p - 1")
        if self.omega_base % self.p == 1 or pow(self.omega_base, self.q, self.p) != 1:
            raise ValueError(f"{self.omega_base} is not a primitive {self.q}-th root of unity mod {self.p}")

    @classmethod
    def with_root(cls, p: int, q: int) -> "FieldParams":
        """Parameters with the smallest element of order q as ω base."""
        for g in range(2, p):
            if pow(g, q, p) == 1:
                return cls(p, q, g)
        raise ValueError(f"no element of order {q} mod {p}")

    @cached_property
    def tables(self) -> "FieldTables":
        return FieldTables.build(self)


@dataclass(frozen=True)
class FieldTables:
    inv_p: np.ndarray
    inv_q: np.ndarray
    sqrt_p: np.ndarray  # -1 for non-residues
    sqrt_q: np.ndarray
    nonres_p: int
    nonres_q: int

    @classmethod
    def build(cls, fp: FieldParams) -> "FieldTables":
        def inv(m):
            t = np.zeros(m, dtype=np.int64)
            for a in range(1, m):
                t[a] = pow(a, m - 2, m)
            return t

        def roots(m):
            t = np.full(m, -1, dtype=np.int64)
            for r in range(m - 1, -1, -1):  # descending so the smaller root wins
                t[r * r % m] = r
            return t

        sp, sq = roots(fp.p), roots(fp.q)
        return cls(inv(fp.p), inv(fp.q), sp, sq, int(np.argmax(sp < 0)), int(np.argmax(sq < 0)))


# ---------------------------------------------------------------------------
# scalars


@dataclass(frozen=True, slots=True)
class FFValue:
    xp: int
    xq: int | None  # None when poisoned by an exponentiation


DEFAULT_FIELD = FieldParams()


def _q(a: FFValue, b: FFValue, f) -> int | None:
    return None if a.xq is None or b.xq is None else f(a.xq, b.xq)


def ff_add(a: FFValue, b: FFValue, fp: FieldParams = DEFAULT_FIELD) -> FFValue:
    return FFValue((a.xp + b.xp) % fp.p, _q(a, b, lambda x, y: (x + y) % fp.q))


def ff_sub(a: FFValue, b: FFValue, fp: FieldParams = DEFAULT_FIELD) -> FFValue:
    return FFValue((a.xp - b.xp) % fp.p, _q(a, b, lambda x, y: (x - y) % fp.q))


def ff_mul(a: FFValue, b: FFValue, fp: FieldParams = DEFAULT_FIELD) -> FFValue:
    return FFValue(a.xp * b.xp % fp.p, _q(a, b, lambda x, y: x * y % fp.q))


def ff_div(a: FFValue, b: FFValue, fp: FieldParams = DEFAULT_FIELD) -> FFValue:
    if b.xp % fp.p == 0:
        raise DivByZero("p")
    if b.xq is not None and b.xq % fp.q == 0:
        raise DivByZero("q")
    xp = a.xp * egcd_inverse(b.xp, fp.p) % fp.p
    return FFValue(xp, _q(a, b, lambda x, y: x * egcd_inverse(y, fp.q) % fp.q))


def ff_exp(a: FFValue, omega: int, fp: FieldParams = DEFAULT_FIELD) -> FFValue:
    if a.xq is None:
        raise PoisonedExponent("exponent depends on the result of another exponentiation")
    return FFValue(pow(omega, a.xq, fp.p), None)


def ff_sqrt(a: FFValue, fp: FieldParams = DEFAULT_FIELD) -> FFValue:
    """Smaller square root in each field; NonResidue if none exists."""
    t = fp.tables
    rp = int(t.sqrt_p[a.xp % fp.p])
    if rp < 0:
        raise NonResidue("p", a.xp)
    if a.xq is None:
        return FFValue(rp, None)
    rq = int(t.sqrt_q[a.xq % fp.q])
    if rq < 0:
        raise NonResidue("q", a.xq)
    return FFValue(rp, rq)


def is_residue(x: int, p: int) -> bool:
    """Euler's criterion (0 counts as a residue)."""
    x %= p
    return x == 0 or pow(x, (p - 1) // 2, p) == 1


# ---------------------------------------------------------------------------
# tensors


@dataclass(frozen=True)
class FFTensor:
    xp: np.ndarray
    xq: np.ndarray
    q_valid: bool = True

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.xp.shape)

    def value(self, index) -> FFValue:
        return FFValue(int(self.xp[index]), int(self.xq[index]) if self.q_valid else None)

    def same(self, other: "FFTensor") -> np.ndarray:
        """Boolean mask of elements that agree (Z_q compared only if both valid)."""
        eq = self.xp == other.xp
        if self.q_valid and other.q_valid:
            eq &= self.xq == other.xq
        return eq

    def to_json(self) -> dict:
        return {"shape": list(self.shape), "p": self.xp.ravel().tolist(),
                "q": self.xq.ravel().tolist() if self.q_valid else None}


def sample_tensor(shape, rng: np.random.Generator, fp: FieldParams = DEFAULT_FIELD) -> FFTensor:
    return FFTensor(rng.integers(0, fp.p, size=shape, dtype=np.int64),
                    rng.integers(0, fp.q, size=shape, dtype=np.int64))


def sample_inputs(shapes, rng: np.random.Generator, fp: FieldParams = DEFAULT_FIELD) -> list[FFTensor]:
    return [sample_tensor(s, rng, fp) for s in shapes]


def sample_omega(rng: np.random.Generator, fp: FieldParams = DEFAULT_FIELD) -> int:
    return pow(fp.omega_base, int(rng.integers(0, fp.q)), fp.p)


@dataclass
class SiluTable:
    """Opaque stand-in for silu: a random function of the (x_p, x_q) pair."""

    tp: np.ndarray
    tq: np.ndarray

    @classmethod
    def sample(cls, rng: np.random.Generator, fp: FieldParams = DEFAULT_FIELD) -> "SiluTable":
        return cls(rng.integers(0, fp.p, size=(fp.p, fp.q), dtype=np.int64),
                   rng.integers(0, fp.q, size=(fp.p, fp.q), dtype=np.int64))


@dataclass
class FieldContext:
    """Per-test state shared by both graphs under comparison."""

    fp: FieldParams = DEFAULT_FIELD
    omega: int = 1
    silu: SiluTable | None = None
    sqrt_policy: str = "extend"  # or "resample"
    _silu_rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def silu_table(self) -> SiluTable:
        if self.silu is None:
            self.silu = SiluTable.sample(self._silu_rng, self.fp)
        return self.silu
