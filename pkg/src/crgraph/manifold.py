"""Decoupled model graphs in C^n and their compact evaluation windows.

A graph is the set {(z, w) : y_j = h_j(x_1..x_{j-1}, w)} with z = x + iy in
C^d and w = u + iv in C^{n-d}.  The defining triangular decoupling (h_j never
reads x_k for k >= j) is enforced syntactically at parse time and can be
re-audited numerically with finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .expressions import (DslError, Expression, _Parser, _Token, tokenize)

__all__ = [
    "ModelGraph", "ManifoldPoint", "Box", "CompactSpec", "GrowthReport",
    "parse_graph_spec", "eval_h", "eval_Dh", "slice_point",
    "growth_certificate", "build_compact_spec", "decoupling_check",
]


def h_namespace(n: int, d: int) -> tuple[str, ...]:
    return tuple([f"x{k}" for k in range(1, d + 1)]
                 + [f"u{k}" for k in range(1, n - d + 1)]
                 + [f"v{k}" for k in range(1, n - d + 1)])


def f_namespace(n: int, d: int) -> tuple[str, ...]:
    return tuple([f"zeta{k}" for k in range(1, d + 1)]
                 + [f"eta{k}" for k in range(1, n - d + 1)])


@dataclass(frozen=True)
class ModelGraph:
    """Graphed generic submanifold with triangularly decoupled h.

    ``growth`` is the declared constant pair (C, N) in the derivative bound
    |Dh| <= C (1 + |x|^N + |w|^N); it is an input, audited by
    :func:`growth_certificate`, not something the parser can infer.
    """

    n: int
    d: int
    h: tuple[Expression, ...]
    growth_C: float = 1.0
    growth_N: int = 0
    # exact partials of h_j wrt (x_1..x_d, u_1.., v_1..), filled in post-init
    dh: tuple[tuple[Expression, ...], ...] = field(default=(), repr=False)

    def __post_init__(self):
        if not (1 <= self.d <= self.n - 1):
            raise DslError(
                f"dimension mismatch: need 1 <= d <= n-1, got n={self.n} d={self.d}")
        if len(self.h) != self.d:
            raise DslError(f"expected {self.d} graphing functions, got {len(self.h)}")
        for j, hj in enumerate(self.h, start=1):
            bad = sorted(v for v in hj.variables()
                         if v.startswith("x") and int(v[1:]) >= j)
            if bad:
                raise DslError(f"decoupling violation: h{j} uses {bad[0]}")
        if not self.dh:
            names = h_namespace(self.n, self.d)
            table = tuple(tuple(hj.diff(v) for v in names) for hj in self.h)
            object.__setattr__(self, "dh", table)

    @property
    def codim(self) -> int:
        return self.d

    @property
    def m(self) -> int:
        """Number of w-components."""
        return self.n - self.d

    def with_growth(self, C: float, N: int) -> "ModelGraph":
        return ModelGraph(self.n, self.d, self.h, float(C), int(N), self.dh)

    def to_source(self) -> str:
        parts = [f"n={self.n} d={self.d}"]
        parts += [f"h{j} = {hj.to_source()}" for j, hj in enumerate(self.h, 1)]
        return "; ".join(parts)


def parse_graph_spec(text: str) -> ModelGraph:
    """Parse ``n=.. d=..; h1 = ..; h2 = ..`` into a :class:`ModelGraph`."""
    toks = tokenize(text)
    k = 0

    def need(kind: str, value: str | None = None) -> _Token:
        nonlocal k
        if k >= len(toks):
            raise DslError("unexpected end of graph spec", len(text))
        tok = toks[k]
        if tok.kind != kind or (value is not None and tok.text != value):
            raise DslError(f"expected {value or kind!r}, found {tok.text!r}", tok.pos)
        k += 1
        return tok

    need("name", "n")
    need("op", "=")
    n = int(need("number").text)
    need("name", "d")
    need("op", "=")
    d = int(need("number").text)
    if not (1 <= d <= n - 1):
        raise DslError(f"dimension mismatch: need 1 <= d <= n-1, got n={n} d={d}")
    names = h_namespace(n, d)
    hs: dict[int, Expression] = {}
    while k < len(toks):
        need("op", ";")
        if k >= len(toks):
            break
        htok = need("name")
        m = htok.text
        if not (m.startswith("h") and m[1:].isdigit()):
            raise DslError(f"expected graphing function name, found {m!r}", htok.pos)
        j = int(m[1:])
        if not (1 <= j <= d):
            raise DslError(f"h{j} out of range for d={d}", htok.pos)
        if j in hs:
            raise DslError(f"duplicate definition of h{j}", htok.pos)
        need("op", "=")
        sub = _Parser(toks[k:], set(names), allow_exp=False, src_len=len(text))
        node = sub.parse_expr()
        k += sub.k
        hs[j] = Expression(node, names)
    missing = [j for j in range(1, d + 1) if j not in hs]
    if missing:
        raise DslError(f"missing definition of h{missing[0]}")
    return ModelGraph(n, d, tuple(hs[j] for j in range(1, d + 1)))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _env(M: ModelGraph, x, u, v) -> dict:
    env = {}
    for k in range(M.d):
        env[f"x{k + 1}"] = x[k]
    for k in range(M.m):
        env[f"u{k + 1}"] = u[k]
        env[f"v{k + 1}"] = v[k]
    return env


def eval_h(M: ModelGraph, x, u, v) -> np.ndarray:
    """y_j = h_j(x_1..x_{j-1}, u + iv); accepts trailing batch axes."""
    x, u, v = np.asarray(x, float), np.asarray(u, float), np.asarray(v, float)
    env = _env(M, x, u, v)
    batch = np.broadcast(x[0] if M.d else 0.0, u[0] if M.m else 0.0).shape
    out = np.empty((M.d,) + batch, float)
    for j, hj in enumerate(M.h):
        out[j] = hj.eval(env)
    return out


def eval_Dh(M: ModelGraph, x, u, v) -> np.ndarray:
    """Exact real derivative matrix, rows h_j, columns (x, u, v)."""
    x, u, v = np.asarray(x, float), np.asarray(u, float), np.asarray(v, float)
    env = _env(M, x, u, v)
    ncols = M.d + 2 * M.m
    batch = np.broadcast(x[0] if M.d else 0.0, u[0] if M.m else 0.0).shape
    out = np.zeros((M.d, ncols) + batch, float)
    for j in range(M.d):
        for c in range(ncols):
            val = M.dh[j][c].eval(env)
            out[j, c] = val
    return out


def slice_point(M: ModelGraph, v, s, t) -> tuple[np.ndarray, np.ndarray]:
    """Totally real slice parametrization H^v(s,t) = (s + ih(s,t+iv), t+iv)."""
    s, t, v = np.asarray(s, float), np.asarray(t, float), np.asarray(v, float)
    zeta = s + 1j * eval_h(M, s, t, v)
    eta = t + 1j * v
    return zeta, eta


@dataclass(frozen=True)
class ManifoldPoint:
    """Point of M; y is always derived from h so points never drift off M."""

    x: tuple[float, ...]
    u: tuple[float, ...]
    v: tuple[float, ...]
    y: tuple[float, ...]

    @classmethod
    def on_graph(cls, M: ModelGraph, x: Sequence[float], u: Sequence[float],
                 v: Sequence[float]) -> "ManifoldPoint":
        y = eval_h(M, np.asarray(x, float), np.asarray(u, float),
                   np.asarray(v, float))
        return cls(tuple(map(float, x)), tuple(map(float, u)),
                   tuple(map(float, v)), tuple(map(float, y)))

    @property
    def z(self) -> np.ndarray:
        return np.asarray(self.x) + 1j * np.asarray(self.y)

    @property
    def w(self) -> np.ndarray:
        return np.asarray(self.u) + 1j * np.asarray(self.v)


# ---------------------------------------------------------------------------
# Growth certificate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GrowthReport:
    passed: bool
    worst_ratio: float
    witness: tuple[float, ...]
    n_samples: int
    dilations: tuple[float, ...]


def growth_certificate(M: ModelGraph, box: "Box", C: float, N: int,
                       n_samples: int = 2000, seed: int = 0,
                       dilations: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0),
                       ) -> GrowthReport:
    """Sampled audit of |Dh(x,w)| <= C (1 + |x|^N + |w|^N).

    The bound is assumed globally; we check it on the user box and on
    dilations of it (a heuristic audit, not a proof).
    """
    if C <= 0 or N < 0 or n_samples < 1:
        raise ValueError("need C > 0, N >= 0, n_samples >= 1")
    rng = np.random.default_rng(seed)
    d, m = M.d, M.m
    worst = -np.inf
    witness: tuple[float, ...] = ()
    for lam in dilations:
        lo, hi = box.lo * lam, box.hi * lam
        pts = rng.uniform(lo[:, None], hi[:, None], size=(lo.size, n_samples))
        x, u, v = pts[:d], pts[d:d + m], pts[d + m:]
        Dh = eval_Dh(M, x, u, v)
        frob = np.sqrt((Dh ** 2).sum(axis=(0, 1)))
        xn = np.sqrt((x ** 2).sum(axis=0))
        wn = np.sqrt((u ** 2 + v ** 2).sum(axis=0))
        ratio = frob / (C * (1.0 + xn ** N + wn ** N))
        i = int(np.argmax(ratio))
        if ratio[i] > worst:
            worst = float(ratio[i])
            witness = tuple(float(c) for c in pts[:, i])
    return GrowthReport(worst <= 1.0, worst, witness, n_samples, dilations)


def decoupling_check(M: ModelGraph, box: "Box", n_points: int = 100,
                     seed: int = 0, step: float = 1e-5) -> float:
    """Max |finite-difference dh_j/dx_k| over k >= j at random points."""
    rng = np.random.default_rng(seed)
    d, m = M.d, M.m
    pts = rng.uniform(box.lo[:, None], box.hi[:, None],
                      size=(box.lo.size, n_points))
    x, u, v = pts[:d], pts[d:d + m], pts[d + m:]
    worst = 0.0
    for k in range(d):
        xp, xm = x.copy(), x.copy()
        xp[k] += step
        xm[k] -= step
        fd = (eval_h(M, xp, u, v) - eval_h(M, xm, u, v)) / (2 * step)
        worst = max(worst, float(np.abs(fd[:k + 1]).max()))
    return worst


# ---------------------------------------------------------------------------
# Compact window
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Axis-aligned closed box in (x, u, v) coordinates."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, float))
        hi = np.atleast_1d(np.asarray(self.hi, float))
        if lo.shape != hi.shape or np.any(hi < lo):
            raise ValueError("empty or malformed box")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def diam(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    @property
    def centroid(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def maxabs(self) -> np.ndarray:
        return np.maximum(np.abs(self.lo), np.abs(self.hi))

    def grid(self, per_axis: int) -> np.ndarray:
        """Tensor grid, shape (naxes, per_axis**naxes)."""
        axes = [np.linspace(a, b, per_axis) for a, b in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lo[:, None], self.hi[:, None],
                           size=(self.lo.size, n))


@dataclass(frozen=True)
class CompactSpec:
    """K = graph over box, plus the cutoff radius R, v-bound R' and base
    slice v0 that define the enlarged compact
    K' = M cap [{|x|+|u| <= R+1} x {|v| < R'}]."""

    M: ModelGraph
    box: Box
    R: float
    R_prime: float
    v0: tuple[float, ...]
    safety: float

    def __post_init__(self):
        d, m = self.M.d, self.M.m
        if self.box.lo.size != d + 2 * m:
            raise ValueError(f"box needs {d + 2 * m} axes for n={self.M.n} d={d}")
        mx = self.box.maxabs()
        xu = float(np.linalg.norm(mx[:d]) + np.linalg.norm(mx[d:d + m]))
        if xu > self.R + 1e-12:
            raise ValueError("cutoff plateau does not cover K: max(|x|+|u|) > R")
        vmax = float(np.linalg.norm(mx[d + m:]))
        if not self.R_prime > vmax:
            raise ValueError("R' must exceed max |v| over K")
        v0 = np.asarray(self.v0, float)
        if np.any(v0 < self.box.lo[d + m:] - 1e-12) or \
           np.any(v0 > self.box.hi[d + m:] + 1e-12):
            raise ValueError("v0 must lie in the v-projection of the box")

    def split(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d, m = self.M.d, self.M.m
        return pts[:d], pts[d:d + m], pts[d + m:]

    def grid_points(self, per_axis: int = 5) -> np.ndarray:
        return self.box.grid(per_axis)

    @property
    def max_xu(self) -> float:
        mx = self.box.maxabs()
        d, m = self.M.d, self.M.m
        return float(np.linalg.norm(mx[:d]) + np.linalg.norm(mx[d:d + m]))

    @property
    def rho(self) -> float:
        """Max Euclidean norm of (x, u, v) over the box."""
        return float(np.linalg.norm(self.box.maxabs()))

    def v_extent(self) -> float:
        d, m = self.M.d, self.M.m
        return float(np.max(self.box.hi[d + m:] - self.box.lo[d + m:], initial=0.0))


def build_compact_spec(M: ModelGraph, box: Box, safety: float = 10.0) -> CompactSpec:
    """R grows with the declared safety multiple of diam(K); the cutoff must
    sit far enough out that the annulus contribution decays like
    exp(-R^2 / 4 eps^2) against everything K-sized."""
    if safety < 1.0:
        raise ValueError("safety multiplier must be >= 1")
    d, m = M.d, M.m
    if box.lo.size != d + 2 * m:
        raise ValueError(f"box needs {d + 2 * m} axes for n={M.n} d={d}")
    mx = box.maxabs()
    xu = float(np.linalg.norm(mx[:d]) + np.linalg.norm(mx[d:d + m]))
    R = float(math.ceil(xu + safety * box.diam + 1.0))
    R_prime = float(np.linalg.norm(mx[d + m:])) + 1.0
    v0 = tuple(float(c) for c in box.centroid[d + m:])
    return CompactSpec(M, box, R, R_prime, v0, float(safety))
