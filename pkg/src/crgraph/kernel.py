"""Entire convolution kernel and certified selection of its constants.

The kernel is the polynomial

    E~(zeta, eta) = zeta_d^2 + sum_j Lam_j (zeta_j^2 + zeta_j^{P_j})
                    + Gam * sum_k (eta_k^2 + eta_k^Q)

with positive even integer constants.  The constants must satisfy a pointwise
exponent estimate tying the kernel evaluated across slices back to a strictly
decaying right-hand side plus a C~ multiple of the slice displacement; that
estimate is what makes the scaled kernel an approximation to the identity and
controls the cutoff annulus.

Selection is seed-by-formula, certify-by-sampling: an inductive cascade built
from the sharp arithmetic (Young) inequality and the compactness constant
produces candidate constants, a randomized margin audit checks the estimate,
failures escalate the offending constant, and a final tightening pass walks
the constants back down while the audit still passes (smaller constants mean
a better conditioned kernel).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .expressions import int_pow
from .manifold import CompactSpec, ModelGraph, eval_h

__all__ = [
    "KernelParams", "SelectionTrace", "StageRecord", "AuditRecord",
    "young_constant", "c_K_constant", "cross_term_constant",
    "eval_tilde_E", "eval_E_eps", "normalizer_C1", "matrix_MAB",
    "exact_unit_det", "check_C1_invariance", "check_lemma1_margin",
    "lemma1_margins", "sample_margin_law", "select_constants",
    "SelectionError",
]


def next_even_ge(x: float) -> int:
    k = math.ceil(x)
    return k if k % 2 == 0 else k + 1


def next_even_gt(x: float) -> int:
    k = next_even_ge(x)
    return k if k > x else k + 2


class SelectionError(RuntimeError):
    """Budget exhausted with a positive margin; carries the witness."""

    def __init__(self, message: str, witness):
        super().__init__(message)
        self.witness = witness


@dataclass(frozen=True)
class AuditRecord:
    n_samples: int
    worst_margin: float
    seed: int
    witness: tuple = ()


@dataclass(frozen=True)
class StageRecord:
    j: int
    power: int
    M_hat: int
    C_K_stage: float
    Lambda_j: int | None


@dataclass(frozen=True)
class SelectionTrace:
    stages: tuple[StageRecord, ...]
    M_prime: int
    escalations: tuple[str, ...]
    tighten_steps: tuple[str, ...]
    budget: int

    @property
    def escalation_count(self) -> int:
        return len(self.escalations)


@dataclass(frozen=True)
class KernelParams:
    """Kernel constants; all of Lambda_j, P_j, Gamma, Q are positive even
    integers, C_tilde is the positive real constant of the slice estimate."""

    n: int
    d: int
    Lambda: tuple[int, ...]
    P: tuple[int, ...]
    Gamma: int
    Q: int
    C_tilde: float
    audit: AuditRecord | None = None

    def __post_init__(self):
        if len(self.Lambda) != self.d - 1 or len(self.P) != self.d - 1:
            raise ValueError("need d-1 Lambda and P entries")
        for v in (*self.Lambda, *self.P, self.Gamma, self.Q):
            if v <= 0 or v % 2 != 0:
                raise ValueError("kernel exponents and weights must be positive even integers")
        if any(p < 4 for p in self.P):
            raise ValueError("P_j must be >= 4")
        if self.Q < 2:
            raise ValueError("Q must be >= 2")
        if self.C_tilde <= 0:
            raise ValueError("C_tilde must be positive")

    @property
    def m(self) -> int:
        return self.n - self.d

    def report_lines(self) -> list[str]:
        lines = [f"n = {self.n}", f"d = {self.d}"]
        for j, (lam, p) in enumerate(zip(self.Lambda, self.P), start=1):
            lines.append(f"Lambda_{j} = {lam}")
            lines.append(f"P_{j} = {p}")
        lines.append(f"Gamma = {self.Gamma}")
        lines.append(f"Q = {self.Q}")
        lines.append(f"C_tilde = {self.C_tilde!r}")
        if self.audit is not None:
            lines.append(f"audit_samples = {self.audit.n_samples}")
            lines.append(f"audit_worst_margin = {self.audit.worst_margin!r}")
            lines.append(f"audit_seed = {self.audit.seed}")
        return lines


# ---------------------------------------------------------------------------
# Elementary constants
# ---------------------------------------------------------------------------

def young_constant(p: float, q: float, delta: float) -> float:
    """Sharp L with  a b <= delta a^p + L b^q  for conjugate p, q and a,b >= 0.

    Maximizing ab - delta a^p in a gives L = (1/q) (delta p)^(-q/p).
    """
    if p <= 1.0 or q <= 1.0 or abs(1.0 / p + 1.0 / q - 1.0) > 1e-12:
        raise ValueError("p, q must be conjugate exponents > 1")
    if delta <= 0.0:
        raise ValueError("delta must be positive")
    return (1.0 / q) * (delta * p) ** (-q / p)


def c_K_constant(N: int, rho: float) -> float:
    """Compactness constant with 1 + |s*|^N <= C_K (1 + |s - x|^N) whenever
    |x| <= rho and s* lies between x and s."""
    if N < 0 or rho < 0:
        raise ValueError("need N >= 0 and rho >= 0")
    return 2.0 ** max(N - 1, 0) * (1.0 + rho ** N)


def cross_term_constant(P: int) -> float:
    """L_P with  -Re (a+ib)^P <= -a^P / 2 + L_P b^P  for real a, b, even P.

    The even-index binomial cross terms |a|^{P-m} |b|^m are split with the
    sharp arithmetic inequality at a uniform delta small enough that the
    leaked a^P mass stays below 1/2.
    """
    if P < 2 or P % 2 != 0:
        raise ValueError("P must be an even integer >= 2")
    if P == 2:
        return 1.0
    delta = 1.0 / (2.0 * (2.0 ** (P - 1) - 1.0))
    total = 1.0  # m = P term: b^P appears directly
    for m in range(2, P, 2):
        pexp = P / (P - m)
        qexp = P / m
        total += math.comb(P, m) * young_constant(pexp, qexp, delta)
    return total


# ---------------------------------------------------------------------------
# Kernel evaluation
# ---------------------------------------------------------------------------

def eval_tilde_E(params: KernelParams, zeta, eta):
    """Exact polynomial evaluation of E~; entire in (zeta, eta)."""
    zeta = np.asarray(zeta)
    eta = np.asarray(eta)
    if zeta.shape[0] != params.d or eta.shape[0] != params.m:
        raise ValueError(
            f"dimension mismatch: expected {params.d} zeta and {params.m} eta components")
    acc = int_pow(zeta[params.d - 1], 2)
    for j in range(params.d - 1):
        acc = acc + params.Lambda[j] * (int_pow(zeta[j], 2)
                                        + int_pow(zeta[j], params.P[j]))
    for k in range(params.m):
        acc = acc + params.Gamma * (int_pow(eta[k], 2)
                                    + int_pow(eta[k], params.Q))
    return acc


def eval_E_eps(params: KernelParams, eps: float, zeta, eta):
    """Scaled kernel E_eps(zeta, eta) = E~(eps zeta, eps eta) / eps^2."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    zeta = np.asarray(zeta)
    eta = np.asarray(eta)
    return eval_tilde_E(params, eps * zeta, eps * eta) / (eps * eps)


def e0_coefficients(params: KernelParams) -> np.ndarray:
    """Diagonal of the limiting quadratic form E_0."""
    return np.array([*params.Lambda, 1.0] + [float(params.Gamma)] * params.m)


def normalizer_C1(params: KernelParams, n: int | None = None,
                  d: int | None = None) -> float:
    """Gaussian integral of exp(-E_0) over R^d x R^{n-d}:
    pi^{n/2} * prod Lambda_j^{-1/2} * Gamma^{-(n-d)/2}."""
    n = params.n if n is None else n
    d = params.d if d is None else d
    val = math.pi ** (n / 2.0)
    for lam in params.Lambda:
        val /= math.sqrt(lam)
    val /= params.Gamma ** ((n - d) / 2.0)
    return val


def matrix_MAB(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """M(A, B) = I_n + [[A, B], [0, 0]] with A strictly lower triangular."""
    A = np.asarray(A, float)
    B = np.asarray(B, float)
    d = A.shape[0]
    m = B.shape[1] if B.ndim == 2 else 0
    if np.any(np.triu(A) != 0.0):
        raise ValueError("A must be strictly lower triangular")
    M = np.eye(d + m)
    M[:d, :d] += A
    M[:d, d:] += B
    return M


def exact_unit_det(M: np.ndarray) -> Fraction:
    """Exact determinant over rationals (floats convert exactly)."""
    a = [[Fraction(float(x)) for x in row] for row in np.asarray(M)]
    n = len(a)
    det = Fraction(1)
    for col in range(n):
        piv = next((r for r in range(col, n) if a[r][col] != 0), None)
        if piv is None:
            return Fraction(0)
        if piv != col:
            a[col], a[piv] = a[piv], a[col]
            det = -det
        det *= a[col][col]
        inv = Fraction(1, 1) / a[col][col]
        for r in range(col + 1, n):
            f = a[r][col] * inv
            if f:
                for c in range(col, n):
                    a[r][c] -= f * a[col][c]
    return det


def check_C1_invariance(params: KernelParams, A: np.ndarray, B: np.ndarray,
                        quad_tol: float = 1e-8, order: int = 48) -> float:
    """Numerically integrate exp(-E_0(M(A,B) xi)) and compare to the closed
    form; the unit-determinant change of variables predicts exact equality.

    Returns the relative deviation |integral - C_1| / C_1.
    """
    n = params.n
    Mab = matrix_MAB(A, B)
    D = e0_coefficients(params)
    Qm = Mab.T @ (D[:, None] * Mab)
    # axis-aligned box containing the ellipsoid {xi' Qm xi <= 46};
    # the Gaussian tail outside is ~ e^-46, far below quad_tol
    half = np.sqrt(46.0 * np.diag(np.linalg.inv(Qm)))

    def integrate(k: int) -> float:
        xs, ws = np.polynomial.legendre.leggauss(k)
        axes = [h * xs for h in half]
        wts = [h * ws for h in half]
        grids = np.meshgrid(*axes, indexing="ij")
        xi = np.stack([g.ravel() for g in grids])
        quad = np.einsum("in,ij,jn->n", xi, Qm, xi)
        vals = np.exp(-quad)
        wfull = wts[0]
        for w in wts[1:]:
            wfull = np.multiply.outer(wfull, w)
        return float((vals * wfull.ravel()).sum())

    lo = integrate(order)
    hi = integrate(order + 16)
    if abs(hi - lo) > quad_tol * max(1.0, abs(hi)):
        raise RuntimeError(
            f"quadrature did not reach tol {quad_tol}: delta={abs(hi - lo):.3e}")
    c1 = normalizer_C1(params)
    return abs(hi - c1) / c1


# ---------------------------------------------------------------------------
# Margin audit
# ---------------------------------------------------------------------------

def sample_margin_law(K: CompactSpec, n_samples: int, rng: np.random.Generator
                      ) -> tuple[np.ndarray, ...]:
    """Draw ((x,u,v) in K, (s,t,v')) pairs for the margin audit.

    The off-point law mixes a local Gaussian at scale diam K, a wide uniform
    over the 4x dilated box, and a heavy-tailed Cauchy component, because the
    estimate's risk zones are both near-diagonal and far-field.  Heavy draws
    are clipped so high even powers stay inside float range.  A dedicated
    stratum pins v' = v exactly: that diagonal slice gets no help from the
    C~ term and is where marginal constants fail first.
    """
    box = K.box
    d, m = K.M.d, K.M.m
    base = box.sample(n_samples, rng)
    diam = max(box.diam, 1e-6)
    local = base + rng.normal(0.0, diam, size=base.shape)
    wide = rng.uniform(4.0 * box.lo[:, None] - diam, 4.0 * box.hi[:, None] + diam,
                       size=base.shape)
    heavy = base + diam * rng.standard_cauchy(size=base.shape)
    np.clip(heavy, -1e3 * max(1.0, diam), 1e3 * max(1.0, diam), out=heavy)
    pick = rng.uniform(size=n_samples)
    off = np.where(pick < 0.45, local, np.where(pick < 0.80, wide, heavy))
    diag = rng.uniform(size=n_samples) < 0.25
    off[d + m:, diag] = base[d + m:, diag]
    return base, off


def lemma1_margins(params: KernelParams, M: ModelGraph, K: CompactSpec,
                   base: np.ndarray, off: np.ndarray) -> np.ndarray:
    """Pointwise margin LHS - RHS of the slice estimate; <= 0 means the
    inequality holds at that sample."""
    d, m = M.d, M.m
    x, u, v = K.split(base)
    s, t, vp = K.split(off)
    y = eval_h(M, x, u, v)
    hs = eval_h(M, s, t, vp)
    zt = (s - x) + 1j * (hs - y)
    et = (t - u) + 1j * (vp - v)
    lhs = -np.real(eval_tilde_E(params, zt, et))

    ds = s - x
    dt = t - u
    dv = vp - v
    rhs = -0.5 * ds[d - 1] ** 2
    for j in range(d - 1):
        rhs = rhs - (ds[j] ** 2 + int_pow(ds[j], params.P[j]))
    rhs = rhs - (dt ** 2).sum(axis=0) - int_pow(dt, params.Q).sum(axis=0)
    rhs = rhs + params.C_tilde * ((dv ** 2).sum(axis=0)
                                  + int_pow(dv, params.Q).sum(axis=0))
    return lhs - rhs


def check_lemma1_margin(params: KernelParams, M: ModelGraph, K: CompactSpec,
                        n_samples: int = 10_000, seed: int = 0
                        ) -> tuple[float, tuple]:
    """Worst sampled margin and its witness sample (base, off)."""
    if n_samples < 1:
        raise ValueError("n_samples >= 1 required")
    rng = np.random.default_rng(seed)
    base, off = sample_margin_law(K, n_samples, rng)
    margins = lemma1_margins(params, M, K, base, off)
    i = int(np.argmax(margins))
    witness = (tuple(float(c) for c in base[:, i]),
               tuple(float(c) for c in off[:, i]))
    return float(margins[i]), witness


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------

def _margin_components(params: KernelParams, M: ModelGraph, K: CompactSpec,
                       witness: tuple) -> dict:
    """Per-term diagnostics at a witness, used to pick the escalation knob."""
    base = np.asarray(witness[0], float)[:, None]
    off = np.asarray(witness[1], float)[:, None]
    x, u, v = K.split(base)
    s, t, vp = K.split(off)
    y = eval_h(M, x, u, v)
    hs = eval_h(M, s, t, vp)
    zt = (s - x) + 1j * (hs - y)
    et = (t - u) + 1j * (vp - v)
    dv = vp - v
    re_zeta = [float(np.real(int_pow(zt[j], 2) + int_pow(zt[j], params.P[j])))
               for j in range(M.d - 1)]
    re_eta = float(np.real(int_pow(et, 2) + int_pow(et, params.Q)).sum())
    dist_v = float((dv ** 2).sum() + int_pow(dv, params.Q).sum())
    return {"re_zeta": re_zeta, "re_eta": re_eta, "dist_v": dist_v}


def _seed_params(M: ModelGraph, K: CompactSpec, C: float, N: int
                 ) -> tuple[KernelParams, list[StageRecord], int]:
    """Inductive cascade: exponents first (each stage's power must clear the
    previous stage's accumulated even exponent), then weights, assembled from
    the compactness and arithmetic-inequality constants."""
    d, n = M.d, M.n
    m_eta = M.m
    # exponent chain: stage d uses power 2 with M_2 = even ceil of 2(N+1);
    # every later stage needs P_j strictly above the running exponent
    M_hat = next_even_ge(2 * (N + 1))
    P: dict[int, int] = {}
    M_hats: dict[int, int] = {d: M_hat}
    for j in range(d - 1, 0, -1):
        P[j] = max(next_even_gt(M_hat), 4)
        M_hat = next_even_ge((N + 1) * P[j])
        M_hats[j] = M_hat
    M_prime = M_hat
    Q = max(next_even_ge(M_prime), 4)

    rho = K.rho
    cK = c_K_constant(N, rho)
    stages: list[StageRecord] = []
    C_acc = 0.0
    Lambdas: dict[int, int] = {}
    for j in range(d, 0, -1):
        mblk = (j - 1) + 2
        A_c = 2.0 * cK * max(1.0, float(mblk) ** max(N - 1, 0))
        powers = [2] if j == d else [2, P[j]]
        stage_bad = 0.0
        for Pw in powers:
            L_Pw = cross_term_constant(Pw)
            stage_bad += (L_Pw * (C * A_c) ** Pw
                          * (mblk + 1) ** (Pw - 1) * mblk ** (Pw - 1)
                          * (2 * mblk + 1))
        if j < d:
            C_K_stage = 2.0 * C_acc + 1.0
            Lambdas[j] = next_even_gt(2.0 * (C_K_stage + 1.0))
            coef = float(Lambdas[j])
        else:
            C_K_stage = stage_bad
            coef = 1.0
        stages.append(StageRecord(j, powers[-1], M_hats[j], C_K_stage,
                                  Lambdas.get(j)))
        C_acc += coef * stage_bad
    # norm |t-u|^M' to per-component powers costs a dimensional factor
    conv = float(m_eta) ** max(M_prime / 2.0 - 1.0, 0.0) if m_eta else 1.0
    C_fin = C_acc * conv
    Gamma = next_even_gt(2.0 * (C_fin + 1.0))
    L_Q = cross_term_constant(Q)
    C_tilde = 2.0 * (C_fin + Gamma * max(1.0, L_Q))
    params = KernelParams(
        n=n, d=d,
        Lambda=tuple(Lambdas[j] for j in range(1, d)),
        P=tuple(P[j] for j in range(1, d)),
        Gamma=Gamma, Q=Q, C_tilde=C_tilde)
    return params, stages, M_prime


def select_constants(M: ModelGraph, K: CompactSpec, growth: tuple[float, int],
                     seed: int = 0, budget: int = 16,
                     n_samples: int = 10_000, tighten: bool = True
                     ) -> tuple[KernelParams, SelectionTrace]:
    """Seed the kernel constants by the inductive cascade, certify the slice
    estimate by sampling, escalate on failure, then walk constants back down
    while the audit still passes.

    Raises :class:`SelectionError` when the budget is exhausted with a
    positive margin.
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    C, N = float(growth[0]), int(growth[1])
    params, stages, M_prime = _seed_params(M, K, C, N)
    escalations: list[str] = []
    tighten_steps: list[str] = []

    def audit(p: KernelParams, audit_seed: int) -> tuple[float, tuple]:
        return check_lemma1_margin(p, M, K, n_samples, audit_seed)

    worst, witness = audit(params, seed)
    rounds = 0
    while worst > 0.0:
        if rounds >= budget:
            raise SelectionError(
                f"selection budget exhausted with margin {worst:.6g} > 0",
                witness)
        comp = _margin_components(params, M, K, witness)
        if comp["dist_v"] > 1e-12:
            params = replace(params, C_tilde=2.0 * params.C_tilde)
            escalations.append("C_tilde*2")
        else:
            knobs = [(comp["re_zeta"][j], "Lambda", j)
                     for j in range(M.d - 1)] + [(comp["re_eta"], "Gamma", -1)]
            pos = [kn for kn in knobs if kn[0] > 0.0]
            if pos:
                _, kind, j = max(pos)
                if kind == "Lambda":
                    lam = list(params.Lambda)
                    lam[j] *= 2
                    params = replace(params, Lambda=tuple(lam))
                    escalations.append(f"Lambda_{j + 1}*2")
                else:
                    params = replace(params, Gamma=2 * params.Gamma)
                    escalations.append("Gamma*2")
            else:
                # no single weight can absorb the violation; raise shape
                params = replace(params, Q=params.Q + 2,
                                 C_tilde=2.0 * params.C_tilde)
                escalations.append("Q+2")
        rounds += 1
        worst, witness = audit(params, seed + rounds)

    if tighten:
        params, tighten_steps = _tighten(params, M, K, seed, n_samples)

    # confirm on a fresh stream and freeze the audit record
    confirm_seed = seed ^ 0x9E3779B9
    worst, witness = audit(params, confirm_seed)
    retries = 0
    while worst > 0.0 and retries < max(budget, 1):
        # tightening was too aggressive for the wider sample; step back up
        comp = _margin_components(params, M, K, witness)
        if comp["dist_v"] > 1e-12:
            params = replace(params, C_tilde=2.0 * params.C_tilde)
            escalations.append("C_tilde*2(confirm)")
        else:
            params = replace(params, Gamma=2 * params.Gamma)
            escalations.append("Gamma*2(confirm)")
        retries += 1
        worst, witness = audit(params, confirm_seed + retries)
    if worst > 0.0:
        raise SelectionError(
            f"confirmation audit failed with margin {worst:.6g} > 0", witness)

    params = replace(params, audit=AuditRecord(
        n_samples=n_samples, worst_margin=worst,
        seed=confirm_seed + retries, witness=witness))
    trace = SelectionTrace(tuple(stages), M_prime, tuple(escalations),
                           tuple(tighten_steps), budget)
    return params, trace


def _tighten(params: KernelParams, M: ModelGraph, K: CompactSpec,
             seed: int, n_samples: int) -> tuple[KernelParams, list[str]]:
    """Shrink each weight to near the smallest value the fixed-sample audit
    accepts.  The seed cascade is deliberately loose; small weights both
    condition the quadrature better and keep the operator's finite-eps
    defects above measurement noise.

    Sweep order matters: the Gamma stage absorbs every earlier stage's
    spill, so the Lambda_j shrink first, then Gamma, then C~.  Sweeps repeat
    until no knob moves.  C~ is doubled once at the end as headroom.
    """
    steps: list[str] = []

    def passes(p: KernelParams) -> bool:
        worst, _ = check_lemma1_margin(p, M, K, n_samples, seed)
        return worst <= 0.0

    def shrink_even(get, set_, name, floor=2):
        """Exponential descent then coarse refinement over even integers."""
        nonlocal params
        cur = get(params)
        if cur <= floor:
            return False
        lo = floor
        if passes(set_(params, lo)):
            params = set_(params, lo)
            steps.append(f"{name}->{lo}")
            return True
        hi = cur
        while hi > 2 * lo + 2:
            mid = next_even_ge(math.sqrt(lo * hi))
            if mid >= hi or mid <= lo:
                break
            if passes(set_(params, mid)):
                hi = mid
            else:
                lo = mid
        if hi < cur:
            params = set_(params, hi)
            steps.append(f"{name}->{hi}")
            return True
        return False

    def shrink_float(get, set_, name, floor=1e-3):
        nonlocal params
        cur = get(params)
        moved = False
        while cur / 2.0 >= floor and passes(set_(params, cur / 2.0)):
            cur /= 2.0
            params = set_(params, cur)
            steps.append(f"{name}->{cur}")
            moved = True
        return moved

    for _ in range(6):
        moved = False
        for j in range(M.d - 2, -1, -1):
            moved |= shrink_even(
                lambda p, j=j: p.Lambda[j],
                lambda p, v, j=j: replace(
                    p, Lambda=tuple(v if i == j else lam
                                    for i, lam in enumerate(p.Lambda))),
                f"Lambda_{j + 1}")
        moved |= shrink_even(lambda p: p.Gamma,
                             lambda p, v: replace(p, Gamma=v), "Gamma")
        moved |= shrink_float(lambda p: p.C_tilde,
                              lambda p, v: replace(p, C_tilde=v), "C_tilde")
        if not moved:
            break
    params = replace(params, C_tilde=2.0 * params.C_tilde)
    steps.append(f"C_tilde->{params.C_tilde}(headroom)")
    return params, steps
