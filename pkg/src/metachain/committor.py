"""Committor (hitting probability) solves.

``h_{A,B}(z)`` is the probability to reach ``A`` before ``B`` from ``z``.  It
is computed here three ways:

* :func:`solve_committor_numeric` -- dense LU at a fixed eps, with a
  condition-number guard;
* :func:`committor_newton` -- the same system solved by Newton refinement of
  the eps = 0 inverse (:func:`newton_inverse`);
* :func:`solve_committor_monomial` -- leading order as eps -> 0, valid when no
  state is an asymptotic dynamical trap for ``A | B``.

Trap-laden problems go through :func:`metachain.lifting.asymptotic_committor`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from metachain.chain import ErgodicDecomposition, PerturbedChain, check_eps, relevant_graph
from metachain.errors import (
    IllConditionedError,
    NewtonDivergenceError,
    OrderExtractionError,
    TrapError,
    ValidationError,
)
from metachain.perturb import ONE, ZERO, PerturbedValue, pv_add, pv_div, pv_mul

MAX_CONDITION = 1e12


@dataclass
class CommittorField:
    """Hitting probabilities of ``target`` before ``avoid`` for every state.

    ``asymptotic`` holds leading-order values, ``numeric`` values at ``eps``;
    either may be absent depending on ``method``.
    """

    target: frozenset[int]
    avoid: frozenset[int]
    method: str
    asymptotic: dict[int, PerturbedValue] | None = None
    numeric: np.ndarray | None = None
    eps: float | None = None
    condition: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def __getitem__(self, i: int):
        if self.asymptotic is not None:
            return self.asymptotic[i]
        return float(self.numeric[i])

    def to_json(self, chain: PerturbedChain) -> dict:
        lab = chain.labels
        out = {
            "target": sorted(lab[i] for i in self.target),
            "avoid": sorted(lab[i] for i in self.avoid),
            "method": self.method,
        }
        if self.asymptotic is not None:
            out["asymptotic"] = {lab[i]: v.to_json() for i, v in sorted(self.asymptotic.items())}
        if self.numeric is not None:
            out["eps"] = self.eps
            out["numeric"] = {lab[i]: float(v) for i, v in enumerate(self.numeric)}
        if self.condition is not None:
            out["condition"] = self.condition
        if self.diagnostics:
            out["diagnostics"] = self.diagnostics
        return out


def _check_sets(chain: PerturbedChain, A: Iterable[int], B: Iterable[int]) -> tuple[frozenset[int], frozenset[int]]:
    A, B = frozenset(A), frozenset(B)
    if not A or not B:
        raise ValidationError("target and avoid sets must be nonempty")
    if A & B:
        raise ValidationError("target and avoid sets must be disjoint")
    if not all(0 <= i < chain.n for i in A | B):
        raise ValidationError("state index out of range")
    return A, B


def detect_traps(chain: PerturbedChain, decomposition: ErgodicDecomposition | None = None, C: Iterable[int] = ()) -> frozenset[int]:
    """States with no order-one path into ``C``.

    This graph condition is used as the working definition of an asymptotic
    dynamical trap: it is necessary in general and sufficient for chains
    with monomial entries.  ``decomposition`` is accepted for symmetry with
    the other solvers and not needed.
    """
    C = frozenset(C)
    if not C:
        raise ValidationError("C must be nonempty")
    reverse: dict[int, list[int]] = {i: [] for i in range(chain.n)}
    for i, js in relevant_graph(chain).items():
        for j in js:
            reverse[j].append(i)
    seen = set(C)
    stack = list(C)
    while stack:
        j = stack.pop()
        for i in reverse[j]:
            if i not in seen:
                seen.add(i)
                stack.append(i)
    return frozenset(range(chain.n)) - seen


def _interior_system(P_off: np.ndarray, A: frozenset[int], B: frozenset[int]):
    """``(I - Pbar, r, interior)`` with the diagonal of ``I - Pbar`` formed as exit mass."""
    n = P_off.shape[0]
    interior = [i for i in range(n) if i not in A and i not in B]
    out = P_off.sum(axis=1)
    M = -P_off[np.ix_(interior, interior)]
    M[np.diag_indices_from(M)] = out[interior]
    r = P_off[np.ix_(interior, sorted(A))].sum(axis=1)
    return M, r, interior


def condition_estimate(M: np.ndarray) -> float:
    """Infinity-norm condition number ``||M|| ||M^-1||``."""
    if M.size == 0:
        return 1.0
    try:
        inv = np.linalg.inv(M)
    except np.linalg.LinAlgError:
        return math.inf
    return float(np.linalg.norm(M, np.inf) * np.linalg.norm(inv, np.inf))


def solve_committor_numeric(
    chain: PerturbedChain,
    A: Iterable[int],
    B: Iterable[int],
    eps: float,
    max_condition: float = MAX_CONDITION,
) -> CommittorField:
    A, B = _check_sets(chain, A, B)
    check_eps(chain, eps)
    h = np.zeros(chain.n)
    h[sorted(A)] = 1.0
    M, r, interior = _interior_system(chain.offdiag(eps), A, B)
    if not interior:
        return CommittorField(A, B, "direct", numeric=h, eps=eps, condition=1.0)
    cond = condition_estimate(M)
    if not cond <= max_condition:
        raise IllConditionedError(
            f"committor system has condition estimate {cond:.3g} at eps={eps:g}; "
            "use the lifted asymptotic solver instead",
            condition=cond,
        )
    try:
        h[interior] = np.clip(np.linalg.solve(M, r), 0.0, 1.0) + 0.0
    except np.linalg.LinAlgError as err:
        raise IllConditionedError(f"committor solve failed: {err}") from None
    P = chain.matrix(eps)
    resid = float(np.max(np.abs(h[interior] - P[interior] @ h))) if interior else 0.0
    return CommittorField(A, B, "direct", numeric=h, eps=eps, condition=cond, diagnostics={"harmonic_residual": resid})


# Newton refinement ---------------------------------------------------------------------


class NewtonResult(NamedTuple):
    inverse: np.ndarray
    residuals: list
    """``||I - B_k A||_inf`` for k = 0, 1, ..., last."""

    @property
    def iterations(self) -> int:
        return len(self.residuals) - 1


def _inf_norm(M) -> float:
    return max(sum(abs(x) for x in row) for row in M) if len(M) else 0.0


def newton_inverse(A0_inv, A_eps, tol: float = 1e-12, max_iter: int = 50, dps: int | None = None) -> NewtonResult:
    """Refine ``A0_inv`` into ``A_eps^-1`` with ``B <- 2B - B A B``.

    Parameters
    ----------
    A0_inv : (n, n) array
        Inverse of the eps = 0 slice, the starting guess.
    A_eps : (n, n) array
        Matrix to invert.
    tol : float
        Stop once ``||I - B_k A||_inf < tol``.
    max_iter : int
        Iteration cap.
    dps : int, optional
        Decimal digits for the iteration.  By default the iteration runs in
        double precision, where residuals cannot drop below roughly ``1e-16``;
        with ``dps`` set it runs on ``mpmath`` numbers so that the recorded
        residuals show the exact squaring ``I - B_{k+1} A = (I - B_k A)^2``
        down to any tolerance.

    Returns
    -------
    NewtonResult
        Float inverse and the residual history (as floats).
    """
    if dps is not None:
        import mpmath

        with mpmath.workdps(dps):
            to_mp = np.vectorize(mpmath.mpf, otypes=[object])
            result = _newton(to_mp(np.asarray(A0_inv, dtype=float)), to_mp(np.asarray(A_eps, dtype=float)), tol, max_iter)
        return NewtonResult(result.inverse.astype(float), result.residuals)
    return _newton(np.array(A0_inv, dtype=float), np.asarray(A_eps, dtype=float), tol, max_iter)


def _newton(B, A, tol, max_iter) -> NewtonResult:
    n = A.shape[0]
    eye = np.eye(n, dtype=A.dtype)

    def resid(Bk):
        return float(_inf_norm(eye - Bk @ A))

    residuals = [resid(B)]
    k = 0
    while residuals[-1] >= tol:
        if k >= max_iter:
            raise NewtonDivergenceError(f"Newton iteration did not reach tol={tol:g} in {max_iter} steps (residual {residuals[-1]:.3g})")
        B = 2 * B - B @ A @ B
        k += 1
        residuals.append(resid(B))
        if not math.isfinite(residuals[-1]):
            raise NewtonDivergenceError("Newton iteration diverged")
        if k == 1 and not residuals[1] < residuals[0]:
            raise NewtonDivergenceError(
                f"Newton iteration does not contract (residual {residuals[0]:.3g} -> {residuals[1]:.3g}); "
                "use a smaller eps or the direct solve"
            )
    return NewtonResult(B, residuals)


def committor_newton(
    chain: PerturbedChain,
    A: Iterable[int],
    B: Iterable[int],
    eps: float,
    tol: float = 1e-12,
    max_iter: int = 50,
    dps: int | None = None,
) -> CommittorField:
    """Committor at ``eps`` from the eps = 0 inverse refined by Newton steps.

    Needs a trap-free boundary, otherwise the eps = 0 system is singular.
    The reported ``condition`` is that of the eps = 0 matrix.
    """
    A, B = _check_sets(chain, A, B)
    check_eps(chain, eps)
    traps = detect_traps(chain, C=A | B)
    if traps:
        raise TrapError("the eps = 0 system is singular: traps present", traps)
    h = np.zeros(chain.n)
    h[sorted(A)] = 1.0
    P0 = chain.limit_matrix()
    np.fill_diagonal(P0, 0.0)
    M0, _, interior = _interior_system(P0, A, B)
    M, r, _ = _interior_system(chain.offdiag(eps), A, B)
    if not interior:
        return CommittorField(A, B, "newton", numeric=h, eps=eps, condition=1.0, diagnostics={"newton_residuals": [0.0]})
    result = newton_inverse(np.linalg.inv(M0), M, tol=tol, max_iter=max_iter, dps=dps)
    h[interior] = np.clip(result.inverse @ r, 0.0, 1.0) + 0.0
    return CommittorField(
        A,
        B,
        "newton",
        numeric=h,
        eps=eps,
        condition=condition_estimate(M0),
        diagnostics={"newton_residuals": result.residuals},
    )


# monomial track ------------------------------------------------------------------------


def solve_committor_monomial(
    chain: PerturbedChain,
    decomposition: ErgodicDecomposition | None,
    A: Iterable[int],
    B: Iterable[int],
) -> CommittorField:
    """Leading order of ``h_{A,B}`` by the nonnegative fixed point ``h = r + K h``.

    ``K`` is the jump chain (each row divided by its exit mass), which gives
    the same committor and avoids the holding probability ``1 - sum``.  The
    fixed point is iterated in monomial arithmetic until every exponent has
    stayed put for ``|S|`` sweeps; exponents are then final because the
    cheapest path to ``A`` never needs a loop.  The coefficients are the
    limit of the remaining iteration, which is linear: the order-one loops
    among states sharing an exponent.  That limit is obtained by one small
    linear solve on the eps = 0 slice.
    """
    A, B = _check_sets(chain, A, B)
    traps = detect_traps(chain, decomposition, A | B)
    if traps:
        raise TrapError(
            f"states {sorted(chain.labels[i] for i in traps)} are asymptotic traps for the boundary set",
            traps,
        )
    n = chain.n
    interior = [i for i in range(n) if i not in A and i not in B]
    values: dict[int, PerturbedValue] = {i: ONE for i in A}
    values.update({i: ZERO for i in B})
    if not interior:
        return CommittorField(A, B, "monomial", asymptotic=values)

    jump: dict[int, list[tuple[int, PerturbedValue]]] = {}
    source: dict[int, PerturbedValue] = {}
    for x in interior:
        out = chain.exit_mass(x)
        moves, r = [], ZERO
        for y, p in chain.row(x):
            k = pv_div(p, out)
            if y in A:
                r = pv_add(r, k)
            elif y not in B:
                moves.append((y, k))
        jump[x] = moves
        source[x] = r

    h = {x: ZERO for x in interior}
    stable, sweeps = 0, 0
    while stable < n:
        new = {}
        for x in interior:
            acc = source[x]
            for y, k in jump[x]:
                acc = pv_add(acc, pv_mul(k, h[y]))
            new[x] = acc
        sweeps += 1
        same = all(new[x].is_zero == h[x].is_zero and new[x].exp == h[x].exp for x in interior)
        stable = stable + 1 if same else 0
        h = new

    # coefficient stage: c(x) = [r tight] + sum over tight moves K(x,y) c(y)
    alive = [x for x in interior if not h[x].is_zero]
    pos = {x: k for k, x in enumerate(alive)}
    m = len(alive)
    M = np.eye(m)
    rhs = np.zeros(m)
    for x in alive:
        ex = h[x].exp
        if not source[x].is_zero and source[x].exp == ex:
            rhs[pos[x]] += source[x].coeff
        for y, k in jump[x]:
            if y in pos and k.exp + h[y].exp == ex:
                M[pos[x], pos[y]] -= k.coeff
    coeffs = np.linalg.solve(M, rhs) if m else np.zeros(0)
    for x in alive:
        c = float(coeffs[pos[x]])
        if not c > 0:
            raise TrapError(f"degenerate coefficient system at {chain.labels[x]!r}")
        values[x] = PerturbedValue(c, h[x].exp)
    for x in interior:
        values.setdefault(x, ZERO)
    return CommittorField(A, B, "monomial", asymptotic=values, diagnostics={"sweeps": sweeps})


# numeric -> asymptotic bridge --------------------------------------------------------------


class OrderFit(NamedTuple):
    value: PerturbedValue
    snapped: bool
    slope: float
    intercept: float
    max_residual: float


def exponent_generator(exponents: Iterable) -> Fraction:
    """Positive generator of the additive group spanned by ``exponents``."""
    fracs = [Fraction(e) for e in exponents if Fraction(e) != 0]
    if not fracs:
        return Fraction(1)
    den = math.lcm(*(f.denominator for f in fracs))
    num = math.gcd(*(int(f * den) for f in fracs))
    return Fraction(num, den)


def extract_order(
    samples: Sequence[tuple[float, float]],
    exponents: Iterable = (1,),
    max_degree: int = 32,
    snap_tol: float = 0.05,
    resid_tol: float = 0.1,
) -> OrderFit:
    """Fit ``value ~ c eps^k`` to samples on a decreasing eps ladder.

    ``k`` comes from a least-squares fit of log value against log eps and is
    snapped to the lattice generated by ``exponents`` (multiples up to
    ``max_degree`` times the largest input exponent).  With ``k`` snapped,
    ``c`` is read off the smallest-eps sample, the one closest to the limit.
    """
    samples = sorted(((float(e), float(v)) for e, v in samples), reverse=True)
    if len(samples) < 3:
        raise ValidationError("need at least three samples")
    if any(v <= 0 or e <= 0 for e, v in samples):
        raise ValidationError("samples must be positive")
    x = np.log([e for e, _ in samples])
    y = np.log([v for _, v in samples])
    slope, intercept = np.polyfit(x, y, 1)
    resid = float(np.max(np.abs(y - (slope * x + intercept))))
    if resid > resid_tol:
        raise OrderExtractionError(f"log-log fit residual {resid:.3g} exceeds {resid_tol}; use a smaller eps ladder")
    exps = [Fraction(e) for e in exponents]
    g = exponent_generator(exps)
    bound = max_degree * max([abs(e) for e in exps] + [Fraction(1)])
    m = round(slope / g)
    snapped_exp = m * g
    snapped = abs(float(snapped_exp) - slope) <= snap_tol and abs(snapped_exp) <= bound
    if snapped:
        exp = snapped_exp
        eps_min, v_min = samples[-1]
        coeff = v_min / eps_min ** float(exp)
    else:
        exp = Fraction(slope).limit_denominator(1000)
        coeff = math.exp(intercept)
    return OrderFit(PerturbedValue(coeff, exp), snapped, float(slope), float(intercept), resid)
