"""Brute-force finite-eps counterparts of the asymptotic results.

Everything here works on the evaluated matrix at one ``eps`` and is meant to
be slow and obviously correct rather than clever.  Hitting probabilities and
hitting times use state elimination in the jump chain: eliminating a state
only ever adds nonnegative numbers and renormalizes by a sum of nonnegative
numbers, so there is no cancellation, and the results keep full relative
accuracy even when the plain linear system is badly conditioned (which is
exactly the regime of interest).
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from metachain.chain import PerturbedChain, StateId, check_eps, ergodic_decomposition
from metachain.committor import condition_estimate
from metachain.errors import IllConditionedError, StructuralError, ValidationError

TREE_LIMIT = 8
PATH_LIMIT = 10


# matrix-level kernels ---------------------------------------------------------------------


def _offdiag(chain_or_matrix, eps: float | None = None) -> np.ndarray:
    if isinstance(chain_or_matrix, PerturbedChain):
        check_eps(chain_or_matrix, eps)
        return chain_or_matrix.offdiag(eps)
    W = np.array(chain_or_matrix, dtype=float)
    np.fill_diagonal(W, 0.0)
    return W


def eliminate(W: np.ndarray, boundary: dict[int, float], reward: np.ndarray | None = None) -> np.ndarray:
    """Solve ``v = t + K v`` off the boundary by eliminating interior states.

    ``K`` is the jump chain of the off-diagonal weights ``W`` and ``v`` equals
    ``boundary`` on the boundary.  ``reward[i]`` is paid per step spent in
    ``i``; a visit to ``i`` lasts ``1/out(i)`` steps on average, so with
    ``reward = 1`` and zero boundary values ``v`` is the expected hitting
    time, and with ``reward = None`` it is the harmonic extension.
    """
    n = W.shape[0]
    out = W.sum(axis=1)
    interior = [i for i in range(n) if i not in boundary]
    K = np.zeros_like(W)
    t = np.zeros(n)
    for i in interior:
        if out[i] <= 0:
            raise StructuralError(f"state {i} never moves; the boundary is unreachable")
        K[i] = W[i] / out[i]
        if reward is not None:
            t[i] = reward[i] / out[i]
    alive = set(interior)
    record = []
    for k in interior:
        alive.discard(k)
        row, tk = K[k].copy(), t[k]
        record.append((k, row, tk))
        for i in alive:
            a = K[i, k]
            if a == 0.0:
                continue
            K[i, k] = 0.0
            K[i] += a * row
            t[i] += a * tk
            K[i, i] = 0.0
            s = K[i].sum()
            if s <= 0:
                raise StructuralError(f"state {i} cannot reach the boundary")
            K[i] /= s
            t[i] /= s
    v = np.zeros(n)
    for i, value in boundary.items():
        v[i] = value
    for k, row, tk in reversed(record):
        v[k] = tk + row @ v
    return v


def committor_matrix(W: np.ndarray, A: Iterable[int], B: Iterable[int]) -> np.ndarray:
    """``h(z) = P^z(tau_A < tau_B)`` for all ``z`` (1 on ``A``, 0 on ``B``)."""
    A, B = set(A), set(B)
    if A & B:
        raise ValidationError("A and B must be disjoint")
    boundary = {i: 1.0 for i in A}
    boundary.update({i: 0.0 for i in B})
    return eliminate(W, boundary)


def first_passage(W: np.ndarray, z: int, A: Iterable[int], B: Iterable[int]) -> float:
    """``P^z(tau_A^+ < tau_B^+)`` with ``tau^+`` the first hitting time after time zero."""
    A, B = set(A), set(B)
    if not A:
        return 0.0
    if not B:
        raise ValidationError("B must be nonempty")
    h = committor_matrix(W, A, B)
    if z not in A and z not in B:
        return float(h[z])
    # first step from z; staying put counts as a hit of z itself
    stay = 1.0 if z in A else 0.0
    hold = max(0.0, 1.0 - W[z].sum())
    return float(W[z] @ h + hold * stay)


def escape(W: np.ndarray, x: int, target: Iterable[int]) -> float:
    """``P^x(tau_target^+ < tau_x^+)``."""
    target = set(target) - {x}
    if not target:
        return 0.0
    h = committor_matrix(W, target, {x})
    return float(W[x] @ h)


def mean_hitting(W: np.ndarray, target: Iterable[int]) -> np.ndarray:
    """``E^w(tau_target)`` for every ``w`` (zero on the target)."""
    target = set(target)
    n = W.shape[0]
    return eliminate(W, {i: 0.0 for i in target}, reward=np.ones(n))


def mean_return(W: np.ndarray, z: int, target: Iterable[int]) -> float:
    """``E^z(tau_target^+)``."""
    target = set(target)
    m = mean_hitting(W, target)
    if z not in target:
        return float(m[z])
    return float(1.0 + W[z] @ m)


def exit_law(W: np.ndarray, C: Sequence[int]) -> np.ndarray:
    """``L[x, y] = P^x(X_{tau_{C^c}} = y)`` for ``x`` in ``C`` (rows indexed like ``C``).

    The stochastic complement ``(I - P|_C)^-1 P_{C, C^c}``, evaluated one exit
    state at a time by elimination so that exit laws of nearly closed sets
    keep their relative accuracy.
    """
    C = list(C)
    n = W.shape[0]
    rest = [y for y in range(n) if y not in C]
    L = np.zeros((len(C), n))
    for y in rest:
        h = eliminate(W, {z: float(z == y) for z in rest})
        L[:, y] = h[C]
    return L


# stationary distributions --------------------------------------------------------------------


def stationary_direct(
    chain: PerturbedChain, eps: float, max_condition: float = 1e12, extended_above: float = 1e6
) -> np.ndarray:
    """Solve ``mu P = mu``, ``sum mu = 1`` by LU with one equation replaced by normalization.

    The system is written with the generator ``W - diag(out)`` so that no
    entry is formed as ``1 - (small)``.  A warning is issued when the
    condition estimate exceeds ``max_condition``.  Above ``extended_above``
    the same LU solve runs in extended precision (diagonal summed exactly,
    digits doubled until two successive solutions agree): a double-precision
    LU there returns a small residual but may lose all digits of the answer.
    """
    W = _offdiag(chain, eps)
    n = W.shape[0]
    G = W.copy()
    G[np.diag_indices(n)] = -W.sum(axis=1)
    M = G.T.copy()
    M[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    cond = condition_estimate(M)
    if cond > max_condition:
        warnings.warn(f"stationary system condition estimate {cond:.3g} at eps={eps:g}", RuntimeWarning, stacklevel=2)
    if cond > extended_above:
        mu = _stationary_lu_extended(W, cond)
    else:
        try:
            mu = np.linalg.solve(M, rhs)
        except np.linalg.LinAlgError as err:
            raise IllConditionedError(f"singular stationary system: {err}") from None
    resid = float(np.max(np.abs(mu @ G)))
    if resid > 1e-12:
        raise IllConditionedError(f"stationary residual {resid:.3g} exceeds 1e-12", condition=cond)
    return mu


def _stationary_lu_extended(W: np.ndarray, cond: float, max_dps: int = 1000) -> np.ndarray:
    import mpmath

    n = W.shape[0]
    digits = 200 if not math.isfinite(cond) else int(math.log10(max(cond, 10.0)))
    dps = 30 + 2 * digits
    previous = None
    while dps <= max_dps:
        with mpmath.workdps(dps):
            M = mpmath.matrix(n, n)
            for i in range(n):
                out = mpmath.fsum(mpmath.mpf(w) for w in W[i])
                for j in range(n):
                    M[j, i] = mpmath.mpf(W[i, j]) if i != j else -out
            for j in range(n):
                M[n - 1, j] = 1
            rhs = mpmath.matrix([0] * (n - 1) + [1])
            try:
                sol = mpmath.lu_solve(M, rhs)
            except ZeroDivisionError:
                raise IllConditionedError("singular stationary system") from None
            mu = np.array([float(sol[i]) for i in range(n)])
        if previous is not None and np.allclose(mu, previous, rtol=1e-15, atol=0.0):
            return mu
        previous = mu
        dps *= 2
    raise IllConditionedError(f"stationary solve did not stabilize within {max_dps} digits", condition=cond)


def stationary_gth(chain_or_matrix, eps: float | None = None) -> np.ndarray:
    """Stationary law by Grassmann-Taksar-Heyman elimination (subtraction free)."""
    W = _offdiag(chain_or_matrix, eps)
    n = W.shape[0]
    A = W.copy()
    for k in range(n - 1, 0, -1):
        s = A[k, :k].sum()
        if s <= 0:
            raise StructuralError("chain is not irreducible")
        A[:k, :k] += np.outer(A[:k, k], A[k, :k]) / s
        A[:k, k] /= s
        np.fill_diagonal(A, 0.0)
    mu = np.zeros(n)
    mu[0] = 1.0
    for k in range(1, n):
        mu[k] = mu[:k] @ A[:k, k]
    return mu / mu.sum()


def stationary_tree(chain: PerturbedChain, eps: float) -> np.ndarray:
    """Stationary law from the Markov chain tree theorem.

    ``mu(x)`` is proportional to the total weight of spanning trees directed
    towards ``x``; trees are enumerated depth first by choosing one outgoing
    edge per non-root state and pruning choices that close a cycle.
    """
    if chain.n > TREE_LIMIT:
        raise ValidationError(f"tree enumeration is limited to {TREE_LIMIT} states")
    W = _offdiag(chain, eps)
    n = W.shape[0]
    succ = [[(j, W[i, j]) for j in range(n) if W[i, j] > 0] for i in range(n)]
    weights = np.zeros(n)
    for root in range(n):
        others = [i for i in range(n) if i != root]
        parent = [-1] * n

        def closes_cycle(v, u):
            while u != root and u != -1:
                if u == v:
                    return True
                u = parent[u]
            return False

        def dfs(k, acc):
            if k == len(others):
                return acc
            v = others[k]
            total = 0.0
            for u, w in succ[v]:
                if closes_cycle(v, u):
                    continue
                parent[v] = u
                total += dfs(k + 1, acc * w)
                parent[v] = -1
            return total

        weights[root] = dfs(0, 1.0)
    if weights.sum() <= 0:
        raise StructuralError("no spanning tree: the chain is not irreducible")
    return weights / weights.sum()


# named quantities and identity checks ------------------------------------------------------------


def escape_direct(chain: PerturbedChain, eps: float, x: int, y: int) -> float:
    """``P^x(tau_y^+ < tau_x^+)`` by first-step analysis."""
    if x == y:
        raise ValidationError("x and y must differ")
    return escape(_offdiag(chain, eps), x, {y})


def prop1_residual(chain: PerturbedChain, eps: float, x: int, y: int, mu: np.ndarray | None = None) -> float:
    """Relative gap in ``mu(x) P^x(tau_y^+ < tau_x^+) = mu(y) P^y(tau_x^+ < tau_y^+)``."""
    W = _offdiag(chain, eps)
    mu = stationary_gth(W) if mu is None else mu
    lhs = mu[x] * escape(W, x, {y})
    rhs = mu[y] * escape(W, y, {x})
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs))


def stationary_representation_residual(chain: PerturbedChain, eps: float, x: int, mu: np.ndarray | None = None) -> float:
    """Relative gap in ``1/mu(x) = sum_y P^x(tau_y^+ <= tau_x^+) / P^y(tau_x^+ <= tau_y^+)``."""
    W = _offdiag(chain, eps)
    mu = stationary_gth(W) if mu is None else mu
    total = 1.0
    for y in range(W.shape[0]):
        if y != x:
            total += escape(W, x, {y}) / escape(W, y, {x})
    return abs(total - 1.0 / mu[x]) * mu[x]


@dataclass(frozen=True)
class HittingIdentity:
    lhs: float
    rhs: float

    @property
    def residual(self) -> float:
        return abs(self.lhs - self.rhs)

    @property
    def ok(self) -> bool:
        return self.residual < 1e-8 * (1.0 + abs(self.lhs))


def mean_hitting_identity_check(chain: PerturbedChain, eps: float, x: int, y: int, z: int) -> HittingIdentity:
    """Both sides of ``E^z(tau_x^+) = E^z(min(tau_x^+, tau_y^+)) + P^z(tau_y^+ < tau_x^+) E^y(tau_x^+)``."""
    W = _offdiag(chain, eps)
    lhs = mean_return(W, z, {x})
    first = mean_return(W, z, {x, y})
    if x == y:
        return HittingIdentity(lhs, first)
    p = first_passage(W, z, {y}, {x})
    return HittingIdentity(lhs, first + p * mean_return(W, y, {x}))


def quotient_identity_residual(chain: PerturbedChain, eps: float, x: int, A: Iterable[int], B: Iterable[int]) -> float:
    """Relative gap in ``P^x(tau_B^+ < tau_A^+) P^x(tau_{A+B}^+ < tau_x^+) = P^x(tau_B^+ < tau_{A+x}^+)``.

    Splitting the event ``{tau_B^+ < tau_A^+}`` at the first return to ``x``
    gives ``P(B before A) = P(B before A or x) + P^x(x before A and B) P(B before A)``.
    The factor on the left is therefore the escape from ``x`` to ``A | B``,
    not to ``B`` alone (with ``x -> a -> x``, ``x -> b -> x`` and even odds,
    the ``B``-only version reads 1/4 = 1/2).
    """
    A, B = set(A), set(B)
    if x in A | B:
        raise ValidationError("x must lie outside A and B")
    if A & B:
        raise ValidationError("A and B must be disjoint")
    W = _offdiag(chain, eps)
    lhs = first_passage(W, x, B, A) * escape(W, x, A | B)
    rhs = first_passage(W, x, B, A | {x})
    scale = max(abs(lhs), abs(rhs))
    return abs(lhs - rhs) / scale if scale > 0 else 0.0


def exit_distribution_check(chain: PerturbedChain, eps: float, E: Iterable[int]) -> float:
    """Max relative error of the ``nu_E``-weighted exit formula against the exact exit law.

    Exact: ``P^x(X_{tau_{E^c}} = z)`` from the stochastic complement, for
    every ``x`` in ``E``.  Formula: ``sum_y nu_E(y) p(y, z) / Z``.  Pairs
    ``(x, z)`` where both vanish are skipped.
    """
    E = sorted(set(E))
    dec = ergodic_decomposition(chain)
    try:
        k = [tuple(c) for c in dec.classes].index(tuple(E))
    except ValueError:
        raise ValidationError("E is not an essential class") from None
    nu = dec.nu[k]
    W = _offdiag(chain, eps)
    exact = exit_law(W, E)
    weights = np.array([nu[y] for y in E])
    flow = weights @ W[E]
    flow[E] = 0.0
    formula = flow / flow.sum()
    err = 0.0
    for r in range(len(E)):
        for z in range(chain.n):
            if z in E or (exact[r, z] == 0 and formula[z] == 0):
                continue
            err = max(err, abs(exact[r, z] - formula[z]) / formula[z] if formula[z] > 0 else math.inf)
    return err


def within_class_ratio_error(chain: PerturbedChain, eps: float, E: Iterable[int]) -> float:
    """Max over ``x, y`` in ``E`` of ``|mu(x)/mu(y) / (nu(x)/nu(y)) - 1|``."""
    E = sorted(set(E))
    dec = ergodic_decomposition(chain)
    k = [tuple(c) for c in dec.classes].index(tuple(E))
    nu = dec.nu[k]
    mu = stationary_gth(chain, eps)
    return max(abs(mu[x] / mu[y] * nu[y] / nu[x] - 1.0) for x in E for y in E)


def effective_chain_consistency(chain: PerturbedChain, eps: float, C: Iterable[int], A: Iterable[int], B: Iterable[int]) -> float:
    """Max committor change when the rows of ``C`` are replaced by their exit laws.

    ``A | B`` must avoid ``C``.
    """
    C, A, B = sorted(set(C)), set(A), set(B)
    if (A | B) & set(C):
        raise ValidationError("A and B must avoid C")
    W = _offdiag(chain, eps)
    Wt = W.copy()
    Wt[C] = exit_law(W, C)
    return float(np.max(np.abs(committor_matrix(W, A, B) - committor_matrix(Wt, A, B))))


# direct paths ------------------------------------------------------------------------------------


@dataclass(frozen=True)
class DirectPath:
    vertices: tuple[StateId, ...]
    weight: float


def direct_paths(chain: PerturbedChain, eps: float, J: Iterable[int], x: int, y: int) -> list[DirectPath]:
    """All paths ``x -> ... -> y`` that stay in ``J`` before the last step and never repeat a state."""
    J = set(J)
    W = _offdiag(chain, eps)
    states = chain.states
    found = []

    def walk(path, weight):
        g = path[-1]
        for w in range(chain.n):
            p = W[g, w]
            if p <= 0 or w in path:
                continue
            if w == y:
                found.append(DirectPath(tuple(states[v] for v in path + [w]), weight * p))
            elif w in J:
                walk(path + [w], weight * p)

    walk([x], 1.0)
    return found


def direct_path_hitting(chain: PerturbedChain, eps: float, J: Iterable[int], x: int, y: int) -> float:
    """``P^x(X_{tau_{S \\ J}} = y)`` as a sum over direct ``J``-paths.

    Each path ``g_1 .. g_n`` contributes ``prod p(g_i, g_{i+1}) / N_i`` where
    ``N_i`` is the probability to leave ``g_i`` for ``(S \\ J) + {g_1..g_{i-1}}``
    without coming back to ``g_i``; it is evaluated by a first step and a
    committor, so no ``1 - (return probability)`` is formed.
    """
    J = frozenset(J)
    if len(J) > PATH_LIMIT:
        raise ValidationError(f"direct-path enumeration is limited to |J| <= {PATH_LIMIT}")
    if x not in J or y in J:
        raise ValidationError("need x in J and y outside J")
    W = _offdiag(chain, eps)
    n = chain.n
    outside = frozenset(range(n)) - J

    @lru_cache(maxsize=None)
    def no_return(g: int, earlier: frozenset) -> float:
        D = (outside | earlier) - {g}
        h = committor_matrix(W, D, {g})
        return float(W[g] @ h)

    total = 0.0
    for path in direct_paths(chain, eps, J, x, y):
        idx = [s.index for s in path.vertices]
        denom = 1.0
        for i in range(len(idx) - 1):
            denom *= no_return(idx[i], frozenset(idx[:i]))
        total += path.weight / denom
    return total


def hitting_distribution(chain: PerturbedChain, eps: float, J: Iterable[int], x: int, y: int) -> float:
    """``P^x(X_{tau_{S \\ J}} = y)`` from one committor solve."""
    J = set(J)
    rest = set(range(chain.n)) - J
    return float(committor_matrix(_offdiag(chain, eps), {y}, rest - {y})[x])


def committor(chain: PerturbedChain, eps: float, A: Iterable[int], B: Iterable[int]) -> np.ndarray:
    """Committor at finite ``eps`` by elimination (robust to ill conditioning)."""
    return committor_matrix(_offdiag(chain, eps), A, B)


# effective chains at finite eps ------------------------------------------------------------------


def effective_entry(chain: PerturbedChain, eps: float, decomposition, i: int, j: int) -> float:
    """``p^(x_i, x_j)`` at ``eps``: ``nu_i(x_i)`` times the chance that the first
    step from ``x_i`` leads to ``x_j`` as the next representative visited."""
    dec = decomposition
    reps = list(dec.representatives)
    W = _offdiag(chain, eps)
    x = reps[i]
    h = committor_matrix(W, {reps[j]}, set(reps) - {reps[j]})
    return float(dec.nu[i][x] * (W[x] @ h))


def q_hat_entry(chain: PerturbedChain, eps: float, decomposition, a: int, b: int) -> float:
    """``q^(E_a, E_b) = sum_{x in E_a} nu(x)^2 P^x(tau_{E_b}^+ < tau_x^+)`` at ``eps``."""
    dec = decomposition
    W = _offdiag(chain, eps)
    return float(sum(dec.nu[a][x] ** 2 * escape(W, x, dec.classes[b]) for x in dec.classes[a]))
