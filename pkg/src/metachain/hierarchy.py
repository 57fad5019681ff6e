"""Effective chains on metastable time scales and the limiting stationary law.

With one representative ``x_i`` per essential class ``E_i``:

* ``P^`` (:func:`effective_chain`) moves between representatives with the
  ``nu``-weighted probabilities of where the walk lands in ``S0`` next;
* ``Q^`` (:func:`reversible_chain`) holds the ``nu^2``-weighted escape
  probabilities between classes and satisfies detailed balance with the
  class masses at leading order;
* ``P~`` (:func:`rescale`) is ``P^`` divided by its total off-diagonal
  weight, which speeds time up until the fastest inter-class move is of
  order one.

Iterating decomposition -> ``P^`` -> ``P~`` walks up the time scales until a
single class is left (:func:`build_hierarchy`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from metachain.chain import ErgodicDecomposition, PerturbedChain, StateId, ergodic_decomposition
from metachain.committor import solve_committor_monomial
from metachain.errors import StructuralError, ValidationError
from metachain.lifting import asymptotic_committor
from metachain.parallel import pmap
from metachain.perturb import ONE, ZERO, PerturbedValue, pv, pv_add, pv_div, pv_mul, pv_order, pv_sum, Order

PairMap = dict[tuple[int, int], PerturbedValue]


def _decompose(chain: PerturbedChain, decomposition: ErgodicDecomposition | None) -> ErgodicDecomposition:
    return ergodic_decomposition(chain) if decomposition is None else decomposition


def escape_value(chain: PerturbedChain, x: int, target: Iterable[int]) -> PerturbedValue:
    """Leading order of ``P^x(tau_target^+ < tau_x^+)``.

    First step from ``x``, then the committor of ``target`` against ``{x}``.
    """
    target = frozenset(target) - {x}
    if not target:
        return ZERO
    h = asymptotic_committor(chain, target, {x}).asymptotic
    return pv_sum(pv_mul(p, h[z]) for z, p in chain.row(x))


def effective_chain(
    chain: PerturbedChain,
    decomposition: ErgodicDecomposition | None = None,
    representatives: Sequence[int] | None = None,
) -> PerturbedChain:
    """The chain ``P^`` on one representative per essential class.

    ``p^(x_i, x_j) = nu_i(x_i) (p(x_i, x_j) + sum_{z not in S0} p(x_i, z) h_j(z))``
    with ``h_j`` the probability to enter ``S0`` at ``x_j``.  Since ``S0`` meets
    every class there are no traps and the monomial solver applies directly.
    States of the result carry the representatives' labels.
    """
    dec = _decompose(chain, decomposition)
    if dec.n_classes < 2:
        raise ValidationError("already ergodic at this scale: a single essential class")
    if representatives is not None:
        dec = dec.with_representatives(representatives)
    reps = list(dec.representatives)
    S0 = frozenset(reps)

    def hitting(j):
        return solve_committor_monomial(chain, dec, {reps[j]}, S0 - {reps[j]}).asymptotic

    fields = pmap(hitting, range(len(reps)))
    entries: PairMap = {}
    for i, x in enumerate(reps):
        weight = pv(dec.nu[i][x])
        for j in range(len(reps)):
            if j == i:
                continue
            h = fields[j]
            total = pv_sum(pv_mul(p, h[z]) for z, p in chain.row(x))
            value = pv_mul(weight, total)
            if not value.is_zero:
                entries[(i, j)] = value
    return PerturbedChain([chain.labels[x] for x in reps], entries)


def reversible_chain(chain: PerturbedChain, decomposition: ErgodicDecomposition | None = None) -> PairMap:
    """Off-diagonal entries of ``Q^`` indexed by class pairs.

    ``q^(E, E') = sum_{x in E} nu_E(x)^2 P^x(tau_{E'}^+ < tau_x^+)``.  The inner
    committors may face traps (the boundary meets only two classes) and go
    through the lifting solver.  Zero entries are omitted.
    """
    dec = _decompose(chain, decomposition)
    if dec.n_classes < 2:
        raise ValidationError("already ergodic at this scale: a single essential class")
    pairs = [(a, b) for a in range(dec.n_classes) for b in range(dec.n_classes) if a != b]

    def entry(pair):
        a, b = pair
        terms = []
        for x in dec.classes[a]:
            w = dec.nu[a][x]
            terms.append(pv_mul(pv(w * w), escape_value(chain, x, dec.classes[b])))
        return pv_sum(terms)

    values = pmap(entry, pairs)
    return {pair: v for pair, v in zip(pairs, values) if not v.is_zero}


def rescale(p_hat: PerturbedChain) -> tuple[PerturbedChain, PerturbedValue]:
    """Divide every off-diagonal entry by their total ``T``; returns ``(P~, T)``.

    Afterwards the order-one coefficients of the whole matrix sum to one, so
    at least one transition is of order one.
    """
    T = pv_sum(v for _, v in sorted(p_hat.entries.items()))
    if T.is_zero:
        raise ValidationError("no off-diagonal transitions to rescale")
    entries = {k: pv_div(v, T) for k, v in p_hat.entries.items()}
    return PerturbedChain(p_hat.labels, entries), T


def exit_law(chain: PerturbedChain) -> PairMap:
    """Leading order of ``p(x, y) / sum_{z != x} p(x, z)``: where each state goes when it moves."""
    out: PairMap = {}
    for i in range(chain.n):
        total = chain.exit_mass(i)
        for j, v in chain.row(i):
            out[(i, j)] = pv_div(v, total)
    return out


def class_masses(decomposition: ErgodicDecomposition, q_hat: Mapping[tuple[int, int], PerturbedValue]) -> list[PerturbedValue]:
    """Leading order of ``mu(E)`` from ``1/mu(E) = sum_{E'} q^(E, E') / q^(E', E)``.

    The ``E' = E`` term is 1.  Every other term is a ratio of nonnegative
    monomials, so the sum is exact at leading order.
    """
    m = decomposition.n_classes
    masses = []
    for a in range(m):
        inv = ONE
        for b in range(m):
            if b == a:
                continue
            num = q_hat.get((a, b), ZERO)
            den = q_hat.get((b, a), ZERO)
            if num.is_zero:
                continue
            if den.is_zero:
                raise StructuralError(f"escape from class {a} to {b} is possible but the return is not; the chain cannot be irreducible")
            inv = pv_add(inv, pv_div(num, den))
        masses.append(pv_div(ONE, inv))
    return masses


@dataclass
class HierarchyLevel:
    """One metastable time scale.

    ``chain`` is the chain analysed at this level (the input chain at level
    1, the previous level's ``p_check`` afterwards); its states always carry
    labels of original states.  ``basins`` lists, per class, the original
    essential states it has absorbed so far.
    """

    index: int
    chain: PerturbedChain
    decomposition: ErgodicDecomposition
    p_hat: PerturbedChain
    q_hat: PairMap
    p_check: PerturbedChain
    time_scale: PerturbedValue
    cumulative_time_scale: PerturbedValue
    class_masses: list[PerturbedValue]
    representatives: tuple[StateId, ...]
    basins: tuple[frozenset[str], ...]
    parent: int | None = None

    @property
    def n_classes(self) -> int:
        return self.decomposition.n_classes

    def to_json(self) -> dict:
        lab = self.chain.labels
        dec = self.decomposition
        return {
            "level": self.index,
            "parent": self.parent,
            "classes": [[lab[i] for i in c] for c in dec.classes],
            "transient": [lab[i] for i in dec.transient],
            "representatives": [s.label for s in self.representatives],
            "basins": [sorted(b) for b in self.basins],
            "p_hat": self.p_hat.to_json()["edges"],
            "q_hat": [
                {"from": self.representatives[a].label, "to": self.representatives[b].label, **v.to_json()}
                for (a, b), v in sorted(self.q_hat.items())
            ],
            "p_check": self.p_check.to_json()["edges"],
            "time_scale": self.time_scale.to_json(),
            "cumulative_time_scale": self.cumulative_time_scale.to_json(),
            "class_masses": [m.to_json() for m in self.class_masses],
        }


def build_hierarchy(chain: PerturbedChain, max_levels: int | None = None) -> list[HierarchyLevel]:
    """Walk up the time scales until one essential class is left.

    Each entry is one reduction step; a chain that is already ergodic at
    order one yields an empty list.  The class count strictly decreases from
    level to level.
    """
    original = {s: i for i, s in enumerate(chain.labels)}
    levels: list[HierarchyLevel] = []
    cur = chain
    basin_of = {s: frozenset([s]) for s in chain.labels}
    cumulative = ONE
    dec = ergodic_decomposition(cur)
    while dec.n_classes > 1:
        if max_levels is not None and len(levels) >= max_levels:
            break
        p_hat = effective_chain(cur, dec)
        q_hat = reversible_chain(cur, dec)
        p_check, T = rescale(p_hat)
        cumulative = pv_mul(cumulative, T)
        lab = cur.labels
        basins = tuple(
            frozenset().union(*(basin_of[lab[i]] for i in c if lab[i] in basin_of)) for c in dec.classes
        )
        reps = tuple(StateId(original[lab[r]], lab[r]) for r in dec.representatives)
        levels.append(
            HierarchyLevel(
                index=len(levels) + 1,
                chain=cur,
                decomposition=dec,
                p_hat=p_hat,
                q_hat=q_hat,
                p_check=p_check,
                time_scale=T,
                cumulative_time_scale=cumulative,
                class_masses=class_masses(dec, q_hat),
                representatives=reps,
                basins=basins,
                parent=len(levels) or None,
            )
        )
        basin_of = {lab[r]: b for r, b in zip(dec.representatives, basins)}
        cur = p_check
        nxt = ergodic_decomposition(cur)
        if not nxt.n_classes < dec.n_classes:
            raise StructuralError(f"class count did not decrease at level {len(levels)}")
        dec = nxt
    return levels


def final_classes(chain: PerturbedChain, levels: Sequence[HierarchyLevel]) -> list[frozenset[str]]:
    """Basins (original labels) of the classes left after the last level."""
    if not levels:
        dec = ergodic_decomposition(chain)
        return [frozenset(chain.labels[i] for i in c) for c in dec.classes]
    last = levels[-1]
    basin_of = {last.chain.labels[r]: b for r, b in zip(last.decomposition.representatives, last.basins)}
    top = last.p_check
    dec = ergodic_decomposition(top)
    return [frozenset().union(*(basin_of[top.labels[i]] for i in c)) for c in dec.classes]


@dataclass
class AsymptoticDistribution:
    """Class masses at leading order and the per-state limit of ``mu_eps``."""

    labels: tuple[str, ...]
    decomposition: ErgodicDecomposition
    class_mass: list[PerturbedValue]
    limit: dict[int, float]
    normalization_residual: float

    def to_json(self) -> dict:
        lab = self.labels
        return {
            "class_mass": [
                {"class": [lab[i] for i in c], **m.to_json()} for c, m in zip(self.decomposition.classes, self.class_mass)
            ],
            "limit": {lab[i]: self.limit[i] for i in range(len(lab))},
            "normalization_residual": self.normalization_residual,
        }


def asymptotic_stationary(chain: PerturbedChain) -> AsymptoticDistribution:
    """Limit of the stationary distribution as eps -> 0.

    Only the first level is needed: the mass formula covers all classes at
    once.  A state's limit is ``coeff(mu(E)) nu_E(x)`` when its class mass is
    of order one and zero otherwise (in particular for transient states).
    """
    dec = ergodic_decomposition(chain)
    if dec.n_classes == 1:
        masses = [ONE]
    else:
        masses = class_masses(dec, reversible_chain(chain, dec))
    limit = {i: 0.0 for i in range(chain.n)}
    for c, nu, m in zip(dec.classes, dec.nu, masses):
        if not m.is_zero and m.exp == 0:
            for x in c:
                limit[x] = m.coeff * nu[x]
    total = sum(limit.values())
    if total <= 0:
        raise StructuralError("no class carries mass of order one")
    limit = {i: v / total for i, v in limit.items()}
    return AsymptoticDistribution(chain.labels, dec, masses, limit, abs(total - 1.0))


@dataclass
class MetastableVerdict:
    holds: bool
    witness: tuple[str, str | None] | None
    details: list[dict] = field(default_factory=list)

    def __bool__(self):
        return self.holds

    def to_json(self) -> dict:
        return {"holds": self.holds, "witness": list(self.witness) if self.witness else None, "details": self.details}


def verify_metastable_set(chain: PerturbedChain, M: Iterable[int]) -> MetastableVerdict:
    """Check ``P^x(tau_{M \\ x}^+ < tau_x^+) / P^y(tau_M^+ < tau_y^+) -> 0`` for ``x in M``, ``y not in M``.

    When ``M`` is the whole space there is no ``y`` and the condition reads
    ``P^x(tau_{M \\ x}^+ < tau_x^+) -> 0``.  Returns the first failing pair
    as witness.
    """
    M = sorted(set(M))
    if not M:
        raise ValidationError("M must be nonempty")
    outside = [y for y in range(chain.n) if y not in M]
    lab = chain.labels
    leave = {x: escape_value(chain, x, set(M) - {x}) for x in M}
    enter = {y: escape_value(chain, y, M) for y in outside}
    details = []
    witness = None
    for x in M:
        for y in outside or [None]:
            den = enter[y] if y is not None else ONE
            tag = pv_order(leave[x], den).tag
            ok = tag in (Order.NEGLIGIBLE, Order.BOTH_ZERO) or leave[x].is_zero
            details.append(
                {"x": lab[x], "y": None if y is None else lab[y], "leave": leave[x].to_json(), "enter": den.to_json(), "ok": ok}
            )
            if not ok and witness is None:
                witness = (lab[x], None if y is None else lab[y])
    return MetastableVerdict(witness is None, witness, details)


@dataclass
class ApproximationReport:
    pairs: list[dict]
    rtol: float

    @property
    def ok(self) -> bool:
        return all(p["ok"] for p in self.pairs)

    @property
    def flagged(self) -> list[tuple[str, str]]:
        return [(p["from"], p["to"]) for p in self.pairs if not p["ok"]]

    def to_json(self) -> dict:
        return {"ok": self.ok, "rtol": self.rtol, "pairs": self.pairs}


def check_approximation(chain: PerturbedChain, approx: PerturbedChain, rtol: float = 0.02) -> ApproximationReport:
    """Compare ``q^(E_i, E_j)`` with escape probabilities of an approximate ``P^``.

    A faithful approximation must reproduce, at leading order,
    ``P^{x_i}(tau_{x_j}^+ < tau_{x_i}^+)`` on the small chain.  Pairs whose
    exponents differ, or whose coefficients differ by more than ``rtol``,
    are flagged.  This is a necessary condition only.
    """
    dec = ergodic_decomposition(chain)
    reps = [chain.labels[r] for r in dec.representatives]
    if list(approx.labels) != reps:
        raise ValidationError(f"approximate chain must be on the representatives {reps}")
    q_hat = reversible_chain(chain, dec)
    pairs = []
    for i in range(len(reps)):
        for j in range(len(reps)):
            if i == j:
                continue
            q = q_hat.get((i, j), ZERO)
            e = escape_value(approx, i, {j})
            cmp = pv_order(e, q)
            if cmp.tag is Order.BOTH_ZERO:
                ok, exp_ok, ratio = True, True, 1.0
            elif cmp.tag is Order.COMPARABLE:
                exp_ok, ratio = True, cmp.limit
                ok = abs(ratio - 1.0) <= rtol
            else:
                exp_ok, ratio, ok = False, cmp.limit, False
            pairs.append(
                {
                    "from": reps[i],
                    "to": reps[j],
                    "q_hat": q.to_json(),
                    "escape": e.to_json(),
                    "exponent_ok": exp_ok,
                    "coeff_ratio": ratio,
                    "ok": ok,
                }
            )
    return ApproximationReport(pairs, rtol)
