"""Lifting essential classes into single states, and committors through traps.

An essential class ``E`` of the limit chain that misses the boundary
``A | B`` is a trap: the walk lingers in it for a diverging time, which is
what makes the plain committor system ill conditioned.  Replacing ``E`` by one
state whose exit law is the ``nu_E``-weighted, normalized exit distribution
does not change committors at leading order, and after finitely many such
lifts no traps are left.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from metachain.chain import PerturbedChain, ergodic_decomposition
from metachain.committor import CommittorField, _check_sets, solve_committor_monomial
from metachain.errors import StructuralError, ValidationError
from metachain.perturb import ONE, ZERO, PerturbedValue, pv, pv_add, pv_div, pv_mul, pv_sum


@dataclass
class LumpingMap:
    """Record of successive lifts.

    ``levels[k]`` lists, for each state of the chain after pass ``k``, the set
    of original states it stands for (``levels[0]`` is the identity).
    ``scales`` holds ``(label, Z)`` for every lifted class, ``Z`` being the
    ``nu``-weighted exit mass used to normalize its exit law.
    """

    labels: tuple[str, ...]
    levels: list[tuple[frozenset[int], ...]] = field(default_factory=list)
    scales: list[tuple[str, PerturbedValue]] = field(default_factory=list)

    @classmethod
    def identity(cls, chain: PerturbedChain) -> "LumpingMap":
        return cls(chain.labels, [tuple(frozenset([i]) for i in range(chain.n))])

    @property
    def origins(self) -> tuple[frozenset[int], ...]:
        return self.levels[-1]

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    def image(self) -> dict[int, int]:
        """Original state -> index in the final chain."""
        return {i: k for k, group in enumerate(self.origins) for i in group}

    def to_json(self) -> dict:
        return {
            "depth": self.depth,
            "lifts": [{"state": s, "Z": z.to_json()} for s, z in self.scales],
            "final": [sorted(self.labels[i] for i in group) for group in self.origins],
        }


def lift_label(labels: Iterable[str]) -> str:
    return "{" + "+".join(labels) + "}"


def lift_classes(
    chain: PerturbedChain,
    classes: Sequence[Iterable[int]],
    nus: Sequence[Mapping[int, float]],
) -> tuple[PerturbedChain, list[int], list[PerturbedValue]]:
    """Lift several disjoint classes at once.

    Each class becomes one state at the position of its smallest member; all
    other states keep their relative order.  For a lifted class ``E``::

        p~(x, E) = sum_{z in E} p(x, z)
        p~(E, y) = sum_{z in E} nu(z) p(z, y) / Z,   Z = sum_{z in E, y not in E} nu(z) p(z, y)

    Lifting disjoint classes together or one after the other gives the same
    chain.  Returns ``(lifted, position, Z_per_class)``; ``position[i]`` is the
    new index of old state ``i``.  A class without any exit gets ``Z = 0`` and
    no outgoing entries.
    """
    classes = [sorted(set(c)) for c in classes]
    owner: dict[int, int] = {}
    for k, c in enumerate(classes):
        if not c:
            raise ValidationError("cannot lift an empty class")
        if len(c) == chain.n:
            raise ValidationError("the class is the whole state space; nothing to lift into")
        for i in c:
            if i in owner:
                raise ValidationError("lifted classes must be disjoint")
            owner[i] = k
    anchors = {c[0]: k for k, c in enumerate(classes)}
    position = [-1] * chain.n
    labels: list[str] = []
    for i in range(chain.n):
        if i in owner and i not in anchors:
            continue
        position[i] = len(labels)
        labels.append(lift_label(chain.labels[z] for z in classes[anchors[i]]) if i in anchors else chain.labels[i])
    for i, k in owner.items():
        position[i] = position[classes[k][0]]

    entries: dict[tuple[int, int], PerturbedValue] = {}

    def add(key, value):
        if key[0] != key[1]:
            entries[key] = pv_add(entries.get(key, ZERO), value)

    for (i, j), v in sorted(chain.entries.items()):
        if i not in owner:
            add((position[i], position[j]), v)
    scales = []
    for c, nu in zip(classes, nus):
        exits: dict[int, PerturbedValue] = {}
        inside = set(c)
        for z in c:
            for y, v in chain.row(z):
                if y not in inside:
                    exits[position[y]] = pv_add(exits.get(position[y], ZERO), pv_mul(pv(nu[z]), v))
        Z = pv_sum(exits[y] for y in sorted(exits))
        scales.append(Z)
        if Z.is_zero:
            continue
        e = position[c[0]]
        for y in sorted(exits):
            add((e, y), pv_div(exits[y], Z))
    return PerturbedChain(labels, entries), position, scales


def lift_class(chain: PerturbedChain, E: Iterable[int], nu: Mapping[int, float]) -> tuple[PerturbedChain, list[int], PerturbedValue]:
    """Lift the single class ``E``; see :func:`lift_classes`."""
    lifted, position, (Z,) = lift_classes(chain, [E], [nu])
    if Z.is_zero:
        raise StructuralError("lifted class has no exit; the chain is not irreducible")
    return lifted, position, Z


def pushback(field_: CommittorField, lump: LumpingMap, A: Iterable[int], B: Iterable[int]) -> CommittorField:
    """Give every original state the value of the state it was lumped into.

    ``field_`` lives on the fully lifted chain; ``A`` and ``B`` are the
    original boundary sets and keep the values 1 and 0.
    """
    A, B = frozenset(A), frozenset(B)
    values = {}
    for i, k in sorted(lump.image().items()):
        values[i] = ONE if i in A else ZERO if i in B else field_.asymptotic[k]
    diagnostics = dict(field_.diagnostics)
    diagnostics["lifting"] = lump.to_json()
    method = "lifted" if lump.depth else field_.method
    return CommittorField(A, B, method, asymptotic=values, diagnostics=diagnostics)


def asymptotic_committor(chain: PerturbedChain, A: Iterable[int], B: Iterable[int]) -> CommittorField:
    """Leading order of ``h_{A,B}`` for any boundary, lifting traps as needed.

    Repeats: find the essential classes that miss ``A | B``; if there are
    none, solve the trap-free problem; otherwise lift every such class (in
    ascending order of their smallest state) and start over on the smaller
    chain.  Values are then pulled back to the original states.  A class with
    no exit at all -- only possible for a reducible input such as a truncated
    approximation -- can never reach ``A`` and joins ``B`` instead.
    """
    A, B = _check_sets(chain, A, B)
    lump = LumpingMap.identity(chain)
    cur = chain
    cur_A, cur_B = set(A), set(B)
    prev = None
    while True:
        dec = ergodic_decomposition(cur)
        boundary = cur_A | cur_B
        free = [(c, nu) for c, nu in zip(dec.classes, dec.nu) if not boundary.intersection(c)]
        if not free:
            break
        metric = (dec.n_classes, len(dec.transient))
        if prev is not None and not metric < prev:
            raise StructuralError(f"lifting made no progress: (classes, transient) stayed at {metric}")
        prev = metric
        lifted, position, scales = lift_classes(cur, [c for c, _ in free], [nu for _, nu in free])
        origins: list[frozenset[int]] = [frozenset()] * lifted.n
        for i, group in enumerate(lump.origins):
            origins[position[i]] = origins[position[i]] | group
        for (c, _), Z in zip(free, scales):
            label = lifted.labels[position[c[0]]]
            lump.scales.append((label, Z))
            if Z.is_zero:
                cur_B.add(c[0])
        cur_A = {position[i] for i in cur_A}
        cur_B = {position[i] for i in cur_B}
        lump.levels.append(tuple(origins))
        cur = lifted
    inner = solve_committor_monomial(cur, dec, cur_A, cur_B)
    return pushback(inner, lump, A, B)
