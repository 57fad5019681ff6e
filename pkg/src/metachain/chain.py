"""Perturbed chains, validation and the ergodic decomposition of the limit chain.

A :class:`PerturbedChain` stores only off-diagonal transitions, each as a
:class:`~metachain.perturb.PerturbedValue`.  Diagonal entries are implicit:
the holding probability is whatever mass the row leaves over.

Numerical evaluation at a finite ``eps`` uses one extra rule.  A row whose
order-one coefficients already sum to 1 (a *tight* row, e.g. ``1 - eps``
stored by its limit ``1``) cannot also carry its vanishing entries on top.
For such rows the order-one entries give up, proportionally, exactly the
mass of the vanishing ones, and the holding probability is zero.  This keeps
every evaluated matrix stochastic while changing entries only at subleading
order.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from fractions import Fraction
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from metachain.errors import ValidationError
from metachain.perturb import ZERO, PerturbedValue, as_exponent, evaluate, pv_sum

LABEL_RE = re.compile(r"^[A-Za-z0-9_]+$")
TIGHT_TOL = 1e-9


@dataclass(frozen=True)
class StateId:
    index: int
    label: str


class PerturbedChain:
    """Finite chain with monomial off-diagonal transition probabilities.

    Parameters
    ----------
    labels : sequence of str
        State names; position in the sequence is the state index.
    entries : mapping ``(i, j) -> PerturbedValue``
        Off-diagonal transitions.  Zero entries are dropped; insertion order is
        kept so that JSON round trips reproduce the input.
    """

    def __init__(self, labels: Sequence[str], entries: Mapping[tuple[int, int], PerturbedValue]):
        labels = tuple(str(s) for s in labels)
        if len(set(labels)) != len(labels):
            raise ValidationError("state labels must be unique")
        if not labels:
            raise ValidationError("a chain needs at least one state")
        n = len(labels)
        clean = {}
        for (i, j), value in entries.items():
            if not isinstance(value, PerturbedValue):
                raise TypeError(f"entry ({i},{j}) is not a PerturbedValue")
            if not (0 <= i < n and 0 <= j < n):
                raise ValidationError(f"entry ({i},{j}) out of range")
            if i == j:
                raise ValidationError(f"diagonal entry for {labels[i]!r}: diagonals are implicit")
            if value.is_zero:
                continue
            if value.exp < 0:
                raise ValidationError(f"negative exponent on {labels[i]}->{labels[j]}")
            clean[(i, j)] = value
        self._labels = labels
        self._index = {s: k for k, s in enumerate(labels)}
        self._entries = MappingProxyType(clean)
        rows: list[list[tuple[int, PerturbedValue]]] = [[] for _ in range(n)]
        for (i, j), value in sorted(clean.items()):
            rows[i].append((j, value))
        self._rows = tuple(tuple(r) for r in rows)
        self._eps_max = None

    # construction ---------------------------------------------------------

    @classmethod
    def from_edges(cls, labels: Sequence[str], edges: Iterable[tuple]) -> "PerturbedChain":
        """Build from ``(from_label, to_label, coeff, exp)`` tuples."""
        index = {s: k for k, s in enumerate(labels)}
        entries = {}
        for src, dst, coeff, exp in edges:
            try:
                key = (index[src], index[dst])
            except KeyError as err:
                raise ValidationError(f"unknown state {err.args[0]!r}") from None
            if key in entries:
                raise ValidationError(f"duplicate edge {src}->{dst}")
            entries[key] = PerturbedValue(coeff, as_exponent(exp))
        return cls(labels, entries)

    # basic accessors --------------------------------------------------------

    @property
    def labels(self) -> tuple[str, ...]:
        return self._labels

    @property
    def states(self) -> tuple[StateId, ...]:
        return tuple(StateId(k, s) for k, s in enumerate(self._labels))

    @property
    def n(self) -> int:
        return len(self._labels)

    @property
    def entries(self) -> Mapping[tuple[int, int], PerturbedValue]:
        return self._entries

    def __len__(self):
        return self.n

    def __repr__(self):
        return f"PerturbedChain({len(self._labels)} states, {len(self._entries)} edges)"

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise ValidationError(f"unknown state {label!r}") from None

    def indices(self, labels: Iterable[str]) -> frozenset[int]:
        return frozenset(self.index(s) for s in labels)

    def row(self, i: int) -> tuple[tuple[int, PerturbedValue], ...]:
        """Off-diagonal entries of row ``i`` as ``(j, value)``, sorted by ``j``."""
        return self._rows[i]

    def p(self, i: int, j: int) -> PerturbedValue:
        return self._entries.get((i, j), ZERO)

    def exit_mass(self, i: int) -> PerturbedValue:
        """Leading order of the total off-diagonal mass of row ``i``."""
        return pv_sum(v for _, v in self._rows[i])

    def order_one_mass(self, i: int) -> float:
        return sum(v.coeff for _, v in self._rows[i] if v.exp == 0)

    def is_tight(self, i: int) -> bool:
        return abs(self.order_one_mass(i) - 1.0) <= TIGHT_TOL

    @property
    def eps_max(self) -> float:
        """Largest eps in (0, 1] at which every row evaluates to a probability vector."""
        if self._eps_max is None:
            self._eps_max = _find_eps_max(self)
        return self._eps_max

    # numerical views --------------------------------------------------------

    def offdiag(self, eps: float) -> np.ndarray:
        """Evaluated off-diagonal weights at ``eps``; diagonal left at zero."""
        n = self.n
        W = np.zeros((n, n))
        for i in range(n):
            row = self._rows[i]
            if not row:
                continue
            if self.is_tight(i):
                small = sum(evaluate(v, eps) for _, v in row if v.exp > 0)
                if small > 1.0:
                    raise ValidationError(f"row {self._labels[i]!r} infeasible at eps={eps:g}")
                scale = (1.0 - small) / self.order_one_mass(i)
                for j, v in row:
                    W[i, j] = v.coeff * scale if v.exp == 0 else evaluate(v, eps)
            else:
                for j, v in row:
                    W[i, j] = evaluate(v, eps)
        return W

    def matrix(self, eps: float) -> np.ndarray:
        """Stochastic matrix ``P_eps`` (diagonal completed)."""
        W = self.offdiag(eps)
        out = W.sum(axis=1)
        if np.any(out > 1.0 + 1e-12):
            bad = [self._labels[i] for i in np.flatnonzero(out > 1.0 + 1e-12)]
            raise ValidationError(f"rows {bad} exceed probability one at eps={eps:g}")
        W[np.diag_indices_from(W)] = np.clip(1.0 - out, 0.0, None)
        return W

    def limit_matrix(self) -> np.ndarray:
        """``P_0``: order-one coefficients with completed diagonal."""
        n = self.n
        P0 = np.zeros((n, n))
        for (i, j), v in self._entries.items():
            if v.exp == 0:
                P0[i, j] = v.coeff
        out = P0.sum(axis=1)
        P0[np.diag_indices_from(P0)] = np.clip(1.0 - out, 0.0, None)
        return P0

    def edge_graph(self) -> csr_matrix:
        n = self.n
        if not self._entries:
            return csr_matrix((n, n))
        rows, cols = zip(*self._entries.keys())
        return csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))

    # serialization ----------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "states": list(self._labels),
            "edges": [
                {
                    "from": self._labels[i],
                    "to": self._labels[j],
                    "coeff": v.coeff,
                    "exp": [v.exp.numerator, v.exp.denominator],
                }
                for (i, j), v in self._entries.items()
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_json(cls, data: Mapping) -> "PerturbedChain":
        if not isinstance(data, Mapping):
            raise ValidationError("chain JSON must be an object")
        extra = set(data) - {"states", "edges"}
        if extra:
            raise ValidationError(f"unknown top-level fields: {sorted(extra)}")
        if "states" not in data or "edges" not in data:
            raise ValidationError("chain JSON needs 'states' and 'edges'")
        states = data["states"]
        if not isinstance(states, list) or not all(isinstance(s, str) for s in states):
            raise ValidationError("'states' must be a list of strings")
        for s in states:
            if not LABEL_RE.match(s):
                raise ValidationError(f"invalid state label {s!r}")
        edges = []
        for k, edge in enumerate(data["edges"]):
            if not isinstance(edge, Mapping):
                raise ValidationError(f"edge #{k} is not an object")
            keys = set(edge)
            if keys != {"from", "to", "coeff", "exp"}:
                raise ValidationError(f"edge #{k} has fields {sorted(keys)}; expected from/to/coeff/exp")
            exp = edge["exp"]
            if not (isinstance(exp, list) and len(exp) == 2 and all(isinstance(e, int) and not isinstance(e, bool) for e in exp)):
                raise ValidationError(f"edge #{k}: exp must be [numerator, denominator]")
            if exp[1] <= 0:
                raise ValidationError(f"edge #{k}: exp denominator must be positive")
            coeff = edge["coeff"]
            if isinstance(coeff, bool) or not isinstance(coeff, (int, float)) or not coeff > 0:
                raise ValidationError(f"edge #{k}: coeff must be a positive number")
            edges.append((edge["from"], edge["to"], float(coeff), Fraction(exp[0], exp[1])))
        return cls.from_edges(states, edges)

    @classmethod
    def loads(cls, text: str) -> "PerturbedChain":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as err:
            raise ValidationError(f"invalid JSON: {err}") from None
        return cls.from_json(data)

    @classmethod
    def load(cls, path) -> "PerturbedChain":
        with open(path) as fh:
            return cls.loads(fh.read())


def _row_feasible(chain: PerturbedChain, i: int, eps: float) -> bool:
    row = chain.row(i)
    small = sum(evaluate(v, eps) for _, v in row if v.exp > 0)
    if chain.is_tight(i):
        return small <= 1.0
    return chain.order_one_mass(i) + small <= 1.0 + 1e-12


def _find_eps_max(chain: PerturbedChain) -> float:
    if any(chain.order_one_mass(i) > 1.0 + TIGHT_TOL for i in range(chain.n)):
        return 0.0
    eps_max = 1.0
    for i in range(chain.n):
        if _row_feasible(chain, i, eps_max):
            continue
        lo, hi = 0.0, eps_max
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if mid > 0 and _row_feasible(chain, i, mid):
                lo = mid
            else:
                hi = mid
        eps_max = lo
    return eps_max


# validation -----------------------------------------------------------------


@dataclass
class ValidationReport:
    irreducible: bool
    eps_max: float
    tight_rows: list[str]
    regular: bool = True
    errors: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "irreducible": self.irreducible,
            "eps_max": self.eps_max,
            "tight_rows": self.tight_rows,
            "regular": self.regular,
            "errors": self.errors,
        }


def validate(chain: PerturbedChain) -> ValidationReport:
    """Check irreducibility and row-sum feasibility.

    Regularity needs no check: products of monomials are always mutually
    comparable.
    """
    errors = []
    n_comp, _ = connected_components(chain.edge_graph(), directed=True, connection="strong")
    irreducible = n_comp == 1
    if not irreducible:
        errors.append(f"chain is not irreducible for eps > 0 ({n_comp} strongly connected components)")
    for i in range(chain.n):
        mass = chain.order_one_mass(i)
        if mass > 1.0 + TIGHT_TOL:
            errors.append(f"row {chain.labels[i]!r}: order-one coefficients sum to {mass:g} > 1")
    eps_max = chain.eps_max
    if eps_max <= 0.0 and not errors:
        errors.append("no admissible eps")
    tight = [chain.labels[i] for i in range(chain.n) if chain.row(i) and chain.is_tight(i)]
    return ValidationReport(irreducible=irreducible, eps_max=eps_max, tight_rows=tight, errors=errors)


def require_valid(chain: PerturbedChain) -> None:
    report = validate(chain)
    if not report.ok:
        raise ValidationError("; ".join(report.errors))


def check_eps(chain: PerturbedChain, eps: float) -> None:
    if not (0.0 < eps <= chain.eps_max):
        raise ValidationError(f"eps={eps!r} outside the validity interval (0, {chain.eps_max:g}]")


# ergodic decomposition ---------------------------------------------------------


def relevant_graph(chain: PerturbedChain) -> dict[int, tuple[int, ...]]:
    """Adjacency of order-one (``P_0``-relevant) transitions."""
    adj = {i: tuple(j for j, v in chain.row(i) if v.exp == 0) for i in range(chain.n)}
    return adj


def _relevant_csr(chain: PerturbedChain) -> csr_matrix:
    adj = relevant_graph(chain)
    rows = [i for i, js in adj.items() for _ in js]
    cols = [j for js in adj.values() for j in js]
    n = chain.n
    return csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))


@dataclass(frozen=True)
class ErgodicDecomposition:
    """Essential classes of ``P_0``, the transient set and the ``nu_E``.

    Classes are sorted by their smallest state index, which is also the
    default representative.
    """

    classes: tuple[tuple[int, ...], ...]
    transient: tuple[int, ...]
    nu: tuple[Mapping[int, float], ...]
    representatives: tuple[int, ...]

    def class_of(self, i: int) -> int | None:
        for k, cls in enumerate(self.classes):
            if i in cls:
                return k
        return None

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def with_representatives(self, reps: Sequence[int]) -> "ErgodicDecomposition":
        reps = tuple(reps)
        if len(reps) != len(self.classes) or any(r not in c for r, c in zip(reps, self.classes)):
            raise ValidationError("each representative must belong to its class")
        return ErgodicDecomposition(self.classes, self.transient, self.nu, reps)

    def to_json(self, chain: PerturbedChain) -> dict:
        lab = chain.labels
        return {
            "classes": [[lab[i] for i in c] for c in self.classes],
            "transient": [lab[i] for i in self.transient],
            "representatives": [lab[i] for i in self.representatives],
            "nu": [{lab[i]: w for i, w in sorted(nu.items())} for nu in self.nu],
        }


def ergodic_decomposition(chain: PerturbedChain) -> ErgodicDecomposition:
    n = chain.n
    n_comp, comp = connected_components(_relevant_csr(chain), directed=True, connection="strong")
    leaves = np.ones(n_comp, dtype=bool)
    for i, js in relevant_graph(chain).items():
        for j in js:
            if comp[i] != comp[j]:
                leaves[comp[i]] = False
    members: dict[int, list[int]] = {}
    for i in range(n):
        members.setdefault(int(comp[i]), []).append(i)
    classes = sorted((tuple(members[c]) for c in range(n_comp) if leaves[c]), key=min)
    essential = {i for c in classes for i in c}
    transient = tuple(i for i in range(n) if i not in essential)
    nu = tuple(MappingProxyType(restricted_stationary(chain, c)) for c in classes)
    return ErgodicDecomposition(tuple(classes), transient, nu, tuple(min(c) for c in classes))


def restricted_stationary(chain: PerturbedChain, E: Iterable[int]) -> dict[int, float]:
    """Stationary law ``nu_E`` of ``P_0`` restricted to the essential class ``E``."""
    E = sorted(E)
    m = len(E)
    if m == 1:
        return {E[0]: 1.0}
    pos = {s: k for k, s in enumerate(E)}
    P = np.zeros((m, m))
    for i in E:
        for j, v in chain.row(i):
            if v.exp == 0:
                if j not in pos:
                    raise ValidationError(f"{chain.labels[i]!r} has an order-one exit from the class")
                P[pos[i], pos[j]] = v.coeff
    P[np.diag_indices(m)] = 1.0 - P.sum(axis=1)
    M = (P - np.eye(m)).T
    M[-1, :] = 1.0
    rhs = np.zeros(m)
    rhs[-1] = 1.0
    try:
        nu = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as err:
        raise ValidationError(f"singular within-class system: {err}") from None
    resid = np.max(np.abs(nu @ P - nu))
    if resid > 1e-12 or np.any(nu <= 0):
        raise ValidationError(f"restricted stationary solve failed (residual {resid:.2e})")
    nu = nu / nu.sum()
    return {s: float(nu[pos[s]]) for s in E}
