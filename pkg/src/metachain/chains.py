"""Reference chains and a seeded generator of random monomial chains."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from metachain.chain import PerturbedChain, ergodic_decomposition, validate
from metachain.perturb import PerturbedValue


def two_state(alpha=1, beta=2, a=1.0, b=1.0) -> PerturbedChain:
    """``p(x,y) = a eps^alpha``, ``p(y,x) = b eps^beta``."""
    return PerturbedChain.from_edges(["x", "y"], [("x", "y", a, alpha), ("y", "x", b, beta)])


def chain_a() -> PerturbedChain:
    return two_state(1, 2)


def chain_b(linked: bool = False) -> PerturbedChain:
    """Four-state chain with three wells ``x, y, z`` and a transient hub ``w``.

    ``w -> y`` has probability ``1 - eps`` and is stored by its limit 1; the row
    is tight, so the evaluated matrix reproduces ``1 - eps`` exactly.  With
    ``linked=True`` the extra edges ``z <-> y`` of order eps are added.
    """
    edges = [
        ("x", "w", 1.0, 1),
        ("w", "z", 1.0, 1),
        ("y", "x", 1.0, 1),
        ("w", "y", 1.0, 0),
        ("z", "w", 1.0, 2),
    ]
    if linked:
        edges += [("z", "y", 1.0, 1), ("y", "z", 1.0, 1)]
    return PerturbedChain.from_edges(["x", "y", "w", "z"], edges)


def random_chain(
    rng: np.random.Generator,
    n: int | None = None,
    max_exp: int = 3,
    extra_edges: int = 2,
    p_order_one: float = 0.35,
    half_exponents: bool = False,
    min_eps_max: float = 0.1,
) -> PerturbedChain:
    """Random irreducible monomial chain.

    A random Hamiltonian cycle guarantees irreducibility; each state gets up
    to ``extra_edges`` further exits.  Order-one coefficients of a row are
    capped at total 0.7 so no row is tight, and vanishing coefficients are
    shrunk until the chain is valid for all ``eps <= min_eps_max``.
    """
    if n is None:
        n = int(rng.integers(2, 9))
    labels = [f"s{k}" for k in range(n)]
    perm = rng.permutation(n)
    pairs = {(int(perm[k]), int(perm[(k + 1) % n])) for k in range(n)} if n > 1 else set()
    for i in range(n):
        for _ in range(int(rng.integers(0, extra_edges + 1))):
            j = int(rng.integers(0, n))
            if j != i:
                pairs.add((i, j))
    entries = {}
    for i, j in sorted(pairs):
        if rng.random() < p_order_one:
            exp = Fraction(0)
        elif half_exponents and rng.random() < 0.3:
            exp = Fraction(int(rng.integers(1, 2 * max_exp + 1)), 2)
        else:
            exp = Fraction(int(rng.integers(1, max_exp + 1)))
        entries[(i, j)] = [float(rng.uniform(0.2, 1.0)), exp]
    for i in range(n):
        row = [k for k in entries if k[0] == i and entries[k][1] == 0]
        mass = sum(entries[k][0] for k in row)
        if mass > 0.7:
            for k in row:
                entries[k][0] *= 0.7 / mass
    while True:
        chain = PerturbedChain(labels, {k: PerturbedValue(c, e) for k, (c, e) in entries.items()})
        if chain.eps_max >= min_eps_max:
            break
        for k in entries:
            if entries[k][1] > 0:
                entries[k][0] *= 0.5
    assert validate(chain).ok
    return chain


def random_chain_with_class(rng: np.random.Generator, n: int | None = None, class_size: int | None = None, **kw) -> PerturbedChain:
    """Random chain guaranteed to have an essential class of ``class_size >= 2`` states."""
    while True:
        chain = random_chain(rng, n=n, **kw)
        dec = ergodic_decomposition(chain)
        sizes = [len(c) for c in dec.classes]
        want = class_size or 2
        if max(sizes) >= want and chain.n > max(sizes):
            return chain
