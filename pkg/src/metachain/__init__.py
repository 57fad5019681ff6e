"""Asymptotic analysis of irreducibly perturbed Markov chains.

Transition probabilities are monomials ``c * eps**k``; everything the package
computes (committors, effective chains, stationary limits) is exact up to
asymptotic equivalence as ``eps -> 0``.  The :mod:`metachain.oracle` module
holds brute-force finite-``eps`` counterparts used to check those results.
"""

from metachain.perturb import ONE, ZERO, Order, PerturbedValue, evaluate, pv, pv_add, pv_div, pv_mul, pv_order
from metachain.chain import (
    ErgodicDecomposition,
    PerturbedChain,
    ValidationReport,
    ergodic_decomposition,
    relevant_graph,
    restricted_stationary,
    validate,
)
from metachain.committor import (
    CommittorField,
    detect_traps,
    extract_order,
    newton_inverse,
    solve_committor_monomial,
    solve_committor_numeric,
)
from metachain.lifting import LumpingMap, asymptotic_committor, lift_class, pushback
from metachain.hierarchy import (
    AsymptoticDistribution,
    HierarchyLevel,
    asymptotic_stationary,
    build_hierarchy,
    check_approximation,
    effective_chain,
    rescale,
    reversible_chain,
    verify_metastable_set,
)
from metachain.errors import (
    IllConditionedError,
    MetachainError,
    NewtonDivergenceError,
    NumericalError,
    OrderExtractionError,
    StructuralError,
    TrapError,
    ValidationError,
)

__version__ = "0.1.0"
