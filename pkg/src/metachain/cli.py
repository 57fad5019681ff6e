"""Command-line front end.

Every subcommand except ``sweep`` prints one JSON report::

    {"schema": "metachain.report/v1", "command": ..., "input": {"path", "sha256"},
     "results": ..., "diagnostics": ..., "timings": ...}

``sweep`` prints CSV with header ``eps,quantity,value,predicted``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure (including a
verification check that did not pass), 64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
import time
from typing import Sequence

import numpy as np

from metachain import oracle
from metachain.chain import PerturbedChain, ergodic_decomposition, validate
from metachain.committor import committor_newton, extract_order, solve_committor_numeric
from metachain.errors import MetachainError, NumericalError, StructuralError, TrapError, ValidationError
from metachain.hierarchy import (
    asymptotic_stationary,
    build_hierarchy,
    class_masses,
    effective_chain,
    escape_value,
    final_classes,
    reversible_chain,
    verify_metastable_set,
)
from metachain.lifting import asymptotic_committor
from metachain.parallel import thread_count

SCHEMA = "metachain.report/v1"
EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_USAGE = 0, 2, 3, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# argument helpers ----------------------------------------------------------------------------


def _labels(text: str) -> list[str]:
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a comma-separated list of state labels")
    return items


def _ladder(text: str) -> list[float]:
    try:
        values = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad eps ladder {text!r}") from None
    if not values or any(not 0 < v <= 1 for v in values):
        raise argparse.ArgumentTypeError("eps values must lie in (0, 1]")
    return sorted(values, reverse=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metachain", description="Asymptotic analysis of perturbed Markov chains.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("chain", help="chain JSON file ('-' for standard input)")
        return p

    add("validate", "check irreducibility and the admissible eps range")
    p = add("decompose", "essential classes of the limit chain")
    p.add_argument("--representatives", type=_labels, help="one state per class overriding the defaults")
    p = add("committor", "hitting probabilities of TARGET before AVOID")
    p.add_argument("--target", type=_labels, required=True)
    p.add_argument("--avoid", type=_labels, required=True)
    p.add_argument("--eps", type=float, help="also solve numerically at this eps")
    p.add_argument("--solver", choices=["direct", "newton", "elimination"], default="direct")
    add("hierarchy", "effective chains across metastable time scales")
    p = add("stationary", "limit of the stationary distribution")
    p.add_argument("--eps", type=float, help="also report the stationary law at this eps")
    p = add("verify", "run oracle and identity checks at finite eps")
    p.add_argument("--suite", choices=["identities", "oracle", "all"], default="all")
    p.add_argument("--eps-ladder", type=_ladder, default=[1e-2, 1e-3])
    p.add_argument("--seed", type=int, default=0, help="seed for sampled state triples")
    p.add_argument("--samples", type=int, default=20, help="sampled triples per identity and eps")
    p = add("metastable", "check whether a state set is metastable")
    p.add_argument("--set", dest="members", type=_labels, required=True)
    p = add("sweep", "CSV of a quantity along an eps ladder next to its asymptotic prediction")
    p.add_argument("--quantity", choices=["committor", "class-mass", "q-hat"], required=True)
    p.add_argument("--eps-ladder", type=_ladder, default=[1e-1, 1e-2, 1e-3, 1e-4])
    p.add_argument("--target", type=_labels)
    p.add_argument("--avoid", type=_labels)
    p.add_argument("--start", help="start state (committor)")
    p.add_argument("--state", help="a state of the class (class-mass)")
    p.add_argument("--from", dest="src", help="state of the source class (q-hat)")
    p.add_argument("--to", dest="dst", help="state of the target class (q-hat)")
    return parser


def _load(path: str) -> tuple[PerturbedChain, str]:
    if path == "-":
        chain = PerturbedChain.loads(sys.stdin.read())
    else:
        try:
            chain = PerturbedChain.load(path)
        except OSError as err:
            raise ValidationError(f"cannot read {path}: {err.strerror}") from None
    return chain, chain.digest()


# subcommands ---------------------------------------------------------------------------------


def _cmd_validate(chain, args):
    report = validate(chain)
    return report.to_json(), {}, EXIT_OK if report.ok else EXIT_INVALID


def _cmd_decompose(chain, args):
    dec = ergodic_decomposition(chain)
    if args.representatives:
        dec = dec.with_representatives([chain.index(s) for s in args.representatives])
    return dec.to_json(chain), {}, EXIT_OK


def _cmd_committor(chain, args):
    A, B = chain.indices(args.target), chain.indices(args.avoid)
    field = asymptotic_committor(chain, A, B)
    results = field.to_json(chain)
    diagnostics = results.pop("diagnostics", {})
    if args.eps is not None:
        if args.solver == "direct":
            num = solve_committor_numeric(chain, A, B, args.eps)
        elif args.solver == "newton":
            num = committor_newton(chain, A, B, args.eps)
        else:
            h = oracle.committor(chain, args.eps, A, B)
            num = None
            results["numeric"] = {"eps": args.eps, "solver": "elimination", "values": dict(zip(chain.labels, map(float, h)))}
        if num is not None:
            results["numeric"] = {"eps": args.eps, "solver": args.solver, "values": dict(zip(chain.labels, map(float, num.numeric)))}
            diagnostics["condition"] = num.condition
            diagnostics.update(num.diagnostics)
    return results, diagnostics, EXIT_OK


def _cmd_hierarchy(chain, args):
    levels = build_hierarchy(chain)
    results = {
        "levels": [lv.to_json() for lv in levels],
        "final_classes": [sorted(c) for c in final_classes(chain, levels)],
    }
    return results, {"n_levels": len(levels)}, EXIT_OK


def _cmd_stationary(chain, args):
    dist = asymptotic_stationary(chain)
    results = dist.to_json()
    diagnostics = {"normalization_residual": results.pop("normalization_residual")}
    if args.eps is not None:
        mu = oracle.stationary_direct(chain, args.eps)
        results["at_eps"] = {"eps": args.eps, "values": dict(zip(chain.labels, map(float, mu)))}
    return results, diagnostics, EXIT_OK


def _check(name, value, tol, **context):
    ok = bool(value <= tol) if tol is not None else None
    return {"check": name, **context, "value": float(value), "tolerance": tol, "ok": ok}


def _identity_checks(chain, ladder, rng, samples):
    n = chain.n
    out = []
    triples = [tuple(int(v) for v in rng.integers(0, n, 3)) for _ in range(samples)]
    for eps in ladder:
        mu = oracle.stationary_gth(chain, eps)
        for x, y in itertools.permutations(range(n), 2):
            out.append(_check("escape_symmetry", oracle.prop1_residual(chain, eps, x, y, mu), 1e-9, eps=eps, states=[chain.labels[x], chain.labels[y]]))
        for x in range(n):
            out.append(_check("stationary_representation", oracle.stationary_representation_residual(chain, eps, x, mu), 1e-8, eps=eps, states=[chain.labels[x]]))
        for x, y, z in triples:
            r = oracle.mean_hitting_identity_check(chain, eps, x, y, z)
            out.append(_check("mean_hitting_identity", r.residual / (1 + abs(r.lhs)), 1e-8, eps=eps, states=[chain.labels[i] for i in (x, y, z)]))
        if n >= 3:
            for _ in range(samples):
                x, a, b = (int(v) for v in rng.permutation(n)[:3])
                out.append(_check("quotient_identity", oracle.quotient_identity_residual(chain, eps, x, {a}, {b}), 1e-9, eps=eps, states=[chain.labels[i] for i in (x, a, b)]))
        if n >= 2:
            for _ in range(samples):
                perm = [int(v) for v in rng.permutation(n)]
                size = int(rng.integers(1, n))
                J, y = perm[:size], perm[-1]
                value = abs(oracle.direct_path_hitting(chain, eps, J, J[0], y) - oracle.hitting_distribution(chain, eps, J, J[0], y))
                out.append(_check("direct_path_hitting", value, 1e-9, eps=eps, states=[chain.labels[i] for i in J] + [chain.labels[y]]))
    return out


def _oracle_checks(chain, ladder):
    out = []
    dec = ergodic_decomposition(chain)
    for eps in ladder:
        direct = oracle.stationary_direct(chain, eps)
        gth = oracle.stationary_gth(chain, eps)
        out.append(_check("stationary_gth_vs_direct", float(np.max(np.abs(gth - direct))), 1e-9, eps=eps))
        if chain.n <= oracle.TREE_LIMIT:
            tree = oracle.stationary_tree(chain, eps)
            out.append(_check("stationary_tree_vs_direct", float(np.max(np.abs(tree - direct))), 1e-9, eps=eps))
        for c in dec.classes:
            if len(c) > 1:
                out.append(_check("exit_distribution", oracle.exit_distribution_check(chain, eps, c), None, eps=eps, states=[chain.labels[i] for i in c]))
    if len(ladder) >= 3 and dec.n_classes > 1:
        reps = list(dec.representatives)
        S0 = set(reps)
        for r in reps:
            field = asymptotic_committor(chain, {r}, S0 - {r}).asymptotic
            values = [oracle.committor(chain, eps, {r}, S0 - {r}) for eps in ladder]
            for z in range(chain.n):
                if z in S0 or field[z].is_zero:
                    continue
                fit = extract_order([(e, v[z]) for e, v in zip(ladder, values)], max_degree=4 * chain.n)
                err = abs(fit.value.coeff / field[z].coeff - 1) if fit.value.exp == field[z].exp else float("inf")
                out.append(_check("committor_order", err, 0.02, target=chain.labels[r], states=[chain.labels[z]]))
    return out


def _cmd_verify(chain, args):
    rng = np.random.default_rng(args.seed)
    checks = []
    if args.suite in ("identities", "all"):
        checks += _identity_checks(chain, args.eps_ladder, rng, args.samples)
    if args.suite in ("oracle", "all"):
        checks += _oracle_checks(chain, args.eps_ladder)
    failed = [c for c in checks if c["ok"] is False]
    results = {"suite": args.suite, "eps_ladder": args.eps_ladder, "passed": not failed, "n_checks": len(checks), "n_failed": len(failed), "checks": checks}
    return results, {"seed": args.seed}, EXIT_OK if not failed else EXIT_NUMERIC


def _cmd_metastable(chain, args):
    verdict = verify_metastable_set(chain, chain.indices(args.members))
    return verdict.to_json(), {}, EXIT_OK


def _sweep_rows(chain, args):
    q = args.quantity
    if q == "committor":
        if not (args.target and args.avoid and args.start):
            raise UsageError("committor sweep needs --target, --avoid and --start")
        A, B, z = chain.indices(args.target), chain.indices(args.avoid), chain.index(args.start)
        pred = asymptotic_committor(chain, A, B).asymptotic[z]
        name = f"h[{'+'.join(args.target)}|{'+'.join(args.avoid)}]({args.start})"
        for eps in args.eps_ladder:
            yield eps, name, float(oracle.committor(chain, eps, A, B)[z]), pred(eps)
    elif q == "class-mass":
        if not args.state:
            raise UsageError("class-mass sweep needs --state")
        dec = ergodic_decomposition(chain)
        k = dec.class_of(chain.index(args.state))
        if k is None:
            raise ValidationError(f"{args.state!r} is transient")
        pred = class_masses(dec, reversible_chain(chain, dec))[k] if dec.n_classes > 1 else None
        for eps in args.eps_ladder:
            mu = oracle.stationary_gth(chain, eps)
            value = float(sum(mu[i] for i in dec.classes[k]))
            yield eps, f"mu[{args.state}]", value, pred(eps) if pred is not None else 1.0
    else:
        if not (args.src and args.dst):
            raise UsageError("q-hat sweep needs --from and --to")
        dec = ergodic_decomposition(chain)
        a, b = dec.class_of(chain.index(args.src)), dec.class_of(chain.index(args.dst))
        if a is None or b is None or a == b:
            raise ValidationError("--from and --to must lie in two different essential classes")
        pred = reversible_chain(chain, dec).get((a, b))
        for eps in args.eps_ladder:
            value = oracle.q_hat_entry(chain, eps, dec, a, b)
            yield eps, f"q_hat[{args.src},{args.dst}]", float(value), pred(eps) if pred is not None else 0.0


# driver ----------------------------------------------------------------------------------------

COMMANDS = {
    "validate": _cmd_validate,
    "decompose": _cmd_decompose,
    "committor": _cmd_committor,
    "hierarchy": _cmd_hierarchy,
    "stationary": _cmd_stationary,
    "verify": _cmd_verify,
    "metastable": _cmd_metastable,
}


def _echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if v is not None}


def _fail(message: str, code: int) -> int:
    print(json.dumps({"schema": SCHEMA, "error": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"metachain: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    start = time.perf_counter()
    try:
        chain, digest = _load(args.chain)
        if args.command != "validate":
            report = validate(chain)
            if not report.ok:
                raise ValidationError("; ".join(report.errors))
        if args.command == "sweep":
            writer = csv.writer(sys.stdout, lineterminator="\n")
            writer.writerow(["eps", "quantity", "value", "predicted"])
            for eps, name, value, pred in _sweep_rows(chain, args):
                writer.writerow([repr(eps), name, repr(value), repr(float(pred))])
            return EXIT_OK
        results, diagnostics, code = COMMANDS[args.command](chain, args)
    except UsageError as err:
        print(f"metachain: usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as err:
        return _fail(str(err), EXIT_INVALID)
    except (NumericalError, StructuralError, TrapError) as err:
        return _fail(str(err), EXIT_NUMERIC)
    report = {
        "schema": SCHEMA,
        "command": {"name": args.command, "args": _echo(args)},
        "input": {"path": args.chain, "sha256": digest},
        "results": results,
        "diagnostics": {**diagnostics, "threads": thread_count()},
        "timings": {"total_s": round(time.perf_counter() - start, 6)},
    }
    print(json.dumps(report, indent=2))
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
