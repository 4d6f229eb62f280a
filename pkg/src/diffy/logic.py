"""Weakest preconditions, formula splitting, substitution-based quantifier
elimination, and solver-backed validity checks for loop-free code."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from .formula import (
    FAnd,
    FBool,
    FCmp,
    FNot,
    FOr,
    FQuant,
    Formula,
    TRUEF,
    conjuncts,
    fand,
    fnot,
    for_,
    formula_arrays,
    formula_scalars,
    from_boolexpr,
    map_formula,
    simplify_formula,
    subst_scalar,
)
from .lang import (
    ArrayAssign,
    ArrayRead,
    Assign,
    BinOp,
    BoolExpr,
    Cmp,
    Const,
    Expr,
    For,
    If,
    Ite,
    Seq,
    Stmt,
    Var,
    map_expr,
)
from .poly import diff_const, exprs_equal, simplify_expr
from .smt import SolverSession, SolverVerdict, SymbolTable, emit_smtlib, parse_check_output, solve


class LoopInCode(Exception):
    pass


class QeIncomplete(Exception):
    pass


# ---------------------------------------------------------------------------
# Weakest preconditions over loop-free code


def wp(post: Formula, code: Stmt, ite_budget: int = 64) -> Optional[Formula]:
    """Dijkstra-style backward substitution; None when conditional resolution
    of array stores exceeds the budget."""
    budget = [ite_budget]
    try:
        raw = simplify_formula(_wp(post, code, budget))
    except _WpBudget:
        return None
    return simplify_formula(split_store_quantifiers(raw))


class _WpBudget(Exception):
    pass


def _wp(post: Formula, code: Stmt, budget: list[int]) -> Formula:
    if isinstance(code, Seq):
        f = post
        for s in reversed(code.stmts):
            f = _wp(f, s, budget)
        return f
    if isinstance(code, Assign):
        return subst_scalar(post, code.name, code.rhs)
    if isinstance(code, ArrayAssign):
        return _subst_store(post, code, budget)
    if isinstance(code, If):
        c = from_boolexpr(code.cond)
        then_f = _wp(post, code.then, budget)
        else_f = _wp(post, code.orelse, budget)
        return fand([for_([fnot(c), then_f]), for_([c, else_f])])
    if isinstance(code, For):
        raise LoopInCode("wp requires loop-free code")
    raise TypeError(f"_wp: {code!r}")


def _subst_store(post: Formula, st: ArrayAssign, budget: list[int]) -> Formula:
    def fn(e: Expr):
        if not (isinstance(e, ArrayRead) and e.array == st.array and len(e.index) == len(st.index)):
            return None
        same, differ = True, False
        eqs: list[BoolExpr] = []
        for rd, wr in zip(e.index, st.index):
            d = diff_const(rd, wr)
            if d is None:
                same = False
                eqs.append(Cmp("==", rd, wr))
            elif d != 0:
                differ = True
            # d == 0: positions provably equal
        if differ:
            return None  # read of an unrelated element
        if same:
            return st.rhs
        budget[0] -= 1
        if budget[0] < 0:
            raise _WpBudget()
        cond: BoolExpr = eqs[0]
        for q in eqs[1:]:
            from .lang import BoolOp

            cond = BoolOp("and", (cond, q))
        return Ite(cond, st.rhs, e)

    return map_formula(post, fn)


# ---------------------------------------------------------------------------
# Boundary splitting: pull store conditionals out of bounded quantifiers, so
# "forall j in [0,N): (j == N-1 ? v : b[j]) == r" becomes
# "forall j in [0,N-1): b[j] == r  /\  v == r[j := N-1]".


def split_store_quantifiers(f: Formula) -> Formula:
    if isinstance(f, FAnd):
        return fand(split_store_quantifiers(a) for a in f.args)
    if isinstance(f, FOr):
        return for_(split_store_quantifiers(a) for a in f.args)
    if isinstance(f, FNot):
        return fnot(split_store_quantifiers(f.arg))
    if not isinstance(f, FQuant):
        return f
    body = split_store_quantifiers(f.body)
    g = FQuant(f.kind, f.var, f.lo, f.hi, body)
    for _ in range(8):  # one split per boundary term
        t = _boundary_term(g.body, g.var)
        if t is None:
            break
        g2 = _split_at(g, t)
        if g2 is None:
            break
        g = g2  # may no longer be a quantifier after full splitting
        if not isinstance(g, FQuant):
            return simplify_formula(split_store_quantifiers(g))
    return simplify_formula(g)


def _boundary_term(body: Formula, var: str) -> Optional[Expr]:
    """An Ite guard of the shape var == t (t free of var) inside the body."""
    from .lang import BoolOp, expr_vars

    found: list[Expr] = []

    def scan_cond(c) -> None:
        if isinstance(c, Cmp) and c.op == "==":
            for a, b in ((c.left, c.right), (c.right, c.left)):
                if a == Var(var) and var not in expr_vars(b):
                    found.append(b)
                    return
        if isinstance(c, BoolOp):
            for x in c.args:
                scan_cond(x)

    def scan_expr(e: Expr):
        if isinstance(e, Ite):
            scan_cond(e.cond)
        return None

    map_formula(body, lambda e: scan_expr(e))
    return found[0] if found else None


def _split_at(g: FQuant, t: Expr) -> Optional[Formula]:
    """Split a bounded quantifier at index term t."""
    var = g.var
    off_branch = _resolve_boundary(g.body, var, t, equal=False)
    at_branch = simplify_formula(
        subst_scalar(_resolve_boundary(g.body, var, t, equal=True), var, t)
    )
    guard_parts = []
    if not affine_nonneg_for_positive_param(simplify_expr(BinOp("-", t, g.lo)), "N"):
        guard_parts.append(FCmp("<=", g.lo, t))
    if not affine_nonneg_for_positive_param(simplify_expr(BinOp("-", BinOp("-", g.hi, Const(1)), t)), "N"):
        guard_parts.append(FCmp("<", t, g.hi))
    guard = fand(guard_parts)
    at_part = for_([fnot(guard), at_branch]) if g.kind == "forall" else fand([guard, at_branch])

    hi_minus_1 = simplify_expr(BinOp("-", g.hi, Const(1)))
    if exprs_equal(t, hi_minus_1):
        rest: Formula = FQuant(g.kind, var, g.lo, hi_minus_1, off_branch)
    elif exprs_equal(t, g.lo):
        rest = FQuant(g.kind, var, simplify_expr(BinOp("+", g.lo, Const(1))), g.hi, off_branch)
    elif g.kind == "forall":
        rest = FQuant(g.kind, var, g.lo, g.hi, for_([FCmp("==", Var(var), t), off_branch]))
    else:
        rest = FQuant(g.kind, var, g.lo, g.hi, fand([FCmp("!=", Var(var), t), off_branch]))
    if g.kind == "forall":
        return fand([rest, at_part])
    return for_([rest, at_part])


def _resolve_boundary(body: Formula, var: str, t: Expr, equal: bool) -> Formula:
    """Resolve Ite guards mentioning var == t under the assumption that the
    equality does (not) hold."""
    from .lang import BoolOp

    def resolve_cond(c):
        if isinstance(c, Cmp) and c.op == "==":
            for a, b in ((c.left, c.right), (c.right, c.left)):
                if a == Var(var) and exprs_equal(b, t):
                    from .lang import BoolConst

                    return BoolConst(equal)
        if isinstance(c, BoolOp):
            return BoolOp(c.op, tuple(resolve_cond(x) for x in c.args))
        return c

    def fn(e: Expr):
        if isinstance(e, Ite):
            from .poly import _decide_cond

            cond = resolve_cond(e.cond)
            dec = _decide_cond(cond)
            if dec is True:
                return e.then
            if dec is False:
                return e.other
            return Ite(cond, e.then, e.other)
        return None

    return map_formula(body, fn)


# ---------------------------------------------------------------------------
# Pre-condition splitting: phi(N)  =>  phi'(N-1)  /\  delta_phi'(N)


def formula_diff(phi: Formula, param: str = "N") -> tuple[Formula, Formula]:
    """Split an iterated conjunction at its last index; other conjuncts (and
    every interior use of the parameter) are retained unchanged."""
    prime_parts: list[Formula] = []
    delta_parts: list[Formula] = []
    for c in conjuncts(phi):
        p, d = _diff_conjunct(c, param)
        prime_parts.append(p)
        delta_parts.append(d)
    return simplify_formula(fand(prime_parts)), simplify_formula(fand(delta_parts))


def _diff_conjunct(c: Formula, param: str) -> tuple[Formula, Formula]:
    if not (isinstance(c, FQuant) and c.kind == "forall"):
        return c, TRUEF
    n = Var(param)
    hi_prev = simplify_expr(subst_in_expr(c.hi, param, bin_sub(n, 1)))
    k = diff_const(c.hi, hi_prev)
    if k is None or k <= 0:
        return c, TRUEF
    from .lang import expr_vars

    if param in expr_vars(c.lo):
        return c, TRUEF
    prime = FQuant(c.kind, c.var, c.lo, hi_prev, c.body)
    deltas = []
    for m in range(k):
        idx = simplify_expr(bin_add(hi_prev, m))
        deltas.append(simplify_formula(subst_scalar(c.body, c.var, idx)))
    return prime, fand(deltas)


def bin_add(e: Expr, k: int) -> Expr:
    from .lang import BinOp

    return BinOp("+", e, Const(k)) if k else e


def bin_sub(e: Expr, k: int) -> Expr:
    from .lang import BinOp

    return BinOp("-", e, Const(k))


def subst_in_expr(e: Expr, name: str, repl: Expr) -> Expr:
    def fn(x: Expr):
        if isinstance(x, Var) and x.name == name:
            return repl
        return None

    return map_expr(e, fn)


# ---------------------------------------------------------------------------
# Quantifier elimination by substitution


@dataclass
class ScalarLink:
    """eliminated := replacement (an expression over kept symbols)."""

    eliminated: str
    replacement: Expr


@dataclass
class ArrayLink:
    """eliminated[i] := replacement_fn(i), valid for every index in [0, hi)."""

    eliminated: str
    replacement_fn: Callable[[tuple[Expr, ...]], Expr]
    hi: Expr


def qe_by_substitution(
    f: Formula,
    eliminate_scalars: set[str],
    eliminate_arrays: set[str],
    scalar_links: list[ScalarLink],
    array_links: list[ArrayLink],
    param: str = "N",
) -> tuple[Formula, bool]:
    """Eliminate the existentially quantified program-copy symbols from f by
    rewriting them through difference equalities.  Conjuncts that still
    mention an eliminated symbol afterwards are dropped (a sound weakening).
    Returns (formula, complete)."""
    slink = {l.eliminated: l for l in scalar_links}
    alink = {l.eliminated: l for l in array_links}

    kept: list[Formula] = []
    complete = True
    for c in conjuncts(f):
        c2 = _rewrite_conjunct(c, slink, alink, param)
        if c2 is None or _mentions(c2, eliminate_scalars, eliminate_arrays):
            complete = False
            continue
        kept.append(simplify_formula(c2))
    return fand(kept), complete


def _rewrite_conjunct(c: Formula, slink: dict, alink: dict, param: str) -> Optional[Formula]:
    # scalar links first; array links need the quantifier range to stay inside
    # the region where the difference equality holds
    def fn(e: Expr):
        if isinstance(e, Var) and e.name in slink:
            return slink[e.name].replacement
        return None

    c = map_formula(c, fn)

    ok = [True]

    def rewrite_reads(g: Formula, ranges: dict[str, tuple[Expr, Expr]]) -> Formula:
        if isinstance(g, FQuant):
            r2 = dict(ranges)
            r2[g.var] = (g.lo, g.hi)
            return FQuant(g.kind, g.var, g.lo, g.hi, rewrite_reads(g.body, r2))
        if isinstance(g, FAnd):
            return fand(rewrite_reads(a, ranges) for a in g.args)
        if isinstance(g, FOr):
            return for_(rewrite_reads(a, ranges) for a in g.args)
        if isinstance(g, FNot):
            return fnot(rewrite_reads(g.arg, ranges))
        if isinstance(g, FCmp):
            def arr_fn(e: Expr):
                if isinstance(e, ArrayRead) and e.array in alink:
                    l = alink[e.array]
                    if not _index_in_range(e.index, l.hi, ranges, param):
                        ok[0] = False
                        return None
                    return simplify_expr(l.replacement_fn(e.index))
                return None

            return FCmp(g.op, map_expr(g.left, arr_fn), map_expr(g.right, arr_fn))
        return g

    c = rewrite_reads(c, {})
    return c if ok[0] else None


def affine_nonneg_for_positive_param(e: Expr, param: str) -> bool:
    """e >= 0 for all param >= 1, for e affine in param (conservative)."""
    from .poly import affine_coeffs, poly_of

    ac = affine_coeffs(poly_of(e))
    if ac is None:
        return False
    coeffs, const = ac
    if set(coeffs) - {param}:
        return False
    a = coeffs.get(param, 0)
    return a >= 0 and a + const >= 0


def _index_in_range(
    index: tuple[Expr, ...], hi: Expr, ranges: dict[str, tuple[Expr, Expr]], param: str
) -> bool:
    """Is every index position provably inside [0, hi)?"""
    from .lang import BinOp, expr_vars

    for idx in index:
        vars_ = expr_vars(idx)
        bound = [v for v in vars_ if v in ranges]
        if not bound:
            # fixed index: need 0 <= idx and idx <= hi - 1
            if not affine_nonneg_for_positive_param(idx, param):
                return False
            if not affine_nonneg_for_positive_param(BinOp("-", BinOp("-", hi, Const(1)), idx), param):
                return False
            continue
        if len(bound) > 1 or not exprs_equal(idx, Var(bound[0])):
            return False
        lo_b, hi_b = ranges[bound[0]]
        if not affine_nonneg_for_positive_param(lo_b, param):
            return False
        if not affine_nonneg_for_positive_param(BinOp("-", hi, hi_b), param):
            return False
    return True


def _mentions(f: Formula, scalars: set[str], arrays: set[str]) -> bool:
    return bool(formula_scalars(f) & scalars) or bool(formula_arrays(f) & arrays)


# ---------------------------------------------------------------------------
# Quantifier expansion and instantiation


def expand_quantifiers(f: Formula, consts: dict[str, int]) -> Formula:
    """Expand bounded quantifiers whose ranges are concrete under consts."""
    from .formula import eval_expr

    def expand(g: Formula, env: dict[str, int]) -> Formula:
        if isinstance(g, FQuant):
            try:
                lo = eval_expr(subst_many(g.lo, env), {}, {})
                hi = eval_expr(subst_many(g.hi, env), {}, {})
            except Exception:
                return g
            instantiated = []
            for k in range(lo, hi):
                inst = expand(g.body, {**env, g.var: k})
                instantiated.append(simplify_formula(subst_scalar(inst, g.var, Const(k))))
            return fand(instantiated) if g.kind == "forall" else for_(instantiated)
        if isinstance(g, FAnd):
            return fand(expand(a, env) for a in g.args)
        if isinstance(g, FOr):
            return for_(expand(a, env) for a in g.args)
        if isinstance(g, FNot):
            return fnot(expand(g.arg, env))
        out = g
        for name, val in env.items():
            out = subst_scalar(out, name, Const(val))
        return out

    return simplify_formula(expand(f, dict(consts)))


def subst_many(e: Expr, env: dict[str, int]) -> Expr:
    def fn(x: Expr):
        if isinstance(x, Var) and x.name in env:
            return Const(env[x.name])
        return None

    return map_expr(e, fn)


def instantiate_hypothesis(f: Formula, terms: list[Expr]) -> list[Formula]:
    """Guarded instances of universal hypotheses at boundary index terms."""
    out: list[Formula] = []
    for c in conjuncts(f):
        if isinstance(c, FQuant) and c.kind == "forall":
            for t in terms:
                guard_lo = FCmp("<=", c.lo, t)
                guard_hi = FCmp("<", t, c.hi)
                inst = simplify_formula(subst_scalar(c.body, c.var, t))
                if isinstance(inst, FQuant):
                    inner = instantiate_hypothesis(inst, terms)
                    for g in inner:
                        out.append(for_([fnot(fand([guard_lo, guard_hi])), g]))
                else:
                    out.append(for_([fnot(fand([guard_lo, guard_hi])), inst]))
    return out


BOUNDARY_OFFSETS = (0, 1, 2)


def boundary_terms(param: str) -> list[Expr]:
    from .lang import BinOp

    n = Var(param)
    return [Const(0), BinOp("-", n, Const(2)), BinOp("-", n, Const(1))]


# ---------------------------------------------------------------------------
# Solver-backed checks


@dataclass
class CheckResult:
    verdict: SolverVerdict
    vc_text: str = ""


def check_valid(
    hyps: list[Formula],
    concl: Formula,
    symbols: SymbolTable,
    session: SolverSession,
    timeout_ms: int = 10_000,
    param: str = "N",
    n_floor: int = 1,
    probe_models: bool = True,
    param_cap: Optional[int] = None,
) -> CheckResult:
    """Is (hyps /\\ param >= n_floor) => concl valid? Invalid carries a model
    found by probing small concrete values of the parameter."""
    base = [FCmp(">=", Var(param), Const(n_floor))]
    if param_cap is not None:
        base.append(FCmp("<=", Var(param), Const(param_cap)))
    assertions = base + list(hyps) + [fnot(concl)]
    symbols = SymbolTable(set(symbols.scalars) | {param}, dict(symbols.arrays))
    text = emit_smtlib(assertions, symbols, timeout_ms)
    verdict = solve(text, session, timeout_ms)

    if verdict.status == "unknown":
        extra = []
        terms = boundary_terms(param)
        for h in hyps:
            extra.extend(instantiate_hypothesis(h, terms))
        if extra:
            text2 = emit_smtlib(base + list(hyps) + extra + [fnot(concl)], symbols, timeout_ms)
            verdict = solve(text2, session, timeout_ms)
            if verdict.status != "unknown":
                text = text2

    if verdict.status == "invalid" and probe_models:
        model = _probe_model(assertions, symbols, session, timeout_ms, param, n_floor)
        verdict = SolverVerdict("invalid", model=model)
    return CheckResult(verdict, text)


def _probe_model(
    assertions: list[Formula],
    symbols: SymbolTable,
    session: SolverSession,
    timeout_ms: int,
    param: str,
    n_floor: int,
) -> Optional[dict]:
    """Smallest concrete parameter value admitting a countermodel, with values."""
    from .smt import expr_to_smt

    for n in range(max(n_floor, 1), 9):
        scalar_names = sorted(symbols.scalars - {param})
        terms = [param] + scalar_names
        cell_keys: list[tuple[str, tuple[int, ...]]] = []
        for a in sorted(symbols.arrays):
            if symbols.arrays[a] == 1:
                for i in range(n):
                    terms.append(f"(select {a} {i})")
                    cell_keys.append((a, (i,)))
            else:
                for i in range(n):
                    for j in range(n):
                        terms.append(f"(select (select {a} {i}) {j})")
                        cell_keys.append((a, (i, j)))
        concrete = assertions + [FCmp("==", Var(param), Const(n))]
        text = emit_smtlib(concrete, symbols, timeout_ms, get_values=terms)
        raw = session.query(text, timeout_ms)
        if raw == "":
            continue
        try:
            status, values = parse_check_output(raw)
        except Exception:
            continue
        if status != "sat" or len(values) != len(terms):
            continue
        model: dict = {"n": values[0], "scalars": {}, "arrays": {}}
        for name, v in zip(scalar_names, values[1 : 1 + len(scalar_names)]):
            model["scalars"][name] = v
        cells = values[1 + len(scalar_names):]
        for (a, idx), v in zip(cell_keys, cells):
            arr = model["arrays"].setdefault(
                a, [[0] * n for _ in range(n)] if symbols.arrays[a] == 2 else [0] * n
            )
            if len(idx) == 1:
                arr[idx[0]] = v
            else:
                arr[idx[0]][idx[1]] = v
        return model
    return None


def check_hoare_loopfree(
    pre: Formula,
    code: Stmt,
    post: Formula,
    symbols: SymbolTable,
    session: SolverSession,
    timeout_ms: int = 10_000,
    param: str = "N",
    n_floor: int = 1,
    ite_budget: int = 64,
) -> CheckResult:
    """{pre} code {post} for loop-free code, for all param >= n_floor."""
    w = wp(post, code, ite_budget)
    if w is None:
        return CheckResult(SolverVerdict("unknown", reason="wp blowup"))
    return check_valid([pre], w, symbols, session, timeout_ms, param, n_floor)


def implies(
    hyps: list[Formula],
    concl: Formula,
    symbols: SymbolTable,
    session: SolverSession,
    timeout_ms: int = 5_000,
    param: str = "N",
    n_floor: int = 1,
) -> bool:
    r = check_valid(hyps, concl, symbols, session, timeout_ms, param, n_floor, probe_models=False)
    return r.verdict.is_valid
