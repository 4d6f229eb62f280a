"""Difference-invariant inference over the product of two program versions.

The two versions (the truncated program and the parameter-substituted one)
share their control skeleton, so loops pair positionally with synchronized
iterations.  Candidate relations between corresponding variables are guessed
by fitting polynomial templates (degree <= 2 in the parameter, loop counters,
and cell indices) against concrete joint runs, then kept only if the solver
proves them inductive at their control point, Houdini style.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Union

from .formula import (
    FAnd,
    FBool,
    FCmp,
    FNot,
    FOr,
    FQuant,
    Formula,
    conjuncts,
    fand,
    fnot,
    for_,
    formula_arrays,
    formula_scalars,
    map_formula,
    simplify_formula,
    subst_scalar,
)
from .interp import Env, execute, fresh_env
from .lang import (
    ArrayAssign,
    ArrayRead,
    Assign,
    BinOp,
    BoolConst,
    BoolExpr,
    BoolOp,
    Cmp,
    Const,
    Expr,
    For,
    If,
    Ite,
    Not,
    Program,
    Seq,
    Stmt,
    Var,
    expr_str,
    map_expr,
    stmt_list,
    walk_stmts,
    written_scalars,
)
from .poly import exprs_equal, simplify_expr
from .smt import SolverSession, SymbolTable, emit_smtlib, solve
from .transform import _written_arrays_of  # same structural helper

Q, P = "q", "p"


class StructureMismatch(Exception):
    pass


class NoInvariant(Exception):
    pass


def tag(name: str, side: str) -> str:
    return f"{name}${side}"


def untag(name: str) -> str:
    return name.split("$", 1)[0]


def tag_formula(f: Formula, side: str, scalars: set[str], arrays: set[str]) -> Formula:
    """Prefix program symbols with their version side; counters and the
    parameter stay shared."""

    def fn(e: Expr):
        if isinstance(e, Var) and e.name in scalars:
            return Var(tag(e.name, side))
        if isinstance(e, ArrayRead) and e.array in arrays:
            return ArrayRead(tag(e.array, side), e.index)
        return None

    return map_formula(f, fn)


# ---------------------------------------------------------------------------
# Product structure


@dataclass
class SegPair:
    kind: str  # "code" | "loop"
    q: Stmt
    p: Stmt
    counter: str = ""
    ub: Optional[Expr] = None  # shared truncated bound for loop pairs
    inner: list["SegPair"] = field(default_factory=list)


@dataclass
class ProductProgram:
    q: Program
    p: Program
    segments: list[SegPair]
    branch_modes: list[tuple[str, str]] = field(default_factory=list)  # (location, mode)
    loop_pairs: list[tuple[str, str]] = field(default_factory=list)  # (counter, "synced")


def build_product(
    q: Program,
    p: Program,
    session: Optional[SolverSession] = None,
    pre_facts: Optional[list[Formula]] = None,
    timeout_ms: int = 3_000,
) -> ProductProgram:
    """Pair the two versions positionally; conditionals whose guards cannot be
    proved equivalent from the entry facts are marked four-way."""
    prod = ProductProgram(q, p, [])
    prod.segments = _pair_segments(stmt_list(q.body), stmt_list(p.body), prod, q, session, pre_facts, timeout_ms)
    return prod


def _pair_segments(qs, ps, prod, qprog, session, pre_facts, timeout_ms) -> list[SegPair]:
    if len(qs) != len(ps):
        raise StructureMismatch(f"{len(qs)} vs {len(ps)} top-level statements")
    out: list[SegPair] = []
    code_q: list[Stmt] = []
    code_p: list[Stmt] = []

    def flush():
        if code_q or code_p:
            out.append(SegPair("code", Seq(tuple(code_q)), Seq(tuple(code_p))))
            code_q.clear()
            code_p.clear()

    for a, b in zip(qs, ps):
        if isinstance(a, For) != isinstance(b, For):
            raise StructureMismatch("loop paired with non-loop")
        if isinstance(a, For):
            if a.counter != b.counter:
                raise StructureMismatch(f"counters {a.counter} vs {b.counter}")
            if not exprs_equal(a.ub, b.ub):
                raise StructureMismatch(f"bounds differ for loop {a.counter}")
            flush()
            inner = _pair_segments(
                stmt_list(a.body), stmt_list(b.body), prod, qprog, session, pre_facts, timeout_ms
            )
            pair = SegPair("loop", a, b, counter=a.counter, ub=simplify_expr(a.ub), inner=inner)
            out.append(pair)
            prod.loop_pairs.append((a.counter, "synced"))
        else:
            _classify_branches(a, b, prod, qprog, session, pre_facts, timeout_ms)
            code_q.append(a)
            code_p.append(b)
    flush()
    return out


def _classify_branches(a: Stmt, b: Stmt, prod, qprog, session, pre_facts, timeout_ms) -> None:
    pairs = [(x, y) for x, y in zip(walk_stmts(a), walk_stmts(b)) if isinstance(x, If)]
    for x, y in pairs:
        if not isinstance(y, If):
            raise StructureMismatch("branch paired with non-branch")
        loc = f"if({bool_str_safe(x.cond)})"
        if _bool_canon_equal(x.cond, y.cond):
            prod.branch_modes.append((loc, "synced"))
            continue
        mode = "fourway"
        if session is not None and pre_facts:
            from .formula import from_boolexpr

            scalars = set(qprog.scalars)
            arrays = set(qprog.arrays)
            cq = tag_formula(from_boolexpr(x.cond), Q, scalars, arrays)
            cp = tag_formula(from_boolexpr(y.cond), P, scalars, arrays)
            iff = fand([for_([fnot(cq), cp]), for_([fnot(cp), cq])])
            syms = _symbols_of(pre_facts + [iff], qprog)
            text = emit_smtlib(
                [FCmp(">=", Var(qprog.param), Const(1))] + list(pre_facts) + [fnot(iff)],
                syms,
                timeout_ms,
            )
            if solve(text, session, timeout_ms).is_valid:
                mode = "synced"
        prod.branch_modes.append((loc, mode))


def bool_str_safe(b: BoolExpr) -> str:
    from .lang import bool_str

    return bool_str(b)


def _bool_canon_equal(a: BoolExpr, b: BoolExpr) -> bool:
    if type(a) is not type(b):
        return False
    if isinstance(a, Cmp):
        return a.op == b.op and exprs_equal(a.left, b.left) and exprs_equal(a.right, b.right)
    if isinstance(a, BoolOp):
        return a.op == b.op and len(a.args) == len(b.args) and all(
            _bool_canon_equal(x, y) for x, y in zip(a.args, b.args)
        )
    if isinstance(a, Not):
        return _bool_canon_equal(a.arg, b.arg)
    if isinstance(a, BoolConst):
        return a.value == b.value
    return False


def _symbols_of(formulas: list[Formula], prog: Program) -> SymbolTable:
    scalars: set[str] = set()
    arrays: dict[str, int] = {}
    for f in formulas:
        scalars |= formula_scalars(f)
        for arr in formula_arrays(f):
            arrays[arr] = prog.arrays.get(untag(arr), 1)
    scalars.add(prog.param)
    return SymbolTable(scalars, arrays)


# ---------------------------------------------------------------------------
# Facts


@dataclass
class Fact:
    point: tuple
    kind: str  # sdelta | sabs_q | sabs_p | cdelta | cabs_q | cabs_p | adelta | aabs_q | aabs_p
    name: str
    den: int
    num: Expr  # over param, counters, cell index variables
    index: Optional[tuple[Expr, ...]] = None  # cell facts
    dims: Optional[tuple[tuple[str, Expr], ...]] = None  # array facts: (var, hi)
    fixed: Optional[tuple[Optional[Expr], ...]] = None  # array facts: fixed index slots
    guard: Optional[tuple[str, str, str]] = None  # (op, dimvar, counter): zone facts

    def formula(self) -> Formula:
        lhs = self._lhs()
        eq = FCmp("==", BinOp("*", Const(self.den), lhs) if self.den != 1 else lhs, self.num)
        if self.kind.startswith("a"):
            body: Formula = eq
            if self.guard:
                op, v, c = self.guard
                body = for_([fnot(FCmp(op, Var(v), Var(c))), eq])
            for v, hi in reversed(self.dims or ()):
                body = FQuant("forall", v, Const(0), hi, body)
            return body
        return eq

    def _lhs(self) -> Expr:
        if self.kind.startswith("s"):
            a, b = Var(tag(self.name, Q)), Var(tag(self.name, P))
        elif self.kind.startswith("c"):
            a = ArrayRead(tag(self.name, Q), self.index)
            b = ArrayRead(tag(self.name, P), self.index)
        else:
            idx = self._dim_index()
            a = ArrayRead(tag(self.name, Q), idx)
            b = ArrayRead(tag(self.name, P), idx)
        if self.kind.endswith("delta"):
            return BinOp("-", a, b)
        return a if self.kind.endswith("_q") else b

    def _dim_index(self) -> tuple[Expr, ...]:
        out: list[Expr] = []
        dims = list(self.dims or ())
        for slot in self.fixed or (None,) * len(dims):
            if slot is None:
                v, _ = dims.pop(0)
                out.append(Var(v))
            else:
                out.append(slot)
        return tuple(out)

    def describe(self) -> str:
        from .formula import formula_str

        return formula_str(simplify_formula(self.formula()))


@dataclass
class DiffAnalysis:
    product: ProductProgram
    facts: dict[tuple, list[Fact]]
    seeds: list[Formula]
    contexts: dict[tuple, list[Formula]]
    vc_count: int = 0

    def exit_facts(self) -> list[Fact]:
        return self.facts.get(("final",), [])

    def all_points(self) -> list[tuple]:
        return list(self.facts)


# ---------------------------------------------------------------------------
# Sampling

SAMPLE_NS = (2, 3, 4, 5, 6)
DRAWS = 3


@dataclass
class _Visit:
    n: int
    counters: dict[str, int]
    q_scalars: dict[str, int]
    p_scalars: dict[str, int]
    q_arrays: dict[str, list]
    p_arrays: dict[str, list]


def _sample_runs(q: Program, p: Program, preQ: Formula, preP: Formula, seed: int):
    """Joint traces of both versions from shared inputs, per control point."""
    rng = random.Random(seed)
    visits: dict[tuple, list[_Visit]] = {}
    for n in SAMPLE_NS:
        for _ in range(DRAWS):
            base = fresh_env(q, n)
            for s in q.input_scalars():
                base.scalars[s] = rng.randint(-3, 5)
            for a, rank in q.arrays.items():
                if rank == 2:
                    base.arrays[a] = [[rng.randint(-3, 5) for _ in range(n)] for _ in range(n)]
                else:
                    base.arrays[a] = [rng.randint(-3, 5) for _ in range(n)]
            env_q = base.copy()
            env_p = base.copy()
            from .interp import _pin_from_pre

            _pin_from_pre(env_q, preQ, q.param)
            _pin_from_pre(env_p, preP, p.param)

            qtrace: dict[tuple, list[Env]] = {}
            ptrace: dict[tuple, list[Env]] = {}

            def mk(store):
                def cb(kind: str, counter: str, env: Env):
                    store.setdefault((kind, counter) if counter else (kind,), []).append(env.copy())

                return cb

            try:
                execute(q, env_q, mk(qtrace))
                execute(p, env_p, mk(ptrace))
            except Exception:
                continue
            for point, qlist in qtrace.items():
                plist = ptrace.get(point, [])
                if len(plist) != len(qlist):
                    continue  # unsynchronized (should not happen for loop pairs)
                for eq, ep in zip(qlist, plist):
                    visits.setdefault(point, []).append(
                        _Visit(
                            n,
                            {c: eq.scalars.get(c, 0) for c in q.counters},
                            dict(eq.scalars),
                            dict(ep.scalars),
                            eq.arrays,
                            ep.arrays,
                        )
                    )
    # rename ("final",) key and add ("entry",) alias for symmetry
    if ("final",) in visits:
        visits[("final",)] = visits[("final",)]
    return visits


# ---------------------------------------------------------------------------
# Template fitting (exact rational solve over monomials of degree <= 2)


def _monomials(vars_: list[str]) -> list[tuple]:
    mons: list[tuple] = [()]
    for i, v in enumerate(vars_):
        mons.append(((v, 1),))
        mons.append(((v, 2),))
        for w in vars_[i + 1 :]:
            mons.append(((v, 1), (w, 1)))
    return mons


def _mon_value(mon: tuple, env: dict[str, int]) -> int:
    out = 1
    for v, k in mon:
        out *= env[v] ** k
    return out


def _mon_expr(mon: tuple, coeff: int) -> Expr:
    e: Optional[Expr] = None
    for v, k in mon:
        for _ in range(k):
            e = Var(v) if e is None else BinOp("*", e, Var(v))
    if e is None:
        return Const(coeff)
    if coeff != 1:
        e = BinOp("*", Const(coeff), e)
    return e


def fit_poly(rows: list[tuple[dict, int]], vars_: list[str], max_den: int = 24):
    """Exact polynomial fit: returns (den, num_expr) with den*value == num on
    every row, or None.  Rows must cover enough distinct points."""
    if not rows:
        return None
    mons = _monomials(vars_)
    m = len(mons)
    a = [[Fraction(_mon_value(mon, env)) for mon in mons] + [Fraction(val)] for env, val in rows]
    # Gauss-Jordan on the augmented matrix
    rank_cols = []
    r = 0
    for c in range(m):
        piv = next((i for i in range(r, len(a)) if a[i][c] != 0), None)
        if piv is None:
            continue
        a[r], a[piv] = a[piv], a[r]
        a[r] = [x / a[r][c] for x in a[r]]
        for i in range(len(a)):
            if i != r and a[i][c] != 0:
                f = a[i][c]
                a[i] = [x - f * y for x, y in zip(a[i], a[r])]
        rank_cols.append(c)
        r += 1
        if r == len(a):
            break
    for i in range(r, len(a)):
        if a[i][m] != 0:
            return None  # inconsistent
    sol = [Fraction(0)] * m
    for row_i, c in enumerate(rank_cols):
        sol[c] = a[row_i][m]
    den = 1
    for x in sol:
        den = den * x.denominator // _gcd(den, x.denominator)
    if den > max_den:
        return None
    coeffs = [int(x * den) for x in sol]
    # verify exactly on all rows
    for env, val in rows:
        if sum(c * _mon_value(mon, env) for c, mon in zip(coeffs, mons)) != den * val:
            return None
    terms = [(mon, c) for mon, c in zip(mons, coeffs) if c != 0]
    num: Expr = Const(0)
    for mon, c in terms:
        t = _mon_expr(mon, abs(c))
        num = t if num == Const(0) and c > 0 else (
            BinOp("+", num, t) if c > 0 else BinOp("-", num, t)
        )
    return den, simplify_expr(num)


def _gcd(a: int, b: int) -> int:
    while b:
        a, b = b, a % b
    return a


# ---------------------------------------------------------------------------
# Candidate generation from samples


def _eval_index(idx: Expr, n: int) -> Optional[int]:
    from .formula import eval_expr

    try:
        return eval_expr(idx, {"N": n}, {})
    except Exception:
        return None


def _cell(arr, pos: tuple[int, ...]):
    v = arr
    for i in pos:
        if not (0 <= i < len(v)):
            return None
        v = v[i]
    return v


def propose_facts(
    point: tuple,
    visits: list[_Visit],
    q: Program,
    enclosing: list[str],
    param: str,
) -> list[Fact]:
    """Fit every template against the sampled joint states at one point."""
    out: list[Fact] = []
    feat_vars = [param] + enclosing
    plain = [s for s in q.scalars if s not in q.counters]

    def env_of(v: _Visit) -> dict[str, int]:
        env = {param: v.n}
        for c in enclosing:
            env[c] = v.counters.get(c, 0)
        return env

    for s in plain:
        rows_d, rows_q, rows_p = [], [], []
        for v in visits:
            if s not in v.q_scalars or s not in v.p_scalars:
                continue
            e = env_of(v)
            rows_d.append((e, v.q_scalars[s] - v.p_scalars[s]))
            rows_q.append((e, v.q_scalars[s]))
            rows_p.append((e, v.p_scalars[s]))
        for kind, rows in (("sdelta", rows_d), ("sabs_q", rows_q), ("sabs_p", rows_p)):
            fit = fit_poly(rows, feat_vars)
            if fit:
                out.append(Fact(point, kind, s, fit[0], fit[1]))

    n_var = Var(param)
    cell_indices = [
        (Const(0),),
        (BinOp("-", n_var, Const(1)),),
        (BinOp("-", n_var, Const(2)),),
    ]
    for arr, rank in q.arrays.items():
        if rank == 1:
            out.extend(_rank1_facts(point, visits, arr, feat_vars, enclosing, env_of, param))
            for idx in cell_indices:
                out.extend(_cell_facts(point, visits, arr, idx, feat_vars, env_of, param))
        else:
            out.extend(_rank2_facts(point, visits, arr, feat_vars, enclosing, env_of, param))
    return out


def _gather_cell_rows(visits, arr, idx: tuple[Expr, ...], env_of, param):
    rows_d, rows_q, rows_p = [], [], []
    for v in visits:
        pos = tuple(_eval_index(i, v.n) for i in idx)
        if any(p is None for p in pos):
            return [], [], []
        qv = _cell(v.q_arrays.get(arr), pos)
        pv = _cell(v.p_arrays.get(arr), pos)
        if qv is None or pv is None:
            continue
        e = env_of(v)
        rows_d.append((e, qv - pv))
        rows_q.append((e, qv))
        rows_p.append((e, pv))
    return rows_d, rows_q, rows_p


def _cell_facts(point, visits, arr, idx, feat_vars, env_of, param) -> list[Fact]:
    out = []
    rows_d, rows_q, rows_p = _gather_cell_rows(visits, arr, idx, env_of, param)
    for kind, rows in (("cdelta", rows_d), ("cabs_q", rows_q), ("cabs_p", rows_p)):
        fit = fit_poly(rows, feat_vars)
        if fit:
            out.append(Fact(point, kind, arr, fit[0], fit[1], index=idx))
    return out


_DIM = "x_"
_DIM2 = "y_"


def _rank1_facts(point, visits, arr, feat_vars, enclosing, env_of, param) -> list[Fact]:
    out: list[Fact] = []
    n_var = Var(param)
    for hi, hi_off in ((BinOp("-", n_var, Const(1)), 1), (n_var, 0)):
        rows_d, rows_q, rows_p = [], [], []
        for v in visits:
            e0 = env_of(v)
            for x in range(0, v.n - hi_off):
                qa, pa = v.q_arrays.get(arr), v.p_arrays.get(arr)
                if qa is None or pa is None:
                    continue
                e = dict(e0)
                e[_DIM] = x
                rows_d.append((e, qa[x] - pa[x]))
                rows_q.append((e, qa[x]))
                rows_p.append((e, pa[x]))
        fv = feat_vars + [_DIM]
        for kind, rows in (("adelta", rows_d), ("aabs_q", rows_q), ("aabs_p", rows_p)):
            fit = fit_poly(rows, fv)
            if fit:
                out.append(Fact(point, kind, arr, fit[0], fit[1], dims=((_DIM, hi),), fixed=(None,)))
            elif enclosing and kind == "adelta" or enclosing and kind.startswith("aabs"):
                out.extend(
                    _zoned_fits(point, kind, arr, rows, fv, enclosing, ((_DIM, hi),), (None,))
                )
    return _dedupe(out)


def _zoned_fits(point, kind, arr, rows, fv, enclosing, dims, fixed) -> list[Fact]:
    out = []
    for c in enclosing:
        below = [(e, val) for e, val in rows if e[_DIM] < e[c]]
        above = [(e, val) for e, val in rows if e[_DIM] >= e[c]]
        if not below or not above:
            continue
        fb, fa = fit_poly(below, fv), fit_poly(above, fv)
        if fb:
            out.append(Fact(point, kind, arr, fb[0], fb[1], dims=dims, fixed=fixed, guard=("<", _DIM, c)))
        if fa:
            out.append(Fact(point, kind, arr, fa[0], fa[1], dims=dims, fixed=fixed, guard=(">=", _DIM, c)))
    return out


def _rank2_facts(point, visits, arr, feat_vars, enclosing, env_of, param) -> list[Fact]:
    out: list[Fact] = []
    n_var = Var(param)
    hi_prev = BinOp("-", n_var, Const(1))
    # full 2-d range facts
    for hi, off in ((hi_prev, 1), (n_var, 0)):
        rows_d, rows_q, rows_p = [], [], []
        for v in visits:
            qa, pa = v.q_arrays.get(arr), v.p_arrays.get(arr)
            if qa is None or pa is None:
                continue
            e0 = env_of(v)
            for x in range(0, v.n - off):
                for y in range(0, v.n - off):
                    e = dict(e0)
                    e[_DIM] = x
                    e[_DIM2] = y
                    rows_d.append((e, qa[x][y] - pa[x][y]))
                    rows_q.append((e, qa[x][y]))
                    rows_p.append((e, pa[x][y]))
        fv = feat_vars + [_DIM, _DIM2]
        dims = ((_DIM, hi), (_DIM2, hi))
        for kind, rows in (("adelta", rows_d), ("aabs_q", rows_q), ("aabs_p", rows_p)):
            fit = fit_poly(rows, fv)
            if fit:
                out.append(Fact(point, kind, arr, fit[0], fit[1], dims=dims, fixed=(None, None)))
            else:
                for c in enclosing:
                    below = [(e, val) for e, val in rows if e[_DIM] < e[c]]
                    above = [(e, val) for e, val in rows if e[_DIM] >= e[c]]
                    if below and above:
                        fb, fa = fit_poly(below, fv), fit_poly(above, fv)
                        if fb:
                            out.append(
                                Fact(point, kind, arr, fb[0], fb[1], dims=dims,
                                     fixed=(None, None), guard=("<", _DIM, c))
                            )
                        if fa:
                            out.append(
                                Fact(point, kind, arr, fa[0], fa[1], dims=dims,
                                     fixed=(None, None), guard=(">=", _DIM, c))
                            )
    # boundary slices: one index fixed at N-1 or N-2
    for fixed_expr in (BinOp("-", n_var, Const(1)), BinOp("-", n_var, Const(2))):
        for slot in (0, 1):
            for hi in (n_var, hi_prev, BinOp("-", n_var, Const(2))):
                rows_q, rows_p, rows_d = [], [], []
                for v in visits:
                    fpos = _eval_index(fixed_expr, v.n)
                    hi_v = _eval_index(hi, v.n)
                    if fpos is None or hi_v is None or not (0 <= fpos < v.n):
                        continue
                    qa, pa = v.q_arrays.get(arr), v.p_arrays.get(arr)
                    if qa is None or pa is None:
                        continue
                    e0 = env_of(v)
                    for t in range(0, min(hi_v, v.n)):
                        pos = (fpos, t) if slot == 0 else (t, fpos)
                        e = dict(e0)
                        e[_DIM] = t
                        rows_d.append((e, _cell(qa, pos) - _cell(pa, pos)))
                        rows_q.append((e, _cell(qa, pos)))
                        rows_p.append((e, _cell(pa, pos)))
                fv = feat_vars + [_DIM]
                fixed = (fixed_expr, None) if slot == 0 else (None, fixed_expr)
                for kind, rows in (("adelta", rows_d), ("aabs_q", rows_q), ("aabs_p", rows_p)):
                    fit = fit_poly(rows, fv)
                    if fit:
                        out.append(
                            Fact(point, kind, arr, fit[0], fit[1], dims=((_DIM, hi),), fixed=fixed)
                        )
    # corner cells
    for cx in (BinOp("-", n_var, Const(1)), BinOp("-", n_var, Const(2))):
        for cy in (BinOp("-", n_var, Const(1)), BinOp("-", n_var, Const(2))):
            idx = (cx, cy)
            rows_d, rows_q, rows_p = _gather_cell_rows(visits, arr, idx, env_of, param)
            for kind, rows in (("cdelta", rows_d), ("cabs_q", rows_q), ("cabs_p", rows_p)):
                fit = fit_poly(rows, feat_vars)
                if fit:
                    out.append(Fact(point, kind, arr, fit[0], fit[1], index=idx))
    return _dedupe(out)


def _dedupe(facts: list[Fact]) -> list[Fact]:
    seen = set()
    out = []
    for f in facts:
        key = f.describe()
        if key not in seen:
            seen.add(key)
            out.append(f)
    return out

# ---------------------------------------------------------------------------
# Symbolic joint execution (for inductiveness checks)


class _SymState:
    """Maps prefixed symbols to value expressions; arrays to (base, overlays)."""

    def __init__(self):
        self.scalars: dict[str, Expr] = {}
        self.arrays: dict[str, tuple[str, list[tuple[tuple[Expr, ...], Expr]]]] = {}
        self.assumes: list[Formula] = []
        self.side_vcs: list[tuple[str, Formula]] = []
        self.fresh = 0
        self.havoc_scalars: set[str] = set()
        self.havoc_arrays: dict[str, int] = {}

    def fresh_name(self, base: str) -> str:
        self.fresh += 1
        return f"{base}${self.fresh}"

    def read_scalar(self, name: str) -> Expr:
        return self.scalars.get(name, Var(name))

    def read_array(self, name: str, index: tuple[Expr, ...]) -> Expr:
        base, overlays = self.arrays.get(name, (name, []))
        out: Expr = ArrayRead(base, index)
        for widx, wval in overlays:
            rel = _sym_index_rel(index, widx)
            if rel == "same":
                return wval
            if rel == "disjoint":
                continue
            cond: BoolExpr = Cmp("==", index[0], widx[0])
            for a, b in zip(index[1:], widx[1:]):
                cond = BoolOp("and", (cond, Cmp("==", a, b)))
            out = Ite(cond, wval, out)
        return out

    def write_scalar(self, name: str, val: Expr) -> None:
        self.scalars[name] = simplify_expr(val)

    def write_array(self, name: str, index: tuple[Expr, ...], val: Expr) -> None:
        base, overlays = self.arrays.get(name, (name, []))
        self.arrays[name] = (base, [(index, simplify_expr(val))] + overlays)

    def havoc(self, scalars: set[str], arrays: dict[str, int]) -> None:
        for s in scalars:
            nm = self.fresh_name(s)
            self.scalars[s] = Var(nm)
            self.havoc_scalars.add(nm)
        for a, rank in arrays.items():
            nm = self.fresh_name(a)
            self.arrays[a] = (nm, [])
            self.havoc_arrays[nm] = rank


def _sym_index_rel(a: tuple[Expr, ...], b: tuple[Expr, ...]) -> str:
    from .poly import diff_const

    if len(a) != len(b):
        return "maybe"
    rels = []
    for x, y in zip(a, b):
        d = diff_const(x, y)
        if d == 0:
            rels.append("same")
        elif d is not None:
            rels.append("disjoint")
        else:
            rels.append("maybe")
    if all(r == "same" for r in rels):
        return "same"
    if any(r == "disjoint" for r in rels):
        return "disjoint"
    return "maybe"


def _side_reader(st: _SymState, side: str, scalars: set[str], arrays: set[str]):
    def fn(x: Expr):
        if isinstance(x, Var):
            name = tag(x.name, side) if x.name in scalars else x.name
            v = st.read_scalar(name)
            if name == x.name and v == Var(name):
                return None
            return v
        if isinstance(x, ArrayRead):
            name = tag(x.array, side) if x.array in arrays else x.array
            return st.read_array(name, x.index)
        return None

    return fn


def resolve_expr(st: _SymState, e: Expr, side: str, scalars: set[str], arrays: set[str]) -> Expr:
    return map_expr(e, _side_reader(st, side, scalars, arrays))


def resolve_cond(st: _SymState, b: BoolExpr, side: str, scalars: set[str], arrays: set[str]) -> BoolExpr:
    from .lang import map_bool

    return map_bool(b, _side_reader(st, side, scalars, arrays))


def resolve_formula(st: _SymState, f: Formula) -> Formula:
    """Substitute the current symbolic state into a formula over tagged names."""

    def fn(e: Expr):
        if isinstance(e, Var):
            v = st.read_scalar(e.name)
            return v if v != Var(e.name) else None
        if isinstance(e, ArrayRead):
            return st.read_array(e.array, e.index)
        return None

    return map_formula(f, fn)


class _PairExec:
    """Executes segment pairs symbolically, consuming verified inner-loop
    facts (havoc + assume) for nested loop pairs."""

    def __init__(self, prog: Program, loop_facts: dict[str, list["Fact"]], param: str):
        self.scalars = {s for s in prog.scalars if s not in prog.counters}
        self.arrays = set(prog.arrays)
        self.ranks = dict(prog.arrays)
        self.loop_facts = loop_facts
        self.param = param

    def run_side(self, st: _SymState, s: Stmt, side: str) -> None:
        if isinstance(s, Seq):
            for t in s.stmts:
                self.run_side(st, t, side)
        elif isinstance(s, Assign):
            st.write_scalar(tag(s.name, side), resolve_expr(st, s.rhs, side, self.scalars, self.arrays))
        elif isinstance(s, ArrayAssign):
            idx = tuple(simplify_expr(resolve_expr(st, i, side, self.scalars, self.arrays)) for i in s.index)
            val = resolve_expr(st, s.rhs, side, self.scalars, self.arrays)
            st.write_array(tag(s.array, side), idx, val)
        elif isinstance(s, If):
            cond = resolve_cond(st, s.cond, side, self.scalars, self.arrays)
            snap_sc = dict(st.scalars)
            snap_ar = {k: (b, list(o)) for k, (b, o) in st.arrays.items()}
            self.run_side(st, s.then, side)
            then_sc, then_ar = st.scalars, st.arrays
            st.scalars, st.arrays = snap_sc, snap_ar
            st.scalars = dict(snap_sc)
            st.arrays = {k: (b, list(o)) for k, (b, o) in snap_ar.items()}
            self.run_side(st, s.orelse, side)
            else_sc, else_ar = st.scalars, st.arrays
            st.scalars = self._merge_scalars(cond, then_sc, else_sc)
            st.arrays = self._merge_arrays(cond, then_ar, else_ar, st)
        elif isinstance(s, For):
            raise StructureMismatch("unpaired loop inside a code segment")
        else:
            raise TypeError(f"run_side: {s!r}")

    @staticmethod
    def _merge_scalars(cond, then_sc: dict, else_sc: dict) -> dict:
        out = dict(else_sc)
        for k in set(then_sc) | set(else_sc):
            tv = then_sc.get(k, Var(k))
            ev = else_sc.get(k, Var(k))
            out[k] = tv if tv == ev else Ite(cond, tv, ev)
        return out

    def _merge_arrays(self, cond, then_ar: dict, else_ar: dict, st: _SymState) -> dict:
        out = dict(else_ar)
        for k in set(then_ar) | set(else_ar):
            tb = then_ar.get(k, (k, []))
            eb = else_ar.get(k, (k, []))
            if tb == eb:
                out[k] = tb
                continue
            if tb[0] != eb[0]:
                out[k] = tb  # havocked on one side; keep the newest view
                continue
            # same base: need one common overlay suffix (the pre-branch writes)
            common = 0
            while (
                common < len(tb[1])
                and common < len(eb[1])
                and tb[1][len(tb[1]) - 1 - common] == eb[1][len(eb[1]) - 1 - common]
            ):
                common += 1
            shared = tb[1][len(tb[1]) - common :]
            t_state, e_state = _SymState(), _SymState()
            t_state.arrays[k] = tb
            e_state.arrays[k] = eb
            merged = list(shared)
            extra_idx = [idx for idx, _ in tb[1][: len(tb[1]) - common]]
            extra_idx += [idx for idx, _ in eb[1][: len(eb[1]) - common]]
            seen: set = set()
            for idx in extra_idx:
                key = tuple(expr_str(i) for i in idx)
                if key in seen:
                    continue
                seen.add(key)
                merged = [(idx, Ite(cond, t_state.read_array(k, idx), e_state.read_array(k, idx)))] + merged
            out[k] = (tb[0], merged)
        return out

    def run_pair(self, st: _SymState, pairs: list[SegPair]) -> None:
        for seg in pairs:
            if seg.kind == "code":
                self.run_side(st, seg.q, Q)
                self.run_side(st, seg.p, P)
            else:
                self.loop_summary(st, seg)

    def loop_summary(self, st: _SymState, seg: SegPair) -> None:
        """Havoc what the loop pair writes, then assume its verified facts at
        the exit index; emits a side VC that the entry facts hold."""
        facts = self.loop_facts.get(seg.counter, [])
        ub = simplify_expr(resolve_expr(st, seg.ub, Q, self.scalars, self.arrays))
        entry = fand([resolve_formula(st, subst_scalar(f.formula(), seg.counter, Const(0))) for f in facts])
        st.side_vcs.append((f"enter loop {seg.counter}", entry))

        wq = written_scalars(seg.q) | written_scalars(seg.p)
        aq = _written_arrays_of(seg.q) | _written_arrays_of(seg.p)
        havoc_scalars = {tag(v, s) for v in wq for s in (Q, P) if v in self.scalars}
        havoc_arrays = {tag(a, s): self.ranks[a] for a in aq for s in (Q, P)}
        st.havoc(havoc_scalars, havoc_arrays)
        st.write_scalar(seg.counter, ub)
        for f in facts:
            exit_f = subst_scalar(f.formula(), seg.counter, ub)
            st.assumes.append(resolve_formula(st, exit_f))

# ---------------------------------------------------------------------------
# Inductive verification of fitted facts (Houdini per loop pair)


@dataclass
class InferSettings:
    session: SolverSession
    timeout_ms: int = 8_000
    param: str = "N"
    n_floor: int = 2
    houdini_rounds: int = 4
    seed: int = 0


class _Verifier:
    def __init__(self, prod: ProductProgram, settings: InferSettings):
        self.prod = prod
        self.cfg = settings
        self.vc_count = 0
        self.loop_head_facts: dict[str, list[Fact]] = {}
        self.loop_guard_ctx: dict[str, list[Formula]] = {}
        self.entry_snapshots: dict[tuple, tuple[list[Formula], _SymState]] = {}
        self.exec = _PairExec(prod.q, self.loop_head_facts, settings.param)
        self.pres_cache: dict[str, list[Fact]] = {}

    # -- solver plumbing -----------------------------------------------

    def check(self, hyps: list[Formula], concl: Formula) -> bool:
        from .logic import check_valid

        self.vc_count += 1
        syms = self._symbols(hyps + [concl])
        r = check_valid(
            hyps,
            concl,
            syms,
            self.cfg.session,
            self.cfg.timeout_ms,
            self.cfg.param,
            self.cfg.n_floor,
            probe_models=False,
        )
        return r.verdict.is_valid

    def _symbols(self, formulas: list[Formula]) -> SymbolTable:
        scalars: set[str] = set()
        arrays: dict[str, int] = {}
        for f in formulas:
            scalars |= formula_scalars(f)
            for arr in formula_arrays(f):
                arrays[arr] = self.prod.q.arrays.get(untag(arr.split("$", 1)[0]), 1)
        return SymbolTable(scalars | {self.cfg.param}, arrays)

    # -- per-loop Houdini ------------------------------------------------

    def preservation_verified(self, seg: SegPair, enclosing_guards: list[Formula],
                              proposals: dict[tuple, list[Fact]]) -> list[Fact]:
        """Facts at this loop head preserved by one synchronized iteration
        (entry checks are done separately against each outer context)."""
        if seg.counter in self.pres_cache:
            return self.pres_cache[seg.counter]
        cands = list(proposals.get(("head", seg.counter), []))
        guards = enclosing_guards + [
            FCmp("<=", Const(0), Var(seg.counter)),
            FCmp("<", Var(seg.counter), seg.ub),
        ]
        for _ in range(self.cfg.houdini_rounds):
            if not cands:
                break
            self.loop_head_facts[seg.counter] = cands
            # verify inner loops' preservation under current outer candidates
            for inner in seg.inner:
                if inner.kind == "loop":
                    self.pres_cache.pop(inner.counter, None)
                    self.preservation_verified(inner, guards, proposals)
            kept: list[Fact] = []
            hyp = [f.formula() for f in cands] + guards
            for f in cands:
                if self._preserved(seg, hyp, guards, f, proposals):
                    kept.append(f)
            if len(kept) == len(cands):
                cands = kept
                break
            cands = kept
        self.loop_head_facts[seg.counter] = cands
        self.pres_cache[seg.counter] = cands
        return cands

    def _preserved(self, seg: SegPair, hyp: list[Formula], guards: list[Formula],
                   f: Fact, proposals) -> bool:
        st = _SymState()
        # inner loop facts must hold on entry inside the body; their entry
        # checks become side conditions of this preservation VC
        for inner in seg.inner:
            if inner.kind == "loop":
                self._set_inner_entry_checked(inner, hyp, guards, st, proposals)
        self.exec.run_pair(st, seg.inner)
        target = resolve_formula(st, subst_scalar(f.formula(), seg.counter,
                                                  BinOp("+", Var(seg.counter), Const(1))))
        ok = self.check(hyp + st.assumes, target)
        if not ok:
            return False
        for desc, side in st.side_vcs:
            if not self.check(hyp + st.assumes, side):
                return False
        return True

    def _set_inner_entry_checked(self, inner: SegPair, hyp, guards, st, proposals) -> None:
        # entry of the inner loop is checked as a side VC when the summary runs
        pass

    # -- program walk ------------------------------------------------------

    def walk(self, seeds: list[Formula], proposals: dict[tuple, list[Fact]]) -> DiffAnalysis:
        facts: dict[tuple, list[Fact]] = {}
        contexts: dict[tuple, list[Formula]] = {}
        st = _SymState()
        hyps = list(seeds)

        def point_check(point: tuple, cands: list[Fact], extra_subst=None) -> list[Fact]:
            kept = []
            for f in cands:
                g = f.formula()
                if extra_subst:
                    g = extra_subst(g)
                if self.check(hyps + st.assumes, resolve_formula(st, g)):
                    kept.append(f)
            return kept

        self.entry_snapshots[("entry",)] = (list(hyps), st)
        contexts[("entry",)] = list(hyps)

        def run(pairs: list[SegPair], enclosing_guards: list[Formula]):
            for seg in pairs:
                if seg.kind == "code":
                    self.exec.run_side(st, seg.q, Q)
                    self.exec.run_side(st, seg.p, P)
                    continue
                head_pt = ("head", seg.counter)
                pres = self.preservation_verified(seg, enclosing_guards, proposals)
                # entry filter: facts must also hold when the loop is entered
                entry_ok: list[Fact] = []
                for f in pres:
                    tgt = resolve_formula(st, subst_scalar(f.formula(), seg.counter, Const(0)))
                    if self.check(hyps + st.assumes, tgt):
                        entry_ok.append(f)
                if len(entry_ok) != len(pres):
                    # preservation may have leaned on a fact that fails entry
                    self.pres_cache.pop(seg.counter, None)
                    saved = proposals.get(head_pt, [])
                    proposals[head_pt] = entry_ok
                    pres = self.preservation_verified(seg, enclosing_guards, proposals)
                    proposals[head_pt] = saved
                    entry_ok = [f for f in pres
                                if self.check(hyps + st.assumes,
                                              resolve_formula(st, subst_scalar(f.formula(), seg.counter, Const(0))))]
                self.loop_head_facts[seg.counter] = entry_ok
                self.loop_guard_ctx[seg.counter] = list(enclosing_guards)
                facts[head_pt] = entry_ok
                contexts[head_pt] = [f.formula() for f in entry_ok]
                self.entry_snapshots[head_pt] = (list(hyps), st)
                # cross the loop: havoc + assume verified facts at the exit index
                self.exec.loop_summary(st, seg)
                st.side_vcs.clear()
                exit_pt = ("exit", seg.counter)
                facts[exit_pt] = point_check(exit_pt, proposals.get(exit_pt, []))
                contexts[exit_pt] = [f.formula() for f in facts[exit_pt]]

        run(self.prod.segments, [])
        facts[("final",)] = [
            f for f in point_check(("final",), proposals.get(("final",), []))
        ]
        contexts[("final",)] = [f.formula() for f in facts[("final",)]]
        self.entry_snapshots[("final",)] = (list(hyps), st)

        return DiffAnalysis(self.prod, facts, seeds, contexts, self.vc_count)


# ---------------------------------------------------------------------------
# Seeding and the public entry points


def seed_equalities(
    q: Program,
    preQ: Formula,
    preP: Formula,
    share_all: bool,
    param: str,
) -> list[Formula]:
    scalars = {s for s in q.scalars if s not in q.counters}
    arrays = set(q.arrays)
    seeds = [
        tag_formula(preQ, Q, scalars, arrays),
        tag_formula(preP, P, scalars, arrays),
    ]
    pinned = formula_scalars(preP) | formula_arrays(preP)
    n_var = Var(param)
    for s in sorted(scalars):
        if share_all or s not in pinned:
            seeds.append(FCmp("==", Var(tag(s, Q)), Var(tag(s, P))))
    for a in sorted(arrays):
        if not (share_all or a not in pinned):
            continue
        if q.arrays[a] == 1:
            seeds.append(
                FQuant("forall", _DIM, Const(0), n_var,
                       FCmp("==", ArrayRead(tag(a, Q), (Var(_DIM),)), ArrayRead(tag(a, P), (Var(_DIM),))))
            )
        else:
            seeds.append(
                FQuant("forall", _DIM, Const(0), n_var,
                       FQuant("forall", _DIM2, Const(0), n_var,
                              FCmp("==", ArrayRead(tag(a, Q), (Var(_DIM), Var(_DIM2))),
                                   ArrayRead(tag(a, P), (Var(_DIM), Var(_DIM2))))))
            )
    return [simplify_formula(s) for s in seeds]


def inputs_shareable(
    preQ: Formula, preP: Formula, prog: Program, session: SolverSession, timeout_ms: int = 5_000
) -> bool:
    """True when any state satisfying the truncated-side pre-condition also
    satisfies the substituted-side one, so both runs may share their inputs."""
    from .logic import implies

    syms = SymbolTable(set(prog.scalars) | {prog.param}, dict(prog.arrays))
    return implies([preQ], preP, syms, session, timeout_ms, prog.param, n_floor=2)


def infer_diff_invariants(
    q_prog: Program,
    p_prog: Program,
    preQ: Formula,
    preP: Formula,
    settings: InferSettings,
    product: Optional[ProductProgram] = None,
) -> DiffAnalysis:
    """Guess-and-check difference invariants for the synchronized product of
    the truncated and substituted program versions."""
    share = inputs_shareable(preQ, preP, q_prog, settings.session)
    seeds = seed_equalities(q_prog, preQ, preP, share, settings.param)
    if product is None:
        product = build_product(q_prog, p_prog, settings.session, seeds)

    visits = _sample_runs(q_prog, p_prog, preQ, preP, settings.seed)
    proposals: dict[tuple, list[Fact]] = {}
    enclosing_at: dict[tuple, list[str]] = {}

    def collect_points(pairs: list[SegPair], enclosing: list[str]):
        for seg in pairs:
            if seg.kind == "loop":
                enclosing_at[("head", seg.counter)] = enclosing + [seg.counter]
                enclosing_at[("exit", seg.counter)] = list(enclosing)
                collect_points(seg.inner, enclosing + [seg.counter])

    collect_points(product.segments, [])
    enclosing_at[("final",)] = []

    for point, encl in enclosing_at.items():
        vs = visits.get(point, [])
        if vs:
            proposals[point] = propose_facts(point, vs, q_prog, encl, settings.param)

    verifier = _Verifier(product, settings)
    analysis = verifier.walk(seeds, proposals)
    analysis.vc_count = verifier.vc_count
    return analysis


def check_invariant_inductive(
    analysis: DiffAnalysis, fact: Fact, settings: InferSettings
) -> bool:
    """Re-assert one fact at its location: entry from the recorded context and
    preservation through one synchronized iteration."""
    verifier = _Verifier(analysis.product, settings)
    verifier.loop_head_facts.update(
        {c: list(fs) for c, fs in _heads_of(analysis).items()}
    )
    point = fact.point
    if point[0] != "head":
        snap = _replay_to(analysis, verifier, point)
        if snap is None:
            return False
        hyps, st = snap
        return verifier.check(hyps + st.assumes, resolve_formula(st, fact.formula()))
    counter = point[1]
    seg = _find_loop(analysis.product.segments, counter)
    if seg is None:
        return False
    guards = _guards_for(analysis, counter)
    head = [f.formula() for f in analysis.facts.get(point, [])]
    if fact.describe() not in {f.describe() for f in analysis.facts.get(point, [])}:
        head = head + [fact.formula()]
    hyp = head + guards + [
        FCmp("<=", Const(0), Var(counter)),
        FCmp("<", Var(counter), seg.ub),
    ]
    snap = _replay_to(analysis, verifier, point)
    if snap is None:
        return False
    hyps0, st0 = snap
    entry_ok = verifier.check(
        hyps0 + st0.assumes, resolve_formula(st0, subst_scalar(fact.formula(), counter, Const(0)))
    )
    if not entry_ok:
        return False
    return verifier._preserved(seg, hyp, guards, fact, {})


def _heads_of(analysis: DiffAnalysis) -> dict[str, list[Fact]]:
    out: dict[str, list[Fact]] = {}
    for point, fs in analysis.facts.items():
        if point[0] == "head":
            out[point[1]] = fs
    return out


def _find_loop(pairs: list[SegPair], counter: str) -> Optional[SegPair]:
    for seg in pairs:
        if seg.kind == "loop":
            if seg.counter == counter:
                return seg
            got = _find_loop(seg.inner, counter)
            if got:
                return got
    return None


def _guards_for(analysis: DiffAnalysis, counter: str) -> list[Formula]:
    guards: list[Formula] = []

    def descend(pairs: list[SegPair], acc: list[Formula]) -> bool:
        for seg in pairs:
            if seg.kind != "loop":
                continue
            if seg.counter == counter:
                guards.extend(acc)
                return True
            inner_acc = acc + [
                FCmp("<=", Const(0), Var(seg.counter)),
                FCmp("<", Var(seg.counter), seg.ub),
            ]
            if descend(seg.inner, inner_acc):
                return True
        return False

    descend(analysis.product.segments, [])
    return guards


def _replay_to(analysis: DiffAnalysis, verifier: _Verifier, point: tuple):
    """Rebuild the symbolic state at a recorded point by replaying the walk."""
    st = _SymState()
    hyps = list(analysis.seeds)
    exec_ = _PairExec(analysis.product.q, verifier.loop_head_facts, verifier.cfg.param)

    def run(pairs: list[SegPair]):
        for seg in pairs:
            if seg.kind == "code":
                exec_.run_side(st, seg.q, Q)
                exec_.run_side(st, seg.p, P)
            else:
                if point == ("head", seg.counter):
                    return True
                exec_.loop_summary(st, seg)
                st.side_vcs.clear()
                if point == ("exit", seg.counter):
                    return True
        return point == ("final",)

    if run(analysis.product.segments):
        return hyps, st
    return None
