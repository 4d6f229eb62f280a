"""Quantified integer/array formulas for pre/post-conditions and verification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from .lang import (
    ArrayRead,
    BinOp,
    BoolConst,
    BoolExpr,
    BoolOp,
    Cmp,
    Const,
    Expr,
    Ite,
    Not,
    Var,
    expr_str,
    map_expr,
)
from .poly import euclid_div, euclid_mod, exprs_equal, simplify_expr


class Formula:
    pass


@dataclass(frozen=True)
class FBool(Formula):
    value: bool


@dataclass(frozen=True)
class FCmp(Formula):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class FAnd(Formula):
    args: tuple[Formula, ...]


@dataclass(frozen=True)
class FOr(Formula):
    args: tuple[Formula, ...]


@dataclass(frozen=True)
class FNot(Formula):
    arg: Formula


@dataclass(frozen=True)
class FQuant(Formula):
    """Bounded quantifier over an integer index in [lo, hi)."""

    kind: str  # "forall" | "exists"
    var: str
    lo: Expr
    hi: Expr
    body: Formula


TRUEF = FBool(True)
FALSEF = FBool(False)


@dataclass
class Spec:
    pre: Formula
    post: Formula


def fand(args: Iterable[Formula]) -> Formula:
    flat: list[Formula] = []
    for a in args:
        if isinstance(a, FBool):
            if not a.value:
                return FALSEF
        elif isinstance(a, FAnd):
            flat.extend(a.args)
        else:
            flat.append(a)
    if not flat:
        return TRUEF
    if len(flat) == 1:
        return flat[0]
    return FAnd(tuple(flat))


def for_(args: Iterable[Formula]) -> Formula:
    flat: list[Formula] = []
    for a in args:
        if isinstance(a, FBool):
            if a.value:
                return TRUEF
        elif isinstance(a, FOr):
            flat.extend(a.args)
        else:
            flat.append(a)
    if not flat:
        return FALSEF
    if len(flat) == 1:
        return flat[0]
    return FOr(tuple(flat))


def fnot(a: Formula) -> Formula:
    if isinstance(a, FBool):
        return FBool(not a.value)
    if isinstance(a, FNot):
        return a.arg
    return FNot(a)


def conjuncts(f: Formula) -> list[Formula]:
    if isinstance(f, FAnd):
        out: list[Formula] = []
        for a in f.args:
            out.extend(conjuncts(a))
        return out
    if isinstance(f, FBool) and f.value:
        return []
    return [f]


def from_boolexpr(b: BoolExpr) -> Formula:
    if isinstance(b, Cmp):
        return FCmp(b.op, b.left, b.right)
    if isinstance(b, BoolOp):
        parts = [from_boolexpr(a) for a in b.args]
        return fand(parts) if b.op == "and" else for_(parts)
    if isinstance(b, Not):
        return fnot(from_boolexpr(b.arg))
    if isinstance(b, BoolConst):
        return FBool(b.value)
    raise TypeError(f"from_boolexpr: {b!r}")


def to_boolexpr(f: Formula) -> BoolExpr:
    """Quantifier-free formula back to a program-level condition."""
    if isinstance(f, FBool):
        return BoolConst(f.value)
    if isinstance(f, FCmp):
        return Cmp(f.op, f.left, f.right)
    if isinstance(f, FAnd):
        return BoolOp("and", tuple(to_boolexpr(a) for a in f.args))
    if isinstance(f, FOr):
        return BoolOp("or", tuple(to_boolexpr(a) for a in f.args))
    if isinstance(f, FNot):
        return Not(to_boolexpr(f.arg))
    raise ValueError(f"not quantifier-free: {f!r}")


# ---------------------------------------------------------------------------
# Rewriting and substitution


def map_formula(f: Formula, fn: Callable[[Expr], Optional[Expr]]) -> Formula:
    if isinstance(f, FBool):
        return f
    if isinstance(f, FCmp):
        return FCmp(f.op, map_expr(f.left, fn), map_expr(f.right, fn))
    if isinstance(f, FAnd):
        return fand(map_formula(a, fn) for a in f.args)
    if isinstance(f, FOr):
        return for_(map_formula(a, fn) for a in f.args)
    if isinstance(f, FNot):
        return fnot(map_formula(f.arg, fn))
    if isinstance(f, FQuant):
        return FQuant(f.kind, f.var, map_expr(f.lo, fn), map_expr(f.hi, fn), map_formula(f.body, fn))
    raise TypeError(f"map_formula: {f!r}")


def subst_scalar(f: Formula, name: str, repl: Expr) -> Formula:
    """Substitute a free scalar occurrence; quantifier-bound names shadow."""
    if isinstance(f, FQuant):
        if f.var == name:
            return FQuant(f.kind, f.var, _subst_e(f.lo, name, repl), _subst_e(f.hi, name, repl), f.body)
        return FQuant(
            f.kind, f.var, _subst_e(f.lo, name, repl), _subst_e(f.hi, name, repl), subst_scalar(f.body, name, repl)
        )
    if isinstance(f, FAnd):
        return fand(subst_scalar(a, name, repl) for a in f.args)
    if isinstance(f, FOr):
        return for_(subst_scalar(a, name, repl) for a in f.args)
    if isinstance(f, FNot):
        return fnot(subst_scalar(f.arg, name, repl))
    if isinstance(f, FCmp):
        return FCmp(f.op, _subst_e(f.left, name, repl), _subst_e(f.right, name, repl))
    return f


def _subst_e(e: Expr, name: str, repl: Expr) -> Expr:
    def fn(x: Expr):
        if isinstance(x, Var) and x.name == name:
            return repl
        return None

    return map_expr(e, fn)


def rename_symbols(f: Formula, scalar_map: dict[str, str], array_map: dict[str, str]) -> Formula:
    def fn(e: Expr):
        if isinstance(e, Var) and e.name in scalar_map:
            return Var(scalar_map[e.name])
        if isinstance(e, ArrayRead) and e.array in array_map:
            return ArrayRead(array_map[e.array], e.index)
        return None

    # bound quantifier variables are never in scalar_map by construction
    return map_formula(f, fn)


def shift_param(f: Formula, param: str, delta: int) -> Formula:
    """Reindex a formula family: N |-> N + delta, then simplify."""
    return simplify_formula(subst_scalar(f, param, BinOp("+", Var(param), Const(delta))))


def formula_scalars(f: Formula, out: Optional[set[str]] = None, bound: tuple = ()) -> set[str]:
    if out is None:
        out = set()
    if isinstance(f, FCmp):
        for e in (f.left, f.right):
            _expr_scalars(e, out, bound)
    elif isinstance(f, (FAnd, FOr)):
        for a in f.args:
            formula_scalars(a, out, bound)
    elif isinstance(f, FNot):
        formula_scalars(f.arg, out, bound)
    elif isinstance(f, FQuant):
        for e in (f.lo, f.hi):
            _expr_scalars(e, out, bound)
        formula_scalars(f.body, out, bound + (f.var,))
    return out


def _expr_scalars(e: Expr, out: set[str], bound: tuple) -> None:
    if isinstance(e, Var):
        if e.name not in bound:
            out.add(e.name)
    elif isinstance(e, BinOp):
        _expr_scalars(e.left, out, bound)
        _expr_scalars(e.right, out, bound)
    elif isinstance(e, ArrayRead):
        for i in e.index:
            _expr_scalars(i, out, bound)
    elif isinstance(e, Ite):
        for x in (e.then, e.other):
            _expr_scalars(x, out, bound)


def formula_arrays(f: Formula, out: Optional[set[str]] = None) -> set[str]:
    if out is None:
        out = set()
    if isinstance(f, FCmp):
        for e in (f.left, f.right):
            _expr_arrays(e, out)
    elif isinstance(f, (FAnd, FOr)):
        for a in f.args:
            formula_arrays(a, out)
    elif isinstance(f, FNot):
        formula_arrays(f.arg, out)
    elif isinstance(f, FQuant):
        formula_arrays(f.body, out)
    return out


def _expr_arrays(e: Expr, out: set[str]) -> None:
    if isinstance(e, ArrayRead):
        out.add(e.array)
        for i in e.index:
            _expr_arrays(i, out)
    elif isinstance(e, BinOp):
        _expr_arrays(e.left, out)
        _expr_arrays(e.right, out)
    elif isinstance(e, Ite):
        _expr_arrays(e.then, out)
        _expr_arrays(e.other, out)


# ---------------------------------------------------------------------------
# Simplification and printing


def _cmp_value(op: str, a: int, b: int) -> bool:
    return {
        "<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b, "==": a == b, "!=": a != b,
    }[op]


def _isolate_equality(left: Expr, right: Expr):
    """Rewrite an equality as `atom == rest` when one side's polynomial holds
    a single unit-coefficient data atom (an array read or a program scalar)."""
    from .poly import expr_of, p_sub, poly_of

    p = p_sub(poly_of(left), poly_of(right))
    candidates = []
    for mon, coeff in p.items():
        if len(mon) == 1 and mon[0][1] == 1 and abs(coeff) == 1:
            atom = mon[0][0]
            if isinstance(atom, (ArrayRead, Ite)) or isinstance(atom, Var):
                candidates.append((mon, coeff, atom))
    arr = [c for c in candidates if isinstance(c[2], ArrayRead)]
    pick = arr[0] if arr else (candidates[0] if candidates else None)
    if pick is None:
        return None
    mon, coeff, atom = pick
    rest = dict(p)
    del rest[mon]
    if coeff > 0:
        rest = {m: -c for m, c in rest.items()}
    if expr_of(rest) == left and atom == right or atom == left and expr_of(rest) == right:
        return None
    return atom, expr_of(rest)


def simplify_formula(f: Formula) -> Formula:
    if isinstance(f, FCmp):
        left, right = simplify_expr(f.left), simplify_expr(f.right)
        if isinstance(left, Const) and isinstance(right, Const):
            return FBool(_cmp_value(f.op, left.value, right.value))
        if f.op in ("==", "<=", ">=") and exprs_equal(left, right):
            return TRUEF
        if f.op in ("!=", "<", ">") and exprs_equal(left, right):
            return FALSEF
        if f.op == "==":
            iso = _isolate_equality(left, right)
            if iso is not None:
                return FCmp("==", iso[0], iso[1])
        return FCmp(f.op, left, right)
    if isinstance(f, FAnd):
        return fand(simplify_formula(a) for a in f.args)
    if isinstance(f, FOr):
        return for_(simplify_formula(a) for a in f.args)
    if isinstance(f, FNot):
        return fnot(simplify_formula(f.arg))
    if isinstance(f, FQuant):
        lo, hi = simplify_expr(f.lo), simplify_expr(f.hi)
        if isinstance(lo, Const) and isinstance(hi, Const) and lo.value >= hi.value:
            return TRUEF if f.kind == "forall" else FALSEF
        body = simplify_formula(f.body)
        if isinstance(body, FBool):
            if f.kind == "forall" and body.value:
                return TRUEF
            if f.kind == "exists" and not body.value:
                return FALSEF
        return FQuant(f.kind, f.var, lo, hi, body)
    return f


def formula_str(f: Formula) -> str:
    if isinstance(f, FBool):
        return "true" if f.value else "false"
    if isinstance(f, FCmp):
        return f"{expr_str(f.left)} {f.op} {expr_str(f.right)}"
    if isinstance(f, FAnd):
        return " && ".join(_paren(a) for a in f.args)
    if isinstance(f, FOr):
        return " || ".join(_paren(a) for a in f.args)
    if isinstance(f, FNot):
        return f"!({formula_str(f.arg)})"
    if isinstance(f, FQuant):
        rng = f"[{expr_str(f.lo)},{expr_str(f.hi)})"
        return f"{f.kind} {f.var} in {rng} :: {formula_str(f.body)}"
    raise TypeError(f"formula_str: {f!r}")


def _paren(f: Formula) -> str:
    s = formula_str(f)
    if isinstance(f, (FCmp, FBool, FNot)):
        return s
    return f"({s})"


# ---------------------------------------------------------------------------
# Concrete evaluation (oracles and witness replay)


def eval_expr(e: Expr, scalars: dict, arrays: dict) -> int:
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        return scalars[e.name]
    if isinstance(e, BinOp):
        a = eval_expr(e.left, scalars, arrays)
        b = eval_expr(e.right, scalars, arrays)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if e.op == "/":
            return euclid_div(a, b)
        return euclid_mod(a, b)
    if isinstance(e, ArrayRead):
        val = arrays[e.array]
        for i in e.index:
            val = val[eval_expr(i, scalars, arrays)]
        return val
    if isinstance(e, Ite):
        from .lang import Cmp as _C  # local: evaluate program-level conditions

        if eval_bool(e.cond, scalars, arrays):
            return eval_expr(e.then, scalars, arrays)
        return eval_expr(e.other, scalars, arrays)
    raise TypeError(f"eval_expr: {e!r}")


def eval_bool(b: BoolExpr, scalars: dict, arrays: dict) -> bool:
    if isinstance(b, Cmp):
        return _cmp_value(b.op, eval_expr(b.left, scalars, arrays), eval_expr(b.right, scalars, arrays))
    if isinstance(b, BoolOp):
        if b.op == "and":
            return all(eval_bool(a, scalars, arrays) for a in b.args)
        return any(eval_bool(a, scalars, arrays) for a in b.args)
    if isinstance(b, Not):
        return not eval_bool(b.arg, scalars, arrays)
    if isinstance(b, BoolConst):
        return b.value
    raise TypeError(f"eval_bool: {b!r}")


def eval_formula(f: Formula, scalars: dict, arrays: dict) -> bool:
    if isinstance(f, FBool):
        return f.value
    if isinstance(f, FCmp):
        return _cmp_value(f.op, eval_expr(f.left, scalars, arrays), eval_expr(f.right, scalars, arrays))
    if isinstance(f, FAnd):
        return all(eval_formula(a, scalars, arrays) for a in f.args)
    if isinstance(f, FOr):
        return any(eval_formula(a, scalars, arrays) for a in f.args)
    if isinstance(f, FNot):
        return not eval_formula(f.arg, scalars, arrays)
    if isinstance(f, FQuant):
        lo = eval_expr(f.lo, scalars, arrays)
        hi = eval_expr(f.hi, scalars, arrays)
        vals = (eval_formula(f.body, {**scalars, f.var: k}, arrays) for k in range(lo, hi))
        return all(vals) if f.kind == "forall" else any(vals)
    raise TypeError(f"eval_formula: {f!r}")
