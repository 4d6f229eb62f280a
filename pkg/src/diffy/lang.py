"""Core AST for the array-program language: expressions, statements, programs."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Optional

ARITH_OPS = ("+", "-", "*", "/", "%")
REL_OPS = ("<", "<=", ">", ">=", "==", "!=")


class Expr:
    pass


@dataclass(frozen=True)
class Const(Expr):
    value: int


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class ArrayRead(Expr):
    array: str
    index: tuple[Expr, ...]


@dataclass(frozen=True)
class Ite(Expr):
    """Conditional expression; produced internally (summaries, WP), printed as `c ? a : b`."""

    cond: "BoolExpr"
    then: Expr
    other: Expr


class BoolExpr:
    pass


@dataclass(frozen=True)
class Cmp(BoolExpr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class BoolOp(BoolExpr):
    op: str  # "and" | "or"
    args: tuple[BoolExpr, ...]


@dataclass(frozen=True)
class Not(BoolExpr):
    arg: BoolExpr


@dataclass(frozen=True)
class BoolConst(BoolExpr):
    value: bool


class Stmt:
    pass


@dataclass(frozen=True)
class Seq(Stmt):
    stmts: tuple[Stmt, ...] = ()


@dataclass(frozen=True)
class Assign(Stmt):
    name: str
    rhs: Expr


@dataclass(frozen=True)
class ArrayAssign(Stmt):
    array: str
    index: tuple[Expr, ...]
    rhs: Expr


@dataclass(frozen=True)
class If(Stmt):
    cond: BoolExpr
    then: Stmt
    orelse: Stmt = Seq()


@dataclass(frozen=True)
class For(Stmt):
    """Counting loop: counter runs 0,1,... while counter < ub; ub evaluated each test."""

    counter: str
    ub: Expr
    body: Stmt


@dataclass
class Program:
    """A program over integer scalars and integer arrays of symbolic size `param`."""

    scalars: list[str] = field(default_factory=list)  # includes counters
    counters: list[str] = field(default_factory=list)
    arrays: dict[str, int] = field(default_factory=dict)  # name -> rank (1 or 2)
    body: Stmt = Seq()
    param: str = "N"
    name: str = "main"

    def input_scalars(self) -> list[str]:
        return [s for s in self.scalars if s not in self.counters]

    def with_body(self, body: Stmt) -> "Program":
        return replace(self, body=body)


TRUE = BoolConst(True)
FALSE = BoolConst(False)
ZERO = Const(0)
ONE = Const(1)


def seq(stmts) -> Stmt:
    """Flatten into a Seq, dropping empty subsequences."""
    flat: list[Stmt] = []
    for s in stmts:
        if isinstance(s, Seq):
            flat.extend(seq(s.stmts).stmts if s.stmts else ())
        elif s is not None:
            flat.append(s)
    if len(flat) == 1:
        return flat[0]
    return Seq(tuple(flat))


def stmt_list(s: Stmt) -> list[Stmt]:
    if isinstance(s, Seq):
        out: list[Stmt] = []
        for t in s.stmts:
            out.extend(stmt_list(t))
        return out
    return [s]


# ---------------------------------------------------------------------------
# Traversal / rewriting


def map_expr(e: Expr, fn: Callable[[Expr], Optional[Expr]]) -> Expr:
    """Bottom-up rewrite: fn(node) may return a replacement or None to keep it."""
    if isinstance(e, (Const, Var)):
        new = e
    elif isinstance(e, BinOp):
        new = BinOp(e.op, map_expr(e.left, fn), map_expr(e.right, fn))
    elif isinstance(e, ArrayRead):
        new = ArrayRead(e.array, tuple(map_expr(i, fn) for i in e.index))
    elif isinstance(e, Ite):
        new = Ite(map_bool(e.cond, fn), map_expr(e.then, fn), map_expr(e.other, fn))
    else:
        raise TypeError(f"map_expr: {e!r}")
    repl = fn(new)
    return new if repl is None else repl


def map_bool(b: BoolExpr, fn: Callable[[Expr], Optional[Expr]]) -> BoolExpr:
    if isinstance(b, Cmp):
        return Cmp(b.op, map_expr(b.left, fn), map_expr(b.right, fn))
    if isinstance(b, BoolOp):
        return BoolOp(b.op, tuple(map_bool(a, fn) for a in b.args))
    if isinstance(b, Not):
        return Not(map_bool(b.arg, fn))
    if isinstance(b, BoolConst):
        return b
    raise TypeError(f"map_bool: {b!r}")


def map_stmt_exprs(s: Stmt, fn: Callable[[Expr], Optional[Expr]]) -> Stmt:
    if isinstance(s, Seq):
        return Seq(tuple(map_stmt_exprs(t, fn) for t in s.stmts))
    if isinstance(s, Assign):
        return Assign(s.name, map_expr(s.rhs, fn))
    if isinstance(s, ArrayAssign):
        return ArrayAssign(s.array, tuple(map_expr(i, fn) for i in s.index), map_expr(s.rhs, fn))
    if isinstance(s, If):
        return If(map_bool(s.cond, fn), map_stmt_exprs(s.then, fn), map_stmt_exprs(s.orelse, fn))
    if isinstance(s, For):
        return For(s.counter, map_expr(s.ub, fn), map_stmt_exprs(s.body, fn))
    raise TypeError(f"map_stmt_exprs: {s!r}")


def subst_var(name: str, repl: Expr):
    """Rewriter substituting a scalar variable by an expression."""

    def fn(e: Expr):
        if isinstance(e, Var) and e.name == name:
            return repl
        return None

    return fn


def subst_vars(mapping: dict[str, Expr]):
    def fn(e: Expr):
        if isinstance(e, Var) and e.name in mapping:
            return mapping[e.name]
        return None

    return fn


def expr_vars(e: Expr, out: Optional[set[str]] = None) -> set[str]:
    if out is None:
        out = set()
    if isinstance(e, Var):
        out.add(e.name)
    elif isinstance(e, BinOp):
        expr_vars(e.left, out)
        expr_vars(e.right, out)
    elif isinstance(e, ArrayRead):
        for i in e.index:
            expr_vars(i, out)
    elif isinstance(e, Ite):
        bool_vars(e.cond, out)
        expr_vars(e.then, out)
        expr_vars(e.other, out)
    return out


def bool_vars(b: BoolExpr, out: Optional[set[str]] = None) -> set[str]:
    if out is None:
        out = set()
    if isinstance(b, Cmp):
        expr_vars(b.left, out)
        expr_vars(b.right, out)
    elif isinstance(b, BoolOp):
        for a in b.args:
            bool_vars(a, out)
    elif isinstance(b, Not):
        bool_vars(b.arg, out)
    return out


def expr_arrays(e: Expr, out: Optional[set[str]] = None) -> set[str]:
    if out is None:
        out = set()
    if isinstance(e, BinOp):
        expr_arrays(e.left, out)
        expr_arrays(e.right, out)
    elif isinstance(e, ArrayRead):
        out.add(e.array)
        for i in e.index:
            expr_arrays(i, out)
    elif isinstance(e, Ite):
        for a in (e.then, e.other):
            expr_arrays(a, out)
        if isinstance(e.cond, Cmp):
            expr_arrays(e.cond.left, out)
            expr_arrays(e.cond.right, out)
    return out


def walk_stmts(s: Stmt) -> Iterator[Stmt]:
    yield s
    if isinstance(s, Seq):
        for t in s.stmts:
            yield from walk_stmts(t)
    elif isinstance(s, If):
        yield from walk_stmts(s.then)
        yield from walk_stmts(s.orelse)
    elif isinstance(s, For):
        yield from walk_stmts(s.body)


def stmt_exprs(s: Stmt) -> Iterator[Expr]:
    """All expressions appearing in s (rhs, indices, ubs, condition operands)."""
    for t in walk_stmts(s):
        if isinstance(t, Assign):
            yield t.rhs
        elif isinstance(t, ArrayAssign):
            yield from t.index
            yield t.rhs
        elif isinstance(t, If):
            yield from _bool_exprs(t.cond)
        elif isinstance(t, For):
            yield t.ub


def _bool_exprs(b: BoolExpr) -> Iterator[Expr]:
    if isinstance(b, Cmp):
        yield b.left
        yield b.right
    elif isinstance(b, BoolOp):
        for a in b.args:
            yield from _bool_exprs(a)
    elif isinstance(b, Not):
        yield from _bool_exprs(b.arg)


def written_scalars(s: Stmt) -> set[str]:
    return {t.name for t in walk_stmts(s) if isinstance(t, Assign)}


def written_arrays(s: Stmt) -> set[str]:
    return {t.array for t in walk_stmts(s) if isinstance(t, ArrayAssign)}


def read_scalars(s: Stmt) -> set[str]:
    out: set[str] = set()
    for e in stmt_exprs(s):
        expr_vars(e, out)
    return out


def is_loop_free(s: Stmt) -> bool:
    return not any(isinstance(t, For) for t in walk_stmts(s))


# ---------------------------------------------------------------------------
# Pretty printing (emits re-parseable source)

_PREC = {"?": 0, "+": 2, "-": 2, "*": 3, "/": 3, "%": 3}


def expr_str(e: Expr, prec: int = 0) -> str:
    if isinstance(e, Const):
        return str(e.value) if e.value >= 0 else f"({e.value})"
    if isinstance(e, Var):
        return e.name
    if isinstance(e, BinOp):
        p = _PREC[e.op]
        # "-" and "/" are left associative; force parens on right subtrees
        s = f"{expr_str(e.left, p)} {e.op} {expr_str(e.right, p + 1)}"
        return f"({s})" if p < prec else s
    if isinstance(e, ArrayRead):
        return e.array + "".join(f"[{expr_str(i)}]" for i in e.index)
    if isinstance(e, Ite):
        return f"({bool_str(e.cond)} ? {expr_str(e.then)} : {expr_str(e.other)})"
    raise TypeError(f"expr_str: {e!r}")


def bool_str(b: BoolExpr, prec: int = 0) -> str:
    if isinstance(b, Cmp):
        return f"{expr_str(b.left)} {b.op} {expr_str(b.right)}"
    if isinstance(b, BoolOp):
        joiner = " && " if b.op == "and" else " || "
        p = 2 if b.op == "and" else 1
        s = joiner.join(bool_str(a, p + 1) for a in b.args)
        return f"({s})" if p < prec or len(b.args) > 1 and prec > 0 else s
    if isinstance(b, Not):
        return f"!({bool_str(b.arg)})"
    if isinstance(b, BoolConst):
        return "true" if b.value else "false"
    raise TypeError(f"bool_str: {b!r}")


def stmt_str(s: Stmt, indent: int = 0) -> str:
    pad = "  " * indent
    if isinstance(s, Seq):
        return "\n".join(stmt_str(t, indent) for t in s.stmts)
    if isinstance(s, Assign):
        return f"{pad}{s.name} = {expr_str(s.rhs)};"
    if isinstance(s, ArrayAssign):
        idx = "".join(f"[{expr_str(i)}]" for i in s.index)
        return f"{pad}{s.array}{idx} = {expr_str(s.rhs)};"
    if isinstance(s, If):
        out = f"{pad}if ({bool_str(s.cond)}) {{\n{stmt_str(s.then, indent + 1)}\n{pad}}}"
        if not (isinstance(s.orelse, Seq) and not s.orelse.stmts):
            out += f" else {{\n{stmt_str(s.orelse, indent + 1)}\n{pad}}}"
        return out
    if isinstance(s, For):
        c = s.counter
        head = f"{pad}for ({c} = 0; {c} < {expr_str(s.ub)}; {c}++) {{"
        return f"{head}\n{stmt_str(s.body, indent + 1)}\n{pad}}}"
    raise TypeError(f"stmt_str: {s!r}")


def program_str(p: Program) -> str:
    return stmt_str(p.body)
