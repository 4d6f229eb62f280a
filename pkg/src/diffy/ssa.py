"""Static single assignment renaming for structured array programs.

Scalars get a fresh version per assignment site; a scalar updated inside a
loop gets a loop-carried version initialized by a preheader copy and closed
by a back-edge copy when several sites write it.  Branches are balanced: both
paths define the same merged version (the skipped path copies the old value).
Arrays get a fresh version per write site with read-through to the previous
version for untouched elements, so no array copies are materialized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .formula import Formula, rename_symbols
from .frontend import Diagnostic
from .lang import (
    ArrayAssign,
    ArrayRead,
    Assign,
    BoolExpr,
    Expr,
    For,
    If,
    Ite,
    Program,
    Seq,
    Stmt,
    Var,
    map_bool,
    map_expr,
    seq,
    walk_stmts,
    written_scalars,
)


class UnsupportedAliasing(Exception):
    pass


VERSION_SEP = "__"


def base_name(versioned: str) -> str:
    if VERSION_SEP in versioned:
        stem, _, suffix = versioned.rpartition(VERSION_SEP)
        if suffix.isdigit():
            return stem
    return versioned


def is_copy(s: Stmt) -> bool:
    """A pure version-to-version move inserted by the renamer."""
    return (
        isinstance(s, Assign)
        and isinstance(s.rhs, Var)
        and base_name(s.name) == base_name(s.rhs.name)
    )


@dataclass
class SsaProgram:
    program: Program
    version_map: dict[str, list[str]] = field(default_factory=dict)
    final_scalars: dict[str, str] = field(default_factory=dict)
    final_arrays: dict[str, str] = field(default_factory=dict)
    array_backing: dict[str, str] = field(default_factory=dict)  # version -> original
    pre: Formula | None = None
    post: Formula | None = None


class _Renamer:
    def __init__(self, program: Program):
        self.program = program
        self.counts: dict[str, int] = {}
        self.version_map: dict[str, list[str]] = {}
        self.cur: dict[str, str] = {}
        for s in program.scalars:
            self.cur[s] = s
            self.version_map[s] = [s]
        for a in program.arrays:
            self.cur[a] = a
            self.version_map[a] = [a]

    def fresh(self, name: str) -> str:
        self.counts[name] = self.counts.get(name, 0) + 1
        v = f"{name}{VERSION_SEP}{self.counts[name]}"
        self.version_map[name].append(v)
        return v

    def rename_expr(self, e: Expr) -> Expr:
        def fn(x: Expr):
            if isinstance(x, Var) and x.name in self.cur:
                return Var(self.cur[x.name])
            if isinstance(x, ArrayRead):
                for i in x.index:
                    if _reads_array(i):
                        raise UnsupportedAliasing(
                            f"array {x.array} indexed through another array read"
                        )
                return ArrayRead(self.cur.get(x.array, x.array), x.index)
            return None

        return map_expr(e, fn)

    def rename_cond(self, b: BoolExpr) -> BoolExpr:
        def fn(x: Expr):
            if isinstance(x, Var) and x.name in self.cur:
                return Var(self.cur[x.name])
            if isinstance(x, ArrayRead):
                return ArrayRead(self.cur.get(x.array, x.array), x.index)
            return None

        return map_bool(b, fn)

    def rename_stmt(self, s: Stmt) -> Stmt:
        if isinstance(s, Seq):
            return seq([self.rename_stmt(t) for t in s.stmts])
        if isinstance(s, Assign):
            rhs = self.rename_expr(s.rhs)
            tgt = self.fresh(s.name)
            self.cur[s.name] = tgt
            return Assign(tgt, rhs)
        if isinstance(s, ArrayAssign):
            idx = tuple(self.rename_expr(i) for i in s.index)
            rhs = self.rename_expr(s.rhs)
            tgt = self.fresh(s.array)
            self.cur[s.array] = tgt
            return ArrayAssign(tgt, idx, rhs)
        if isinstance(s, If):
            return self._rename_if(s)
        if isinstance(s, For):
            return self._rename_for(s)
        raise TypeError(f"rename_stmt: {s!r}")

    def _rename_if(self, s: If) -> Stmt:
        cond = self.rename_cond(s.cond)
        written = sorted(written_scalars(s.then) | written_scalars(s.orelse))
        arrays_written = sorted(_written_arrays(s.then) | _written_arrays(s.orelse))
        saved = dict(self.cur)

        then_body = self.rename_stmt(s.then)
        then_cur = dict(self.cur)
        self.cur = dict(saved)
        else_body = self.rename_stmt(s.orelse)
        else_cur = dict(self.cur)
        self.cur = dict(saved)

        then_fix: list[Stmt] = [then_body]
        else_fix: list[Stmt] = [else_body]
        for v in written:
            merged = self.fresh(v)
            then_fix.append(Assign(merged, Var(then_cur[v])))
            else_fix.append(Assign(merged, Var(else_cur[v])))
            self.cur[v] = merged
        for a in arrays_written:
            # read-through merge: later reads go through the freshest version
            self.cur[a] = then_cur[a] if then_cur[a] != saved[a] else else_cur[a]
            if then_cur[a] != saved[a] and else_cur[a] != saved[a]:
                self.cur[a] = then_cur[a]  # both wrote; versions alias one store
        return If(cond, seq(then_fix), seq(else_fix))

    def _rename_for(self, s: For) -> Stmt:
        ub = self.rename_expr(s.ub)
        carried = sorted(written_scalars(s.body))
        pre: list[Stmt] = []
        carry: dict[str, str] = {}
        for v in carried:
            cv = self.fresh(v)
            pre.append(Assign(cv, Var(self.cur[v])))
            self.cur[v] = cv
            carry[v] = cv
        body = self.rename_stmt(s.body)
        post_copies: list[Stmt] = []
        for v in carried:
            if self.cur[v] != carry[v]:
                post_copies.append(Assign(carry[v], Var(self.cur[v])))
                self.cur[v] = carry[v]
        return seq(pre + [For(s.counter, ub, seq([body] + post_copies))])


def _written_arrays(s: Stmt) -> set[str]:
    return {t.array for t in walk_stmts(s) if isinstance(t, ArrayAssign)}


def _reads_array(e: Expr) -> bool:
    found = [False]

    def fn(x: Expr):
        if isinstance(x, ArrayRead):
            found[0] = True
        return None

    map_expr(e, fn)
    return found[0]


def ssa_rename(p: Program, pre: Formula | None = None, post: Formula | None = None) -> SsaProgram:
    """Rename scalars and arrays to versions; the pre-condition keeps entry
    names, the post-condition is rewritten over final versions."""
    r = _Renamer(p)
    body = r.rename_stmt(p.body)

    scalars: list[str] = []
    arrays: dict[str, int] = {}
    backing: dict[str, str] = {}
    final_scalars: dict[str, str] = {}
    final_arrays: dict[str, str] = {}
    for orig in p.scalars:
        final_scalars[orig] = r.cur[orig]
        for v in r.version_map[orig]:
            scalars.append(v)
    for orig, rank in p.arrays.items():
        final_arrays[orig] = r.cur[orig]
        for v in r.version_map[orig]:
            arrays[v] = rank
            backing[v] = orig

    renamed = Program(
        scalars=scalars,
        counters=list(p.counters),
        arrays=arrays,
        body=body,
        param=p.param,
        name=p.name,
    )
    post_renamed = None
    if post is not None:
        post_renamed = rename_symbols(post, final_scalars, final_arrays)
    return SsaProgram(
        program=renamed,
        version_map=r.version_map,
        final_scalars=final_scalars,
        final_arrays=final_arrays,
        array_backing=backing,
        pre=pre,
        post=post_renamed,
    )


def strip_array_versions(sp: SsaProgram) -> Program:
    """Execution view: array versions read/write their backing store."""
    def fn(e: Expr):
        if isinstance(e, ArrayRead) and e.array in sp.array_backing:
            return ArrayRead(sp.array_backing[e.array], e.index)
        return None

    from .lang import map_stmt_exprs

    body = sp.program.body
    body = map_stmt_exprs(body, fn)

    def rewrite(s: Stmt) -> Stmt:
        if isinstance(s, Seq):
            return Seq(tuple(rewrite(t) for t in s.stmts))
        if isinstance(s, ArrayAssign):
            return ArrayAssign(sp.array_backing.get(s.array, s.array), s.index, s.rhs)
        if isinstance(s, If):
            return If(s.cond, rewrite(s.then), rewrite(s.orelse))
        if isinstance(s, For):
            return For(s.counter, s.ub, rewrite(s.body))
        return s

    body = rewrite(body)
    originals = set(sp.array_backing.values())
    return Program(
        scalars=list(sp.program.scalars),
        counters=list(sp.program.counters),
        arrays={orig: sp.program.arrays[orig] for orig in originals},
        body=body,
        param=sp.program.param,
        name=sp.program.name,
    )


def single_static_write_report(sp: SsaProgram) -> list[Diagnostic]:
    """Each scalar version must have at most one non-copy assignment site."""
    sites: dict[str, int] = {}
    for s in walk_stmts(sp.program.body):
        if isinstance(s, Assign) and not is_copy(s):
            sites[s.name] = sites.get(s.name, 0) + 1
    return [
        Diagnostic("MultipleWrites", f"scalar version {v} assigned at {k} sites")
        for v, k in sorted(sites.items())
        if k > 1
    ]
