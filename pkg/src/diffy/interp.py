"""Concrete executor: environments, tracing, loop unrolling, random inputs."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .formula import FCmp, FQuant, Formula, conjuncts, eval_bool, eval_expr, eval_formula
from .lang import (
    ArrayAssign,
    ArrayRead,
    Assign,
    BinOp,
    Const,
    Expr,
    For,
    If,
    Program,
    Seq,
    Stmt,
    Var,
    map_stmt_exprs,
    seq,
    subst_var,
)


class RuntimeFault(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


class UnrollBudgetExceeded(Exception):
    pass


@dataclass
class Env:
    """Concrete state: scalar values and arrays of size n (n x n for rank 2)."""

    scalars: dict[str, int] = field(default_factory=dict)
    arrays: dict[str, list] = field(default_factory=dict)
    n: int = 1

    def copy(self) -> "Env":
        arrays = {}
        for k, v in self.arrays.items():
            arrays[k] = [row[:] for row in v] if v and isinstance(v[0], list) else v[:]
        return Env(dict(self.scalars), arrays, self.n)

    def value_map(self) -> dict:
        return {**self.scalars}


def fresh_env(program: Program, n: int, fill: int = 0) -> Env:
    scalars = {s: fill for s in program.scalars}
    arrays = {}
    for a, rank in program.arrays.items():
        arrays[a] = [[fill] * n for _ in range(n)] if rank == 2 else [fill] * n
    return Env(scalars, arrays, n)


TraceFn = Callable[[str, str, Env], None]


def execute(program: Program, env: Env, trace: Optional[TraceFn] = None) -> Env:
    """Run the program on a copy of env; returns the final environment."""
    out = env.copy()
    out.scalars.setdefault(program.param, out.n)
    if out.scalars[program.param] != out.n:
        out.scalars[program.param] = out.n
    _exec(program.body, out, trace)
    if trace:
        trace("final", "", out)
    return out


def _eval(e: Expr, env: Env) -> int:
    scalars = dict(env.scalars)
    try:
        return eval_expr(e, scalars, env.arrays)
    except IndexError:
        raise RuntimeFault("IndexOutOfBounds", f"while evaluating an index in size-{env.n} arrays")
    except ZeroDivisionError:
        raise RuntimeFault("DivisionByZero", "zero divisor at runtime")
    except KeyError as k:
        raise RuntimeFault("Uninitialized", f"no value for {k}")


def _index(env: Env, idx: tuple[Expr, ...]) -> tuple[int, ...]:
    vals = tuple(_eval(i, env) for i in idx)
    for v in vals:
        if v < 0 or v >= env.n:
            raise RuntimeFault("IndexOutOfBounds", f"index {v} outside [0,{env.n})")
    return vals


def _exec(s: Stmt, env: Env, trace: Optional[TraceFn]) -> None:
    if isinstance(s, Seq):
        for t in s.stmts:
            _exec(t, env, trace)
    elif isinstance(s, Assign):
        env.scalars[s.name] = _eval(s.rhs, env)
    elif isinstance(s, ArrayAssign):
        vals = _index(env, s.index)
        rhs = _eval(s.rhs, env)
        tgt = env.arrays[s.array]
        if len(vals) == 1:
            tgt[vals[0]] = rhs
        else:
            tgt[vals[0]][vals[1]] = rhs
    elif isinstance(s, If):
        try:
            taken = eval_bool(s.cond, dict(env.scalars), env.arrays)
        except IndexError:
            raise RuntimeFault("IndexOutOfBounds", "in a branch condition")
        _exec(s.then if taken else s.orelse, env, trace)
    elif isinstance(s, For):
        env.scalars[s.counter] = 0
        while True:
            if trace:
                trace("head", s.counter, env)
            if env.scalars[s.counter] >= _eval(s.ub, env):
                break
            _exec(s.body, env, trace)
            env.scalars[s.counter] += 1
        if trace:
            trace("exit", s.counter, env)
    else:
        raise TypeError(f"_exec: {s!r}")


# ---------------------------------------------------------------------------
# Unrolling (fixed N)


def unroll(program: Program, n: int, budget: int = 100_000) -> Stmt:
    """Fully unroll every loop at N = n; the result contains no For nodes."""
    count = [0]

    def expand(s: Stmt, consts: dict[str, int]) -> Stmt:
        if isinstance(s, Seq):
            return seq([expand(t, consts) for t in s.stmts])
        if isinstance(s, For):
            sub = dict(consts)
            ub_expr = _subst_consts(s.ub, consts, program.param, n)
            ub = _eval_const(ub_expr)
            copies = []
            for k in range(max(ub, 0)):
                sub[s.counter] = k
                copies.append(expand(s.body, sub))
            copies.append(_subst_consts_stmt(Assign(s.counter, Const(max(ub, 0))), consts, program.param, n))
            return seq(copies)
        count[0] += 1
        if count[0] > budget:
            raise UnrollBudgetExceeded(f"more than {budget} statements at {program.param}={n}")
        return _subst_consts_stmt(s, consts, program.param, n)

    return expand(program.body, {})


def _subst_consts(e: Expr, consts: dict[str, int], param: str, n: int) -> Expr:
    def fn(x: Expr):
        if isinstance(x, Var):
            if x.name == param:
                return Const(n)
            if x.name in consts:
                return Const(consts[x.name])
        return None

    from .lang import map_expr

    return map_expr(e, fn)


def _subst_consts_stmt(s: Stmt, consts: dict[str, int], param: str, n: int) -> Stmt:
    def fn(x: Expr):
        if isinstance(x, Var):
            if x.name == param:
                return Const(n)
            if x.name in consts:
                return Const(consts[x.name])
        return None

    return map_stmt_exprs(s, fn)


def _eval_const(e: Expr) -> int:
    from .poly import simplify_expr

    v = simplify_expr(e)
    if not isinstance(v, Const):
        raise RuntimeFault("SymbolicBound", "loop bound did not evaluate to a constant")
    return v.value


# ---------------------------------------------------------------------------
# Random environments honoring a pre-condition


class CannotSample(Exception):
    pass


def _pin_from_pre(env: Env, pre: Formula, param: str) -> None:
    scalars = {**env.scalars, param: env.n}
    for c in conjuncts(pre):
        if isinstance(c, FCmp) and c.op == "==" and isinstance(c.left, Var):
            try:
                env.scalars[c.left.name] = eval_expr(c.right, scalars, env.arrays)
            except Exception:
                pass
        elif isinstance(c, FQuant) and c.kind == "forall":
            body = c.body
            if isinstance(body, FQuant) and body.kind == "forall" and isinstance(body.body, FCmp):
                inner = body.body
                if inner.op == "==" and isinstance(inner.left, ArrayRead) and len(inner.left.index) == 2:
                    arr = inner.left.array
                    if arr not in env.arrays:
                        continue
                    try:
                        lo1, hi1 = eval_expr(c.lo, scalars, env.arrays), eval_expr(c.hi, scalars, env.arrays)
                        lo2, hi2 = eval_expr(body.lo, scalars, env.arrays), eval_expr(body.hi, scalars, env.arrays)
                        for x in range(max(lo1, 0), min(hi1, env.n)):
                            for y in range(max(lo2, 0), min(hi2, env.n)):
                                env.arrays[arr][x][y] = eval_expr(
                                    inner.right, {**scalars, c.var: x, body.var: y}, env.arrays
                                )
                    except Exception:
                        pass
            elif isinstance(body, FCmp) and body.op == "==" and isinstance(body.left, ArrayRead):
                arr = body.left.array
                if arr not in env.arrays or len(body.left.index) != 1:
                    continue
                try:
                    lo = eval_expr(c.lo, scalars, env.arrays)
                    hi = eval_expr(c.hi, scalars, env.arrays)
                    for x in range(max(lo, 0), min(hi, env.n)):
                        env.arrays[arr][x] = eval_expr(body.right, {**scalars, c.var: x}, env.arrays)
                except Exception:
                    pass


def random_env(program: Program, n: int, rng: random.Random, pre: Formula, tries: int = 60) -> Env:
    """A random environment of size n satisfying pre (rejection sampling)."""
    for _ in range(tries):
        env = fresh_env(program, n)
        for s in program.scalars:
            env.scalars[s] = rng.randint(-4, 6)
        for a, rank in program.arrays.items():
            if rank == 2:
                env.arrays[a] = [[rng.randint(-4, 6) for _ in range(n)] for _ in range(n)]
            else:
                env.arrays[a] = [rng.randint(-4, 6) for _ in range(n)]
        _pin_from_pre(env, pre, program.param)
        scalars = {**env.scalars, program.param: n}
        try:
            if eval_formula(pre, scalars, env.arrays):
                return env
        except Exception:
            continue
    raise CannotSample(f"no environment satisfying the pre-condition at {program.param}={n}")


def satisfies(formula: Formula, env: Env, param: str = "N") -> bool:
    return eval_formula(formula, {**env.scalars, param: env.n}, env.arrays)
