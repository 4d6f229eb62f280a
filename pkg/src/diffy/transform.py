"""Program truncation and peeling.

Given P_N, build Q_{N-1} (all loop bounds use N-1 instead of N) and peel(P_N)
(the iterations P_N runs but Q_{N-1} skips) so that P_N is semantically
equivalent to Q_{N-1};peel(P_N).  Peels are moved to the end of the program;
uses of values the peels define are repaired by substituting the defining
expressions, and peel writes that a later segment overwrites are dropped.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional, Union

from .lang import (
    ArrayAssign,
    ArrayRead,
    Assign,
    BinOp,
    Cmp,
    Const,
    Expr,
    For,
    If,
    Ite,
    Program,
    Seq,
    Stmt,
    Var,
    expr_str,
    expr_vars,
    is_loop_free,
    map_expr,
    map_stmt_exprs,
    seq,
    stmt_list,
    walk_stmts,
)
from .poly import affine_coeffs, diff_const, exprs_equal, poly_of, simplify_expr


class PeelSubstitutionBlocked(Exception):
    pass


class UnsupportedIndexing(Exception):
    pass


@dataclass
class QAndPeel:
    q: Program
    peel: Program
    per_loop: list[tuple[Stmt, Stmt]] = field(default_factory=list)
    substitutions: list[str] = field(default_factory=list)  # human-readable log
    dropped_writes: list[str] = field(default_factory=list)


def nesting_depth(node: Union[Program, Stmt]) -> int:
    s = node.body if isinstance(node, Program) else node
    if isinstance(s, Seq):
        return max((nesting_depth(t) for t in s.stmts), default=0)
    if isinstance(s, If):
        return max(nesting_depth(s.then), nesting_depth(s.orelse))
    if isinstance(s, For):
        return 1 + nesting_depth(s.body)
    return 0


def subst_param(e: Expr, param: str, repl: Expr) -> Expr:
    def fn(x: Expr):
        if isinstance(x, Var) and x.name == param:
            return repl
        return None

    return map_expr(e, fn)


def truncate_ubs(s: Stmt, param: str) -> Stmt:
    """Substitute param-1 for param in every loop bound (and only there)."""
    prev = BinOp("-", Var(param), Const(1))
    if isinstance(s, Seq):
        return Seq(tuple(truncate_ubs(t, param) for t in s.stmts))
    if isinstance(s, If):
        return If(s.cond, truncate_ubs(s.then, param), truncate_ubs(s.orelse, param))
    if isinstance(s, For):
        return For(s.counter, subst_param(s.ub, param, prev), truncate_ubs(s.body, param))
    return s


def everywhere_prev(s: Stmt, param: str) -> Stmt:
    """Substitute param-1 for every use of param (bodies and bounds alike)."""
    prev = BinOp("-", Var(param), Const(1))
    return map_stmt_exprs(s, lambda e: prev if isinstance(e, Var) and e.name == param else None)


def program_at_prev(p: Program) -> Program:
    return p.with_body(everywhere_prev(p.body, p.param))


# ---------------------------------------------------------------------------
# LPeel


def _fresh_counter(base: str, used: set[str]) -> str:
    cand = base + "_t"
    while cand in used:
        cand += "t"
    return cand


def lpeel(loop: For, lo: Expr, hi: Expr, used_counters: Optional[set[str]] = None) -> Stmt:
    """Iterations of the loop with counter in [lo, hi): unrolled copies when
    hi-lo is a nonnegative constant, else a residual loop."""
    k = diff_const(hi, lo)
    if k is not None:
        if k < 0:
            raise PeelSubstitutionBlocked(
                f"loop {loop.counter}: bound decreases with the parameter ({k})"
            )
        copies = []
        for m in range(k):
            idx = simplify_expr(BinOp("+", lo, Const(m)))
            copies.append(_subst_counter(loop.body, loop.counter, idx))
        return seq(copies)
    if exprs_equal(lo, Const(0)):
        return For(loop.counter, simplify_expr(hi), loop.body)
    used = used_counters or {loop.counter}
    t = _fresh_counter(loop.counter, used)
    shifted = _subst_counter(loop.body, loop.counter, BinOp("+", lo, Var(t)))
    return For(t, simplify_expr(BinOp("-", hi, lo)), shifted)


def _subst_counter(s: Stmt, counter: str, repl: Expr) -> Stmt:
    ix = simplify_expr(repl)
    return map_stmt_exprs(s, lambda e: ix if isinstance(e, Var) and e.name == counter else None)


# ---------------------------------------------------------------------------
# Loop summarization (closed forms for peel loops)


def summarize_peel_loop(loop: For) -> Optional[Stmt]:
    """Closed-form replacement for simple accumulator/fill loops, or None.

    Handled shapes (body straight-line, statements independent):
      v = v + e          e counter-free        -> v = v + e*ub
      v = v + a*l + b    a, b counter-free     -> v = v + a*(ub*(ub-1))/2 + b*ub
      A[i] = A[i] + e    i, e counter-free     -> A[i] = A[i] + e*ub
      A[i] = e           i, e counter-free     -> if (0 < ub) A[i] = e
      v = e              e counter-free        -> if (0 < ub) v = e
    """
    body = stmt_list(loop.body)
    l, ub = loop.counter, loop.ub
    written: list[tuple] = []
    for s in body:
        if isinstance(s, Assign):
            written.append(("s", s.name))
        elif isinstance(s, ArrayAssign):
            if any(l in expr_vars(i) for i in s.index):
                return None
            written.append(("a", s.array, _index_key(s.index)))
        else:
            return None
    if len(set(written)) != len(written):
        return None

    def reads_other_written(e: Expr, own) -> bool:
        names = expr_vars(e)
        for w in written:
            if w == own:
                continue
            if w[0] == "s" and w[1] in names:
                return True
            if w[0] == "a" and w[1] in _expr_array_names(e):
                return True
        return False

    out: list[Stmt] = []
    guard = Cmp("<", Const(0), ub)
    for s, own in zip(body, written):
        if isinstance(s, Assign):
            target: Expr = Var(s.name)
        else:
            target = ArrayRead(s.array, s.index)
        delta = simplify_expr(BinOp("-", s.rhs, target))
        if not _self_free(delta, s):
            # rhs is not target + delta with delta self-free; try pure overwrite
            if l in expr_vars(s.rhs) or _reads_target(s.rhs, s) or reads_other_written(s.rhs, own):
                return None
            assign = Assign(s.name, s.rhs) if isinstance(s, Assign) else s
            out.append(If(guard, assign))
            continue
        if reads_other_written(delta, own):
            return None
        ac = affine_coeffs(poly_of(delta))
        if ac is None:
            return None
        coeffs, _ = ac
        if l not in coeffs:
            if l in expr_vars(delta):
                return None
            total = simplify_expr(BinOp("*", delta, ub))
        else:
            a = coeffs.pop(l)
            rest = simplify_expr(BinOp("-", delta, BinOp("*", Const(a), Var(l))))
            if l in expr_vars(rest):
                return None
            tri = BinOp("/", BinOp("*", ub, BinOp("-", ub, Const(1))), Const(2))
            total = simplify_expr(BinOp("+", BinOp("*", Const(a), tri), BinOp("*", rest, ub)))
        upd = BinOp("+", target, total)
        out.append(Assign(s.name, upd) if isinstance(s, Assign) else ArrayAssign(s.array, s.index, upd))
    return seq(out)


def _index_key(index: tuple[Expr, ...]) -> tuple[str, ...]:
    return tuple(expr_str(simplify_expr(i)) for i in index)


def _expr_array_names(e: Expr) -> set[str]:
    from .lang import expr_arrays

    return expr_arrays(e)


def _reads_target(e: Expr, s: Stmt) -> bool:
    if isinstance(s, Assign):
        return s.name in expr_vars(e)
    return s.array in _expr_array_names(e)


def _self_free(delta: Expr, s: Stmt) -> bool:
    """delta = rhs - target must not mention the target location."""
    return not _reads_target(delta, s)


def summarize_loops_in(s: Stmt) -> Stmt:
    """Bottom-up: replace summarizable loops inside a peel with closed forms."""
    if isinstance(s, Seq):
        return seq([summarize_loops_in(t) for t in s.stmts])
    if isinstance(s, If):
        return If(s.cond, summarize_loops_in(s.then), summarize_loops_in(s.orelse))
    if isinstance(s, For):
        inner = For(s.counter, s.ub, summarize_loops_in(s.body))
        summary = summarize_peel_loop(inner)
        return summary if summary is not None else inner
    return s


# ---------------------------------------------------------------------------
# Peel construction for one (possibly nested) loop


def gen_q_and_peel_for_loop(loop: For, param: str) -> tuple[Stmt, Stmt]:
    """Truncated loop and its peel, per the nested peeling scheme."""
    q = truncate_ubs(loop, param)
    return q, _missed_iterations(loop, param)


def _missed_iterations(loop: For, param: str) -> Stmt:
    subloops = _direct_subloops(loop.body)
    own_peel = lpeel(loop, subst_param(loop.ub, param, BinOp("-", Var(param), Const(1))), loop.ub)
    if not subloops:
        return own_peel
    inner = seq([_missed_iterations(sl, param) for sl in subloops])
    trunc_ub = subst_param(loop.ub, param, BinOp("-", Var(param), Const(1)))
    replay = For(loop.counter, simplify_expr(trunc_ub), inner)
    return seq([replay, own_peel])


def _direct_subloops(s: Stmt) -> list[For]:
    if isinstance(s, For):
        return [s]
    if isinstance(s, Seq):
        out = []
        for t in s.stmts:
            out.extend(_direct_subloops(t))
        return out
    if isinstance(s, If):
        return _direct_subloops(s.then) + _direct_subloops(s.orelse)
    return []


# ---------------------------------------------------------------------------
# Symbolic effects of peel code and the repair walk

_LOOPY = "loopy"  # effect unavailable: the peel fragment writing this is a loop


class _EffectUnavailable(Exception):
    """A peel statement's value cannot be expressed over the pre-peel state."""


class _Effects:
    """Pending peel writes: location -> defining expression over current state."""

    def __init__(self):
        self.scalars: dict[str, Expr] = {}
        self.cells: dict[tuple[str, tuple[str, ...]], tuple[tuple[Expr, ...], Expr]] = {}
        self.loopy_scalars: set[str] = set()
        self.loopy_arrays: set[str] = set()
        self.writers: dict = {}  # location key -> list of peel stmt ids

    def all_read_vars(self) -> set[str]:
        out: set[str] = set()
        for e in self.scalars.values():
            expr_vars(e, out)
        for _, (idx, e) in self.cells.items():
            expr_vars(e, out)
            for i in idx:
                expr_vars(i, out)
        return out


def _cells_of_array(eff: _Effects, array: str):
    return [(key, idx, val) for key, (idx, val) in eff.cells.items() if key[0] == array]


def _resolve_read(
    eff: _Effects, e: Expr, ranges: dict[str, Expr], param: str, log: list[str], strict: bool = True
):
    """Rewrite reads through pending effects.  In strict mode (repairing code
    the peels move across) unclear aliasing aborts the transformation; in
    non-strict mode (composing effects of later peel statements, whose runtime
    order is preserved) it only marks the effect as unavailable."""

    def fn(x: Expr):
        if isinstance(x, Var):
            if x.name in eff.loopy_scalars:
                if strict:
                    raise PeelSubstitutionBlocked(
                        f"use of {x.name}, defined by a loop in an earlier peel"
                    )
                raise _EffectUnavailable()
            if x.name in eff.scalars:
                log.append(f"{x.name} -> {expr_str(eff.scalars[x.name])}")
                return eff.scalars[x.name]
            return None
        if isinstance(x, ArrayRead):
            if x.array in eff.loopy_arrays:
                if strict:
                    raise PeelSubstitutionBlocked(
                        f"use of array {x.array}, updated by a loop in an earlier peel"
                    )
                raise _EffectUnavailable()
            for key, idx, val in _cells_of_array(eff, x.array):
                rel = _compare_indices(x.index, idx, ranges, param)
                if rel == "same":
                    log.append(f"{expr_str(x)} -> {expr_str(val)}")
                    return val
                if rel == "maybe":
                    if strict:
                        raise UnsupportedIndexing(
                            f"cannot separate read {expr_str(x)} from peel write at "
                            f"{key[0]}[{','.join(key[1])}]"
                        )
                    raise _EffectUnavailable()
            return None
        return None

    return map_expr(e, fn)


def _compare_indices(
    read: tuple[Expr, ...], write: tuple[Expr, ...], ranges: dict[str, Expr], param: str
) -> str:
    """"same", "disjoint", or "maybe" for two index tuples."""
    if len(read) != len(write):
        return "maybe"
    verdicts = []
    for r, w in zip(read, write):
        d = diff_const(r, w)
        if d == 0:
            verdicts.append("same")
            continue
        if d is not None:
            verdicts.append("disjoint")
            continue
        if _affine_lt(r, w, ranges, param) or _affine_lt(w, r, ranges, param):
            verdicts.append("disjoint")
        else:
            verdicts.append("maybe")
    if all(v == "same" for v in verdicts):
        return "same"
    if any(v == "disjoint" for v in verdicts):
        return "disjoint"
    return "maybe"


def _affine_lt(a: Expr, b: Expr, ranges: dict[str, Expr], param: str) -> bool:
    """a < b for all counter values in range and all param >= 1 (conservative)."""
    hi = _affine_max(a, ranges, param)
    lo = _affine_min(b, ranges, param)
    if hi is None or lo is None:
        return False
    (ah, bh), (al, bl) = hi, lo
    # min(b) - max(a) = (al-ah)*N + (bl-bh) must be >= 1 for all N >= 1
    slope, at_one = al - ah, (al - ah) + (bl - bh)
    return slope >= 0 and at_one >= 1


def _affine_max(e: Expr, ranges: dict[str, Expr], param: str):
    return _affine_bound(e, ranges, param, want_max=True)


def _affine_min(e: Expr, ranges: dict[str, Expr], param: str):
    return _affine_bound(e, ranges, param, want_max=False)


def _affine_bound(e: Expr, ranges: dict[str, Expr], param: str, want_max: bool):
    """Bound an index as (a, b) meaning a*param + b, using counter ranges."""
    ac = affine_coeffs(poly_of(e))
    if ac is None:
        return None
    coeffs, const = ac
    a, b = 0, const
    for v, c in coeffs.items():
        if v == param:
            a += c
            continue
        if v not in ranges:
            return None
        if (c > 0) == want_max:
            # counter's extreme is ub-1
            ub = affine_coeffs(poly_of(ranges[v]))
            if ub is None:
                return None
            ucoe, ucon = ub
            if set(ucoe) - {param}:
                return None
            a += c * ucoe.get(param, 0)
            b += c * (ucon - 1)
        else:
            pass  # counter's other extreme is 0; contributes nothing
    return a, b


def _straight_effects(stmts: list[Stmt], eff: _Effects, ranges: dict, param: str, top_id: int):
    """Fold peel statements into the pending-effects map; writes are tagged
    with the id of the enclosing top-level peel statement."""
    for s in stmts:
        try:
            if isinstance(s, Seq):
                _straight_effects(list(s.stmts), eff, ranges, param, top_id)
            elif isinstance(s, Assign):
                val = _resolve_read(eff, s.rhs, ranges, param, [], strict=False)
                eff.scalars[s.name] = simplify_expr(val)
                eff.writers.setdefault(("s", s.name), []).append(top_id)
            elif isinstance(s, ArrayAssign):
                idx = tuple(
                    simplify_expr(_resolve_read(eff, i, ranges, param, [], strict=False))
                    for i in s.index
                )
                val = simplify_expr(_resolve_read(eff, s.rhs, ranges, param, [], strict=False))
                key = (s.array, _index_key(idx))
                for okey, oidx, _ in _cells_of_array(eff, s.array):
                    if okey == key:
                        continue
                    if _compare_indices(idx, oidx, ranges, param) == "maybe":
                        raise _EffectUnavailable()
                eff.cells[key] = (idx, val)
                eff.writers.setdefault(("a",) + key, []).append(top_id)
            elif isinstance(s, If):
                then_eff, else_eff = _branch_effects(s, eff, ranges, param, top_id)
                cond = _resolve_cond(eff, s.cond, ranges, param, strict=False)
                _merge_branch_effects(eff, cond, then_eff, else_eff, top_id)
            elif isinstance(s, For):
                raise _EffectUnavailable()
            else:
                raise TypeError(f"_straight_effects: {s!r}")
        except _EffectUnavailable:
            for name in _written_scalars_of(s):
                eff.scalars.pop(name, None)
                eff.loopy_scalars.add(name)
            for arr in _written_arrays_of(s):
                for key, _, _ in _cells_of_array(eff, arr):
                    del eff.cells[key]
                eff.loopy_arrays.add(arr)


def _branch_effects(s: If, eff: _Effects, ranges: dict, param: str, top_id: int):
    import copy

    t_eff = copy.deepcopy(eff)
    e_eff = copy.deepcopy(eff)
    _straight_effects(stmt_list(s.then), t_eff, ranges, param, top_id)
    _straight_effects(stmt_list(s.orelse), e_eff, ranges, param, top_id)
    return t_eff, e_eff


def _resolve_cond(eff: _Effects, cond, ranges: dict, param: str, strict: bool = True):
    from .lang import BoolOp, Not as LNot

    if isinstance(cond, Cmp):
        return Cmp(
            cond.op,
            _resolve_read(eff, cond.left, ranges, param, [], strict),
            _resolve_read(eff, cond.right, ranges, param, [], strict),
        )
    if isinstance(cond, BoolOp):
        return BoolOp(cond.op, tuple(_resolve_cond(eff, a, ranges, param, strict) for a in cond.args))
    if isinstance(cond, LNot):
        return LNot(_resolve_cond(eff, cond.arg, ranges, param, strict))
    return cond


def _merge_branch_effects(eff: _Effects, cond, t_eff: _Effects, e_eff: _Effects, top_id: int):
    eff.loopy_scalars |= t_eff.loopy_scalars | e_eff.loopy_scalars
    eff.loopy_arrays |= t_eff.loopy_arrays | e_eff.loopy_arrays
    for name in set(t_eff.scalars) | set(e_eff.scalars):
        tv = t_eff.scalars.get(name, eff.scalars.get(name, Var(name)))
        ev = e_eff.scalars.get(name, eff.scalars.get(name, Var(name)))
        if tv == ev and name in eff.scalars and eff.scalars[name] == tv:
            continue  # untouched by the branch
        eff.scalars[name] = tv if tv == ev else Ite(cond, tv, ev)
        eff.writers.setdefault(("s", name), []).append(top_id)
    for key in set(t_eff.cells) | set(e_eff.cells):
        arr, _ = key
        idx = (t_eff.cells.get(key) or e_eff.cells.get(key))[0]
        default_val = eff.cells[key][1] if key in eff.cells else ArrayRead(arr, idx)
        tv = t_eff.cells[key][1] if key in t_eff.cells else default_val
        ev = e_eff.cells[key][1] if key in e_eff.cells else default_val
        if tv == ev and key in eff.cells and eff.cells[key][1] == tv:
            continue
        eff.cells[key] = (idx, tv if tv == ev else Ite(cond, tv, ev))
        eff.writers.setdefault(("a",) + key, []).append(top_id)


def _written_scalars_of(s: Stmt) -> set[str]:
    out = set()
    for t in walk_stmts(s):
        if isinstance(t, Assign):
            out.add(t.name)
    return out


def _written_arrays_of(s: Stmt) -> set[str]:
    out = set()
    for t in walk_stmts(s):
        if isinstance(t, ArrayAssign):
            out.add(t.array)
    return out


# ---------------------------------------------------------------------------
# The full transformation


def gen_q_and_peel(p: Program, check_equivalence: bool = True) -> QAndPeel:
    """Algorithmic construction of Q_{N-1} and peel(P_N); raises
    PeelSubstitutionBlocked / UnsupportedIndexing when moving a peel to the
    end of the program cannot be justified."""
    param = p.param
    segments = stmt_list(p.body)

    per_loop: list[tuple[Stmt, Stmt]] = []
    peel_stmts: list[tuple[int, Stmt]] = []  # (top-level id, stmt) in peel order
    q_parts: list[Stmt] = []
    eff = _Effects()
    sub_log: list[str] = []
    dropped: list[str] = []
    ranges = _all_counter_ranges(p, truncated=True)
    next_id = [0]

    def repair_stmt(s: Stmt, depth: int = 0) -> Stmt:
        if isinstance(s, Seq):
            return Seq(tuple(repair_stmt(t, depth) for t in s.stmts))
        if isinstance(s, Assign):
            rhs = _resolve_read(eff, s.rhs, ranges, param, sub_log)
            _note_overwrite(("s", s.name), s.name, depth)
            _guard_stale_scalar(s.name)
            return Assign(s.name, simplify_expr(rhs))
        if isinstance(s, ArrayAssign):
            idx = tuple(_resolve_read(eff, i, ranges, param, sub_log) for i in s.index)
            rhs = _resolve_read(eff, s.rhs, ranges, param, sub_log)
            sidx = tuple(simplify_expr(i) for i in idx)
            _note_array_overwrite(s.array, sidx, depth)
            _guard_stale_array(s.array, sidx)
            return ArrayAssign(s.array, sidx, simplify_expr(rhs))
        if isinstance(s, If):
            cond = _resolve_cond(eff, s.cond, ranges, param)
            # branches execute at most once at top level, but a drop in one
            # branch must also be valid on the other path: treat as nested
            return If(cond, repair_stmt(s.then, depth + 1), repair_stmt(s.orelse, depth + 1))
        if isinstance(s, For):
            return For(
                s.counter, _resolve_read(eff, s.ub, ranges, param, sub_log), repair_stmt(s.body, depth + 1)
            )
        raise TypeError(f"repair_stmt: {s!r}")

    def _pending_reads() -> tuple[set[str], list[tuple[str, Optional[tuple[Expr, ...]]]]]:
        """Raw reads of peel statements not yet dropped (None index = a range)."""
        scalars: set[str] = set()
        array_reads: list[tuple[str, Optional[tuple[Expr, ...]]]] = []
        for i, s in peel_stmts:
            if i in drop_ids:
                continue
            in_loop = not is_loop_free(s)
            for e in _stmt_read_exprs(s):
                expr_vars(e, scalars)
                for rd in _array_reads_in(e):
                    key = None if in_loop else rd.index
                    array_reads.append((rd.array, key))
        return scalars, array_reads

    def _guard_stale_scalar(name: str) -> None:
        if name in eff.all_read_vars():
            raise PeelSubstitutionBlocked(
                f"{name} feeds a pending substitution but is reassigned first"
            )
        pend_scalars, _ = _pending_reads()
        if name in pend_scalars:
            raise PeelSubstitutionBlocked(
                f"{name} is read by a pending peel but reassigned before the peel runs"
            )

    def _guard_stale_array(array: str, idx: tuple[Expr, ...]) -> None:
        _, pend_arrays = _pending_reads()
        for arr, ridx in pend_arrays:
            if arr != array:
                continue
            if ridx is None:
                raise PeelSubstitutionBlocked(
                    f"array {array} is read by a pending peel loop and written before it runs"
                )
            if _compare_indices(idx, ridx, ranges, param) != "disjoint":
                raise PeelSubstitutionBlocked(
                    f"write to {array} may stale a pending peel read"
                )

    def _note_overwrite(key, name: str, depth: int) -> None:
        if name in eff.loopy_scalars:
            raise PeelSubstitutionBlocked(f"{name} is written by a peel loop and reassigned later")
        if name in eff.scalars:
            if depth > 0:
                raise PeelSubstitutionBlocked(
                    f"{name} holds a pending peel value but is reassigned under a loop or branch"
                )
            _drop_writers(("s", name), f"scalar {name}", ("s", name))
            del eff.scalars[name]

    def _note_array_overwrite(array: str, idx: tuple[Expr, ...], depth: int) -> None:
        if array in eff.loopy_arrays:
            raise PeelSubstitutionBlocked(f"array {array} is written by a peel loop and again later")
        for key, widx, _ in _cells_of_array(eff, array):
            rel = _compare_indices(idx, widx, ranges, param)
            if rel == "same":
                if depth > 0:
                    raise PeelSubstitutionBlocked(
                        f"{array} cell holds a pending peel value but is rewritten under a loop or branch"
                    )
                _drop_writers(("a",) + key, f"{array}[{','.join(key[1])}]", ("a",) + key)
                del eff.cells[key]
            elif rel == "maybe":
                raise UnsupportedIndexing(
                    f"write to {array} may alias a pending peel write"
                )

    def _drop_writers(wkey, desc: str, loc_key) -> None:
        ids = set(eff.writers.get(wkey, []))
        if not ids:
            raise PeelSubstitutionBlocked(f"cannot drop pending write to {desc}")
        # a peel statement may be dropped only if it writes nothing else
        for i in ids:
            others = _stmt_write_keys(dict(peel_stmts)[i], ranges, param) - {loc_key}
            if others:
                raise PeelSubstitutionBlocked(
                    f"peel statement writing {desc} also writes {sorted(others)}"
                )
        drop_ids.update(ids)
        # the absorbed value must not feed any peel statement that remains
        pend_scalars, pend_arrays = _pending_reads()
        if loc_key[0] == "s" and loc_key[1] in pend_scalars:
            raise PeelSubstitutionBlocked(f"dropped {desc} still feeds a kept peel statement")
        if loc_key[0] == "a":
            widx = eff.cells[(loc_key[1], loc_key[2])][0]
            for arr, ridx in pend_arrays:
                if arr != loc_key[1]:
                    continue
                if ridx is None or _compare_indices(widx, ridx, ranges, param) != "disjoint":
                    raise PeelSubstitutionBlocked(
                        f"dropped {desc} still feeds a kept peel statement"
                    )
        dropped.append(desc)

    drop_ids: set[int] = set()

    for seg in segments:
        if isinstance(seg, For):
            q_l, r_l = gen_q_and_peel_for_loop(seg, param)
            r_l = summarize_loops_in(r_l)
            per_loop.append((q_l, r_l))
            q_parts.append(repair_stmt(q_l))
            for s in stmt_list(r_l):
                next_id[0] += 1
                peel_stmts.append((next_id[0], s))
                _straight_effects([s], eff, ranges, param, next_id[0])
        else:
            q_parts.append(repair_stmt(seg))

    kept_peel = [s for i, s in peel_stmts if i not in drop_ids]

    q_prog = _make_program(p, seq(q_parts))
    peel_prog = _make_program(p, seq(kept_peel))
    result = QAndPeel(q_prog, peel_prog, per_loop, sub_log, dropped)
    if check_equivalence:
        _differential_check(p, result)
    return result


def _stmt_write_keys(s: Stmt, ranges: dict, param: str) -> set:
    """Location keys a peel statement writes (scalars and canonical cells)."""
    out: set = set()
    for t in walk_stmts(s):
        if isinstance(t, Assign):
            out.add(("s", t.name))
        elif isinstance(t, ArrayAssign):
            out.add(("a", t.array, _index_key(tuple(simplify_expr(i) for i in t.index))))
    return out


def _stmt_read_exprs(s: Stmt):
    """Expressions a statement reads (rhs, indices, conditions, bounds)."""
    from .lang import stmt_exprs

    yield from stmt_exprs(s)


def _array_reads_in(e: Expr) -> list[ArrayRead]:
    out: list[ArrayRead] = []
    stack: list = [e]
    while stack:
        x = stack.pop()
        if isinstance(x, ArrayRead):
            out.append(x)
            stack.extend(x.index)
        elif isinstance(x, BinOp):
            stack.extend((x.left, x.right))
        elif isinstance(x, Ite):
            stack.extend((x.then, x.other))
            if isinstance(x.cond, Cmp):
                stack.extend((x.cond.left, x.cond.right))
    return out


def _all_counter_ranges(p: Program, truncated: bool) -> dict[str, Expr]:
    """Counter -> iteration bound, with bounds truncated to the Q form."""
    out: dict[str, Expr] = {}
    prev = BinOp("-", Var(p.param), Const(1))
    for s in walk_stmts(p.body):
        if isinstance(s, For):
            ub = subst_param(s.ub, p.param, prev) if truncated else s.ub
            out[s.counter] = simplify_expr(ub)
    return out


def _make_program(p: Program, body: Stmt) -> Program:
    counters = []
    for s in walk_stmts(body):
        if isinstance(s, For) and s.counter not in counters:
            counters.append(s.counter)
    scalars = list(p.scalars)
    for s in walk_stmts(body):
        if isinstance(s, For) and s.counter not in scalars:
            scalars.append(s.counter)
    return Program(
        scalars=scalars,
        counters=counters,
        arrays=dict(p.arrays),
        body=body,
        param=p.param,
        name=p.name,
    )


def _differential_check(p: Program, qp: QAndPeel, ns=(2, 3), draws: int = 3) -> None:
    """Spot-check Q;peel against P on concrete runs; mismatch aborts the move."""
    from .interp import execute, fresh_env
    from .lang import program_str

    rng = random.Random(hash(program_str(p)) & 0xFFFF)
    combined = p.with_body(seq([qp.q.body, qp.peel.body]))
    for n in ns:
        for _ in range(draws):
            env = fresh_env(p, n)
            for s in p.input_scalars():
                env.scalars[s] = rng.randint(-3, 5)
            for a, rank in p.arrays.items():
                if rank == 2:
                    env.arrays[a] = [[rng.randint(-3, 5) for _ in range(n)] for _ in range(n)]
                else:
                    env.arrays[a] = [rng.randint(-3, 5) for _ in range(n)]
            try:
                ref = execute(p, env)
                got = execute(combined, env)
            except Exception as e:
                raise PeelSubstitutionBlocked(f"differential check crashed: {e}")
            for s in p.input_scalars():
                if ref.scalars.get(s) != got.scalars.get(s):
                    raise PeelSubstitutionBlocked(
                        f"differential check: {s} differs at N={n} "
                        f"({ref.scalars.get(s)} vs {got.scalars.get(s)})"
                    )
            for a in p.arrays:
                if ref.arrays[a] != got.arrays[a]:
                    raise PeelSubstitutionBlocked(
                        f"differential check: array {a} differs at N={n}"
                    )
