"""SMT-LIB2 emission and the external solver process client.

The solver is any SMT-LIB2-compliant executable. Resolution order: the
DIFFY_SOLVER environment variable, an explicit path, `z3` on PATH, then the
bundled z3-wasm wrapper under tools/solver (spoken to in a persistent
"server" mode with sentinel framing; everything else runs one process per
query over stdin/stdout).
"""

from __future__ import annotations

import os
import shutil
import subprocess
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .formula import FAnd, FBool, FCmp, FNot, FOr, FQuant, Formula
from .lang import ArrayRead, BinOp, BoolConst, BoolOp, Cmp, Const, Expr, Ite, Not, Var
from .poly import poly_degree, poly_of


class SolverCrash(Exception):
    pass


class ModelParseError(Exception):
    pass


@dataclass
class SolverVerdict:
    status: str  # "valid" | "invalid" | "unknown"
    model: Optional[dict] = None
    reason: str = ""

    @property
    def is_valid(self) -> bool:
        return self.status == "valid"


def _repo_root() -> Path:
    return Path(__file__).resolve().parents[2]


def resolve_solver_command(path: Optional[str] = None) -> tuple[list[str], str]:
    """Return (argv, mode) where mode is "server" or "batch"."""
    cand = path or os.environ.get("DIFFY_SOLVER")
    if cand:
        p = Path(cand)
        if p.suffix == ".mjs":
            return (["node", str(p)], "server")
        return ([cand, "-in"] if Path(cand).name.startswith("z3") else [cand], "batch")
    z3 = shutil.which("z3")
    if z3:
        return ([z3, "-in"], "batch")
    bundled = _repo_root() / "tools" / "solver" / "smt2server.mjs"
    if bundled.exists():
        return (["node", str(bundled)], "server")
    raise SolverCrash(
        "no SMT solver found: set DIFFY_SOLVER, pass --solver-path, or install "
        "the bundled wrapper (npm install in tools/solver)"
    )


class SolverSession:
    """One solver child process; restarted transparently after a timeout."""

    def __init__(self, path: Optional[str] = None, timeout_ms: int = 10_000):
        self.argv, self.mode = resolve_solver_command(path)
        self.timeout_ms = timeout_ms
        self.proc: Optional[subprocess.Popen] = None
        self.queries = 0

    def _ensure(self) -> subprocess.Popen:
        if self.proc is None or self.proc.poll() is not None:
            self.proc = subprocess.Popen(
                self.argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                text=True,
            )
        return self.proc

    def query(self, text: str, timeout_ms: Optional[int] = None) -> str:
        """Submit one SMT-LIB2 script; returns raw solver output ('' on timeout)."""
        self.queries += 1
        budget = (timeout_ms or self.timeout_ms) / 1000.0
        if self.mode == "batch":
            try:
                res = subprocess.run(
                    self.argv, input=text, capture_output=True, text=True, timeout=budget
                )
                return res.stdout
            except subprocess.TimeoutExpired:
                return ""
        proc = self._ensure()
        try:
            proc.stdin.write("(reset)\n" + text + "\n(end-query)\n")
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as e:
            raise SolverCrash(f"solver process died: {e}")

        lines: list[str] = []
        done = threading.Event()

        def reader():
            while True:
                line = proc.stdout.readline()
                if not line:
                    break
                if line.strip() == "(end-response)":
                    break
                lines.append(line)
            done.set()

        t = threading.Thread(target=reader, daemon=True)
        t.start()
        if not done.wait(budget):
            proc.kill()
            self.proc = None
            return ""
        return "".join(lines)

    def close(self) -> None:
        if self.proc is not None:
            try:
                self.proc.stdin.close()
                self.proc.wait(timeout=2)
            except Exception:
                self.proc.kill()
            self.proc = None

    def __enter__(self) -> "SolverSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# ---------------------------------------------------------------------------
# Emission


@dataclass
class SymbolTable:
    scalars: set[str] = field(default_factory=set)
    arrays: dict[str, int] = field(default_factory=dict)


def _sort_for_rank(rank: int) -> str:
    return "(Array Int Int)" if rank == 1 else "(Array Int (Array Int Int))"


def expr_to_smt(e: Expr) -> str:
    if isinstance(e, Const):
        return str(e.value) if e.value >= 0 else f"(- {-e.value})"
    if isinstance(e, Var):
        return e.name
    if isinstance(e, BinOp):
        op = {"+": "+", "-": "-", "*": "*", "/": "div", "%": "mod"}[e.op]
        return f"({op} {expr_to_smt(e.left)} {expr_to_smt(e.right)})"
    if isinstance(e, ArrayRead):
        s = e.array
        for i in e.index:
            s = f"(select {s} {expr_to_smt(i)})"
        return s
    if isinstance(e, Ite):
        return f"(ite {bool_to_smt(e.cond)} {expr_to_smt(e.then)} {expr_to_smt(e.other)})"
    raise TypeError(f"expr_to_smt: {e!r}")


_SMT_REL = {"<": "<", "<=": "<=", ">": ">", ">=": ">=", "==": "=", "!=": "distinct"}


def bool_to_smt(b) -> str:
    if isinstance(b, Cmp):
        return f"({_SMT_REL[b.op]} {expr_to_smt(b.left)} {expr_to_smt(b.right)})"
    if isinstance(b, BoolOp):
        op = "and" if b.op == "and" else "or"
        return f"({op} {' '.join(bool_to_smt(a) for a in b.args)})"
    if isinstance(b, Not):
        return f"(not {bool_to_smt(b.arg)})"
    if isinstance(b, BoolConst):
        return "true" if b.value else "false"
    raise TypeError(f"bool_to_smt: {b!r}")


def formula_to_smt(f: Formula) -> str:
    if isinstance(f, FBool):
        return "true" if f.value else "false"
    if isinstance(f, FCmp):
        return f"({_SMT_REL[f.op]} {expr_to_smt(f.left)} {expr_to_smt(f.right)})"
    if isinstance(f, FAnd):
        return f"(and {' '.join(formula_to_smt(a) for a in f.args)})"
    if isinstance(f, FOr):
        return f"(or {' '.join(formula_to_smt(a) for a in f.args)})"
    if isinstance(f, FNot):
        return f"(not {formula_to_smt(f.arg)})"
    if isinstance(f, FQuant):
        rng = f"(and (<= {expr_to_smt(f.lo)} {f.var}) (< {f.var} {expr_to_smt(f.hi)}))"
        body = formula_to_smt(f.body)
        if f.kind == "forall":
            return f"(forall (({f.var} Int)) (=> {rng} {body}))"
        return f"(exists (({f.var} Int)) (and {rng} {body}))"
    raise TypeError(f"formula_to_smt: {f!r}")


def _expr_nonlinear(e: Expr) -> bool:
    if isinstance(e, BinOp) and e.op in ("/", "%"):
        return True
    if isinstance(e, BinOp):
        if e.op == "*" and poly_degree(poly_of(e)) > 1:
            return True
        return _expr_nonlinear(e.left) or _expr_nonlinear(e.right)
    if isinstance(e, ArrayRead):
        return any(_expr_nonlinear(i) for i in e.index)
    if isinstance(e, Ite):
        return _expr_nonlinear(e.then) or _expr_nonlinear(e.other)
    return False


def formula_nonlinear(f: Formula) -> bool:
    if isinstance(f, FCmp):
        return _expr_nonlinear(f.left) or _expr_nonlinear(f.right)
    if isinstance(f, (FAnd, FOr)):
        return any(formula_nonlinear(a) for a in f.args)
    if isinstance(f, FNot):
        return formula_nonlinear(f.arg)
    if isinstance(f, FQuant):
        return _expr_nonlinear(f.lo) or _expr_nonlinear(f.hi) or formula_nonlinear(f.body)
    return False


def emit_smtlib(
    assertions: list[Formula],
    symbols: SymbolTable,
    timeout_ms: int = 10_000,
    get_values: Optional[list[str]] = None,
    logic: Optional[str] = None,
) -> str:
    """A full SMT-LIB2 script: declarations, assertions, check-sat, model reads."""
    if logic is None:
        logic = "AUFNIA" if any(formula_nonlinear(a) for a in assertions) else "AUFLIA"
    out = [f"(set-logic {logic})", f"(set-option :timeout {timeout_ms})"]
    for s in sorted(symbols.scalars):
        out.append(f"(declare-const {s} Int)")
    for a in sorted(symbols.arrays):
        out.append(f"(declare-const {a} {_sort_for_rank(symbols.arrays[a])})")
    for f in assertions:
        out.append(f"(assert {formula_to_smt(f)})")
    out.append("(check-sat)")
    if get_values:
        out.append(f"(get-value ({' '.join(get_values)}))")
    return "\n".join(out)


def parse_check_output(raw: str) -> tuple[str, list[int]]:
    """First sat/unsat/unknown plus any integers from a (get-value) response."""
    status = "unknown"
    for line in raw.splitlines():
        word = line.strip()
        if word in ("sat", "unsat", "unknown"):
            status = word
            break
        if word.startswith("(error"):
            raise SolverCrash(word)
    values: list[int] = []
    if status == "sat":
        tail = raw.split(status, 1)[1]
        values = _parse_value_ints(tail)
    return status, values


def _parse_value_ints(text: str) -> list[int]:
    """Integers of each value pair in a (get-value) response, in order."""
    toks = text.replace("(", " ( ").replace(")", " ) ").split()
    tree, stack = [], [[]]
    for t in toks:
        if t == "(":
            stack.append([])
        elif t == ")":
            done = stack.pop()
            if not stack:
                raise ModelParseError(text)
            stack[-1].append(done)
        else:
            stack[-1].append(t)
    tree = stack[0]
    if not tree or not isinstance(tree[0], list):
        return []

    def as_int(node) -> int:
        if isinstance(node, list):
            if len(node) == 2 and node[0] == "-":
                return -as_int(node[1])
            raise ModelParseError(f"not an integer value: {node}")
        return int(node)

    out = []
    for pair in tree[0]:
        if isinstance(pair, list) and len(pair) == 2:
            out.append(as_int(pair[1]))
    return out


def solve(text: str, session: SolverSession, timeout_ms: Optional[int] = None) -> SolverVerdict:
    """Run a script whose satisfiability refutes validity: unsat means valid."""
    raw = session.query(text, timeout_ms)
    if raw == "":
        return SolverVerdict("unknown", reason="timeout")
    status, _ = parse_check_output(raw)
    if status == "unsat":
        return SolverVerdict("valid")
    if status == "sat":
        return SolverVerdict("invalid")
    return SolverVerdict("unknown", reason="solver returned unknown")
