"""Parser and validator for annotated array programs.

Input files are C-like sources with `// assume(F)` lines before the entry
function and `// assert(F)` lines after it:

    // assume(forall i in [0,N) :: A[i] > 0)
    void main(int A[], int N) {
      S = 0;
      for (i = 0; i < N; i++) { S = S + 1; }
    }
    // assert(S == N)

The function wrapper and declarations are optional; loops must be counting
loops `for (i = 0; i < UB; i++)`.  Formulas use bounded quantifiers written
`forall i in [lo,hi) :: body` (a comma may replace `::`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .formula import (
    FQuant,
    Formula,
    Spec,
    TRUEF,
    fand,
    fnot,
    for_,
    formula_arrays,
    formula_scalars,
    from_boolexpr,
)
from .lang import (
    ArrayRead,
    Assign,
    ArrayAssign,
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
    seq,
    walk_stmts,
)
from .poly import affine_coeffs, poly_of

PARAM = "N"


class ParseError(Exception):
    def __init__(self, message: str, line: int = 0, col: int = 0):
        super().__init__(f"{message} (line {line}, col {col})" if line else message)
        self.line = line
        self.col = col


class GrammarViolation(ParseError):
    pass


@dataclass
class Diagnostic:
    code: str
    message: str
    severity: str = "error"  # "error" | "warning"

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


# ---------------------------------------------------------------------------
# Lexer

_TWO_CHAR = ("==", "!=", "<=", ">=", "&&", "||", "++", "::")
_ONE_CHAR = "()[]{};,=<>!+-*/%?:"
_KEYWORDS = {
    "for", "if", "else", "while", "int", "void", "float", "return",
    "forall", "exists", "in", "true", "false", "mod", "assume", "assert",
}


@dataclass
class Token:
    kind: str  # "ident", "int", "kw", "op", "eof"
    text: str
    line: int
    col: int


def tokenize(src: str, line0: int = 1) -> list[Token]:
    toks: list[Token] = []
    i, line, col = 0, line0, 1
    n = len(src)
    while i < n:
        c = src[i]
        if c == "\n":
            i += 1
            line += 1
            col = 1
            continue
        if c.isspace():
            i += 1
            col += 1
            continue
        if src.startswith("//", i):
            j = src.find("\n", i)
            i = n if j < 0 else j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (src[j].isalnum() or src[j] == "_"):
                j += 1
            word = src[i:j]
            toks.append(Token("kw" if word in _KEYWORDS else "ident", word, line, col))
            col += j - i
            i = j
            continue
        if c.isdigit():
            j = i
            while j < n and src[j].isdigit():
                j += 1
            toks.append(Token("int", src[i:j], line, col))
            col += j - i
            i = j
            continue
        two = src[i : i + 2]
        if two in _TWO_CHAR:
            toks.append(Token("op", two, line, col))
            i += 2
            col += 2
            continue
        if c in _ONE_CHAR:
            toks.append(Token("op", c, line, col))
            i += 1
            col += 1
            continue
        raise ParseError(f"unexpected character {c!r}", line, col)
    toks.append(Token("eof", "", line, col))
    return toks


# ---------------------------------------------------------------------------
# Parser

class _Parser:
    def __init__(self, toks: list[Token]):
        self.toks = toks
        self.pos = 0

    def peek(self, ahead: int = 0) -> Token:
        return self.toks[min(self.pos + ahead, len(self.toks) - 1)]

    def next(self) -> Token:
        t = self.toks[self.pos]
        if t.kind != "eof":
            self.pos += 1
        return t

    def at(self, text: str) -> bool:
        return self.peek().text == text and self.peek().kind in ("op", "kw")

    def accept(self, text: str) -> bool:
        if self.at(text):
            self.next()
            return True
        return False

    def expect(self, text: str) -> Token:
        t = self.peek()
        if not self.accept(text):
            raise ParseError(f"expected {text!r}, found {t.text!r}", t.line, t.col)
        return t

    def fail(self, msg: str):
        t = self.peek()
        raise ParseError(msg, t.line, t.col)

    # -- expressions ---------------------------------------------------

    def parse_formula(self) -> Formula:
        return self._quantified()

    def _quantified(self) -> Formula:
        if self.at("forall") or self.at("exists"):
            kind = self.next().text
            var = self._ident()
            self.expect("in")
            self.expect("[")
            lo = self._to_int(self._additive())
            self.expect(",")
            hi = self._to_int(self._additive())
            self.expect(")")
            if not (self.accept("::") or self.accept(",")):
                self.fail("expected '::' or ',' after quantifier range")
            return FQuant(kind, var, lo, hi, self._quantified())
        return from_boolexpr(self._to_bool(self._or_level()))

    def parse_condition(self) -> BoolExpr:
        return self._to_bool(self._or_level())

    def parse_expr(self) -> Expr:
        return self._to_int(self._ternary())

    def _or_level(self):
        node = self._and_level()
        while self.at("||"):
            self.next()
            node = BoolOp("or", (self._to_bool(node), self._to_bool(self._and_level())))
        return node

    def _and_level(self):
        node = self._not_level()
        while self.at("&&"):
            self.next()
            node = BoolOp("and", (self._to_bool(node), self._to_bool(self._not_level())))
        return node

    def _not_level(self):
        if self.at("!"):
            self.next()
            return Not(self._to_bool(self._not_level()))
        return self._relational()

    def _relational(self):
        if self.at("forall") or self.at("exists"):
            self.fail("quantifier not allowed here")
        left = self._ternary()
        t = self.peek()
        if t.text in ("<", "<=", ">", ">=", "==", "!="):
            self.next()
            right = self._ternary()
            return Cmp(t.text, self._to_int(left), self._to_int(right))
        return left

    def _ternary(self):
        node = self._additive()
        if self.at("?"):
            self.next()
            then = self._to_int(self._ternary())
            self.expect(":")
            other = self._to_int(self._ternary())
            return Ite(self._to_bool(node), then, other)
        return node

    def _additive(self):
        node = self._multiplicative()
        while self.peek().text in ("+", "-") and self.peek().kind == "op":
            op = self.next().text
            node = BinOp(op, self._to_int(node), self._to_int(self._multiplicative()))
        return node

    def _multiplicative(self):
        node = self._unary()
        while self.peek().text in ("*", "/", "%", "mod"):
            op = self.next().text
            node = BinOp("%" if op == "mod" else op, self._to_int(node), self._to_int(self._unary()))
        return node

    def _unary(self):
        if self.at("-"):
            self.next()
            inner = self._to_int(self._unary())
            if isinstance(inner, Const):
                return Const(-inner.value)
            return BinOp("-", Const(0), inner)
        if self.at("!"):
            self.next()
            return Not(self._to_bool(self._unary()))
        return self._postfix()

    def _postfix(self):
        node = self._primary()
        while self.at("["):
            if not isinstance(node, Var):
                self.fail("only named arrays can be indexed")
            indices = []
            while self.accept("["):
                indices.append(self._to_int(self._additive()))
                self.expect("]")
            return ArrayRead(node.name, tuple(indices))
        return node

    def _primary(self):
        t = self.peek()
        if t.kind == "int":
            self.next()
            return Const(int(t.text))
        if t.kind == "ident":
            self.next()
            return Var(t.text)
        if t.text == "true":
            self.next()
            return BoolConst(True)
        if t.text == "false":
            self.next()
            return BoolConst(False)
        if self.accept("("):
            node = self._or_level()
            # allow ternary after a parenthesized condition: (c ? a : b)
            if self.at("?"):
                self.next()
                then = self._to_int(self._ternary())
                self.expect(":")
                other = self._to_int(self._ternary())
                node = Ite(self._to_bool(node), then, other)
            self.expect(")")
            return node
        self.fail(f"unexpected token {t.text!r}")

    def _ident(self) -> str:
        t = self.peek()
        if t.kind != "ident":
            self.fail("expected identifier")
        return self.next().text

    @staticmethod
    def _to_int(node) -> Expr:
        if isinstance(node, Expr):
            return node
        raise ParseError("expected arithmetic expression, found a condition")

    @staticmethod
    def _to_bool(node) -> BoolExpr:
        if isinstance(node, BoolExpr):
            return node
        # C-style truthiness: a bare integer expression means e != 0
        return Cmp("!=", node, Const(0))

    # -- statements ----------------------------------------------------

    def parse_block(self) -> Stmt:
        self.expect("{")
        stmts = []
        while not self.at("}"):
            stmts.append(self.parse_stmt())
        self.expect("}")
        return seq(stmts)

    def parse_stmt(self) -> Stmt:
        t = self.peek()
        if self.at("{"):
            return self.parse_block()
        if self.at("while"):
            raise GrammarViolation("while-loops are not in the language", t.line, t.col)
        if self.at("for"):
            return self._for()
        if self.at("if"):
            return self._if()
        if t.text in ("int", "float"):
            return self._declaration()
        if self.at("return"):
            self.next()
            if not self.at(";"):
                self.parse_expr()
            self.expect(";")
            return Seq()
        return self._assignment()

    def _assignment(self) -> Stmt:
        name = self._ident()
        indices = []
        while self.accept("["):
            indices.append(self.parse_expr())
            self.expect("]")
        self.expect("=")
        rhs = self.parse_expr()
        self.expect(";")
        if indices:
            return ArrayAssign(name, tuple(indices), rhs)
        return Assign(name, rhs)

    def _declaration(self) -> Stmt:
        self.next()  # int / float
        stmts = []
        while True:
            name = self._ident()
            dims = 0
            while self.accept("["):
                if not self.at("]"):
                    self.parse_expr()
                self.expect("]")
                dims += 1
            if self.accept("="):
                if dims:
                    self.fail("array initializers are not supported")
                stmts.append(Assign(name, self.parse_expr()))
            if self.accept(","):
                continue
            self.expect(";")
            break
        return seq(stmts)

    def _if(self) -> Stmt:
        self.expect("if")
        self.expect("(")
        cond = self.parse_condition()
        self.expect(")")
        then = self.parse_stmt()
        orelse: Stmt = Seq()
        if self.accept("else"):
            orelse = self.parse_stmt()
        return If(cond, then, orelse)

    def _for(self) -> Stmt:
        tok = self.peek()
        self.expect("for")
        self.expect("(")
        self.accept("int")
        counter = self._ident()
        self.expect("=")
        init = self.parse_expr()
        if init != Const(0):
            raise GrammarViolation(f"loop counter {counter} must start at 0", tok.line, tok.col)
        self.expect(";")
        cvar = self._ident()
        if cvar != counter:
            raise GrammarViolation("loop condition must test the loop counter", tok.line, tok.col)
        self.expect("<")
        ub = self.parse_expr()
        self.expect(";")
        # increment: `i++` or `i = i + 1`
        ivar = self._ident()
        if self.accept("++"):
            pass
        else:
            self.expect("=")
            inc = self.parse_expr()
            if inc != BinOp("+", Var(counter), Const(1)):
                raise GrammarViolation(f"loop counter {counter} must increment by 1", tok.line, tok.col)
        if ivar != counter:
            raise GrammarViolation("loop increment must update the loop counter", tok.line, tok.col)
        self.expect(")")
        body = self.parse_stmt()
        return For(counter, ub, body)


# ---------------------------------------------------------------------------
# File-level parsing


def _extract_annotations(source: str) -> tuple[list[str], list[str], str]:
    """Pull `// assume(...)` / `// assert(...)` comment lines out of the source."""
    assumes, asserts_ = [], []
    kept_lines = []
    for lineno, line in enumerate(source.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("//"):
            inner = stripped[2:].strip()
            for kind, bucket in (("assume", assumes), ("assert", asserts_)):
                if inner.startswith(kind):
                    rest = inner[len(kind):].strip()
                    if not (rest.startswith("(") and rest.endswith(")")):
                        raise ParseError(f"malformed {kind} annotation", lineno, 1)
                    bucket.append(rest[1:-1])
                    break
            kept_lines.append("")
        else:
            kept_lines.append(line)
    return assumes, asserts_, "\n".join(kept_lines)


def parse_formula_text(text: str) -> Formula:
    p = _Parser(tokenize(text))
    f = p.parse_formula()
    if p.peek().kind != "eof":
        p.fail("trailing tokens after formula")
    return f


def parse_statements(text: str) -> Stmt:
    """Parse a brace-less statement sequence (used to re-read emitted programs)."""
    p = _Parser(tokenize(text))
    stmts = []
    while p.peek().kind != "eof":
        stmts.append(p.parse_stmt())
    return seq(stmts)


def parse_program(source: str) -> tuple[Program, Spec]:
    """Parse an annotated source file; raises ParseError / GrammarViolation."""
    assumes, asserts_, stripped = _extract_annotations(source)
    p = _Parser(tokenize(stripped))

    name = "main"
    if p.at("void") or p.at("int"):
        p.next()
        name = p._ident()
        p.expect("(")
        while not p.at(")"):
            p.accept("int") or p.accept("float")
            p._ident()
            while p.accept("["):
                if not p.at("]"):
                    p.parse_expr()
                p.expect("]")
            if not p.accept(","):
                break
        p.expect(")")
        body = p.parse_block()
    else:
        stmts = []
        while p.peek().kind != "eof":
            stmts.append(p.parse_stmt())
        body = seq(stmts)
    if p.peek().kind != "eof":
        p.fail("trailing tokens after program")

    pre = fand([parse_formula_text(t) for t in assumes]) if assumes else TRUEF
    post = fand([parse_formula_text(t) for t in asserts_]) if asserts_ else TRUEF

    program = _collect(name, body, pre, post)
    hard = [d for d in validate(program) if d.severity == "error"]
    if hard:
        raise GrammarViolation("; ".join(str(d) for d in hard))
    return program, Spec(pre=pre, post=post)


def _collect(name: str, body: Stmt, pre: Formula, post: Formula) -> Program:
    counters: list[str] = []
    arrays: dict[str, int] = {}
    scalars: list[str] = []
    seen: set[str] = set()

    def note_scalar(n: str):
        if n != PARAM and n not in arrays and n not in seen:
            seen.add(n)
            scalars.append(n)

    def note_array(n: str, rank: int):
        if n not in arrays:
            arrays[n] = rank

    def scan_expr(e: Expr):
        if isinstance(e, Var):
            note_scalar(e.name)
        elif isinstance(e, BinOp):
            scan_expr(e.left)
            scan_expr(e.right)
        elif isinstance(e, ArrayRead):
            note_array(e.array, len(e.index))
            for i in e.index:
                scan_expr(i)
        elif isinstance(e, Ite):
            scan_cond(e.cond)
            scan_expr(e.then)
            scan_expr(e.other)

    def scan_cond(b: BoolExpr):
        if isinstance(b, Cmp):
            scan_expr(b.left)
            scan_expr(b.right)
        elif isinstance(b, BoolOp):
            for a in b.args:
                scan_cond(a)
        elif isinstance(b, Not):
            scan_cond(b.arg)

    for s in walk_stmts(body):
        if isinstance(s, For):
            counters.append(s.counter)
            note_scalar(s.counter)
            scan_expr(s.ub)
        elif isinstance(s, Assign):
            note_scalar(s.name)
            scan_expr(s.rhs)
        elif isinstance(s, ArrayAssign):
            note_array(s.array, len(s.index))
            for i in s.index:
                scan_expr(i)
            scan_expr(s.rhs)
        elif isinstance(s, If):
            scan_cond(s.cond)

    for f in (pre, post):
        for a in sorted(formula_arrays(f)):
            if a not in arrays:
                arrays[a] = _formula_array_rank(f, a)
        for v in sorted(formula_scalars(f)):
            note_scalar(v)

    scalars = [s for s in scalars if s not in arrays]
    return Program(scalars=scalars, counters=counters, arrays=arrays, body=body, param=PARAM, name=name)


def _formula_array_rank(f: Formula, name: str) -> int:
    rank = 1
    stack = [f]
    while stack:
        g = stack.pop()
        if isinstance(g, FQuant):
            stack.append(g.body)
        elif hasattr(g, "args"):
            stack.extend(g.args)
        elif hasattr(g, "arg"):
            stack.append(g.arg)
        elif hasattr(g, "left"):
            for e in _reads(g.left) + _reads(g.right):
                if e.array == name:
                    rank = max(rank, len(e.index))
    return rank


def _reads(e: Expr) -> list[ArrayRead]:
    out = []
    stack = [e]
    while stack:
        x = stack.pop()
        if isinstance(x, ArrayRead):
            out.append(x)
            stack.extend(x.index)
        elif isinstance(x, BinOp):
            stack.extend((x.left, x.right))
        elif isinstance(x, Ite):
            stack.extend((x.then, x.other))
    return out


# ---------------------------------------------------------------------------
# Validation


def validate(p: Program) -> list[Diagnostic]:
    """Structural checks; an empty list means the program is well-formed."""
    diags: list[Diagnostic] = []

    seen_counters: set[str] = set()
    for s in walk_stmts(p.body):
        if isinstance(s, For):
            if s.counter in seen_counters:
                diags.append(Diagnostic("CounterReused", f"loop counter {s.counter} reused"))
            seen_counters.add(s.counter)
            if s.counter == p.param:
                diags.append(Diagnostic("ParamAssigned", f"{p.param} used as a loop counter"))

    def check(s: Stmt, enclosing: tuple[str, ...]):
        if isinstance(s, Seq):
            for t in s.stmts:
                check(t, enclosing)
        elif isinstance(s, Assign):
            if s.name in seen_counters:
                diags.append(Diagnostic("CounterAssigned", f"loop counter {s.name} assigned in a body"))
            if s.name == p.param:
                diags.append(Diagnostic("ParamAssigned", f"parameter {p.param} assigned"))
        elif isinstance(s, ArrayAssign):
            if p.arrays.get(s.array, len(s.index)) != len(s.index):
                diags.append(Diagnostic("RankMismatch", f"array {s.array} used with mixed ranks"))
        elif isinstance(s, If):
            check(s.then, enclosing)
            check(s.orelse, enclosing)
        elif isinstance(s, For):
            from .lang import expr_vars

            free = expr_vars(s.ub)
            allowed = {p.param} | set(enclosing)
            bad = free - allowed
            if bad:
                diags.append(
                    Diagnostic(
                        "ScopeViolation",
                        f"bound of loop {s.counter} uses {sorted(bad)}; only {p.param} and "
                        "enclosing counters are allowed",
                    )
                )
            check(s.body, enclosing + (s.counter,))

    check(p.body, ())
    _check_indices(p, diags)
    _check_divisors(p, diags)
    return diags


def _counter_ranges(p: Program) -> dict[str, Expr]:
    ranges: dict[str, Expr] = {}
    for s in walk_stmts(p.body):
        if isinstance(s, For):
            ranges[s.counter] = s.ub
    return ranges


def _affine_max_in_n(e: Expr, ranges: dict[str, Expr], param: str):
    """Upper bound of an index expression as (a, b) meaning a*N + b, or None."""
    ac = affine_coeffs(poly_of(e))
    if ac is None:
        return None
    coeffs, const = ac
    a, b = 0, const
    for v, c in coeffs.items():
        if v == param:
            a += c
            continue
        if v not in ranges or c < 0:
            # counters are >= 0; a negative coefficient only lowers the max
            if v in ranges and c < 0:
                continue
            return None
        ub = affine_coeffs(poly_of(ranges[v]))
        if ub is None:
            return None
        ucoe, ucon = ub
        if set(ucoe) - {param}:
            return None  # bound depends on another counter; stay quiet
        a += c * ucoe.get(param, 0)
        b += c * (ucon - 1)
    return a, b


def _check_indices(p: Program, diags: list[Diagnostic]) -> None:
    ranges = _counter_ranges(p)

    def check_index(arr: str, idx: Expr):
        m = _affine_max_in_n(idx, ranges, p.param)
        if m is None:
            return
        a, b = m
        # max index is a*N + b; in-range needs a*N + b <= N - 1 for all N >= 1
        slope, at_one = a - 1, (a - 1) + (b + 1)
        if slope > 0 or at_one > 0:
            diags.append(
                Diagnostic("IndexWarning", f"index {expr_str_safe(idx)} of {arr} may reach {a}*N+{b}", "warning")
            )

    for s in walk_stmts(p.body):
        if isinstance(s, ArrayAssign):
            for i in s.index:
                check_index(s.array, i)
    from .lang import stmt_exprs

    for e in stmt_exprs(p.body):
        for r in _reads(e):
            for i in r.index:
                check_index(r.array, i)


def expr_str_safe(e: Expr) -> str:
    from .lang import expr_str

    return expr_str(e)


def _check_divisors(p: Program, diags: list[Diagnostic]) -> None:
    from .lang import stmt_exprs

    def scan(e: Expr):
        if isinstance(e, BinOp):
            if e.op in ("/", "%"):
                if e.right == Const(0):
                    diags.append(Diagnostic("DivisionByZero", "constant zero divisor"))
                elif not isinstance(e.right, Const):
                    diags.append(Diagnostic("DivisionGuard", f"non-constant divisor {expr_str_safe(e.right)}", "warning"))
            scan(e.left)
            scan(e.right)
        elif isinstance(e, ArrayRead):
            for i in e.index:
                scan(i)
        elif isinstance(e, Ite):
            scan(e.then)
            scan(e.other)

    for e in stmt_exprs(p.body):
        scan(e)


def post_is_existential(spec: Spec) -> bool:
    return any(isinstance(c, FQuant) and c.kind == "exists" for c in conjuncts_of(spec.post))


def conjuncts_of(f: Formula) -> list[Formula]:
    from .formula import conjuncts

    return conjuncts(f)
