"""Polynomial normalization over expressions.

Expressions are flattened into integer-coefficient polynomials whose variables
are scalar names or opaque atoms (array reads, divisions, conditionals).  This
powers canonical printing, syntactic equality up to arithmetic, loop-bound
difference computation, and template fitting.
"""

from __future__ import annotations

from typing import Optional

from .lang import ArrayRead, BinOp, BoolExpr, Const, Expr, Ite, Var, expr_str

# monomial: tuple of (atom, exponent) pairs sorted by atom key; () is the unit
Monomial = tuple
Poly = dict


def euclid_div(a: int, b: int) -> int:
    """Euclidean integer division: remainder is always in [0, |b|)."""
    if b == 0:
        raise ZeroDivisionError("division by zero")
    q = a // b
    if a - q * b < 0:
        q += 1 if b < 0 else -1
    return q


def euclid_mod(a: int, b: int) -> int:
    if b == 0:
        raise ZeroDivisionError("mod by zero")
    r = a % b
    return r if r >= 0 else r + abs(b)


def _atom_key(e: Expr) -> str:
    return expr_str(e)


def p_const(c: int) -> Poly:
    return {(): c} if c else {}

def p_var(e: Expr) -> Poly:
    return {((e, 1),): 1}


def p_add(a: Poly, b: Poly) -> Poly:
    out = dict(a)
    for m, c in b.items():
        c2 = out.get(m, 0) + c
        if c2:
            out[m] = c2
        else:
            out.pop(m, None)
    return out


def p_neg(a: Poly) -> Poly:
    return {m: -c for m, c in a.items()}


def p_sub(a: Poly, b: Poly) -> Poly:
    return p_add(a, p_neg(b))


def _m_mul(m1: Monomial, m2: Monomial) -> Monomial:
    exps: dict = {}
    order: dict = {}
    for atom, k in list(m1) + list(m2):
        key = _atom_key(atom)
        exps[key] = exps.get(key, 0) + k
        order[key] = atom
    return tuple((order[k], exps[k]) for k in sorted(exps))


def p_mul(a: Poly, b: Poly) -> Poly:
    out: Poly = {}
    for m1, c1 in a.items():
        for m2, c2 in b.items():
            m = _m_mul(m1, m2)
            c = out.get(m, 0) + c1 * c2
            if c:
                out[m] = c
            else:
                out.pop(m, None)
    return out


def poly_of(e: Expr) -> Poly:
    """Flatten an expression to a polynomial; non-polynomial subterms become atoms."""
    if isinstance(e, Const):
        return p_const(e.value)
    if isinstance(e, Var):
        return p_var(e)
    if isinstance(e, BinOp):
        if e.op == "+":
            return p_add(poly_of(e.left), poly_of(e.right))
        if e.op == "-":
            return p_sub(poly_of(e.left), poly_of(e.right))
        if e.op == "*":
            return p_mul(poly_of(e.left), poly_of(e.right))
        # / and %: constant-fold if possible, else opaque
        simp = simplify_expr(e)
        if isinstance(simp, Const):
            return p_const(simp.value)
        return p_var(simp)
    # array reads and conditionals are opaque atoms with canonicalized insides
    return p_var(simplify_expr(e))


def poly_const(p: Poly) -> Optional[int]:
    """The value of a constant polynomial, or None."""
    if not p:
        return 0
    if len(p) == 1 and () in p:
        return p[()]
    return None


def poly_degree(p: Poly, names: Optional[set[str]] = None) -> int:
    deg = 0
    for m in p:
        d = 0
        for atom, k in m:
            if names is None or (isinstance(atom, Var) and atom.name in names):
                d += k
        deg = max(deg, d)
    return deg


def poly_vars(p: Poly) -> set[str]:
    out: set[str] = set()
    for m in p:
        for atom, _ in m:
            if isinstance(atom, Var):
                out.add(atom.name)
    return out


def is_affine(p: Poly, allowed: set[str]) -> bool:
    """Degree <= 1 and every atom is an allowed scalar variable."""
    for m in p:
        total = 0
        for atom, k in m:
            if not (isinstance(atom, Var) and atom.name in allowed):
                return False
            total += k
        if total > 1:
            return False
    return True


def affine_coeffs(p: Poly) -> Optional[tuple[dict[str, int], int]]:
    """Return ({var: coeff}, constant) for an affine polynomial, else None."""
    coeffs: dict[str, int] = {}
    const = 0
    for m, c in p.items():
        if m == ():
            const = c
        elif len(m) == 1 and m[0][1] == 1 and isinstance(m[0][0], Var):
            coeffs[m[0][0].name] = c
        else:
            return None
    return coeffs, const


def expr_of(p: Poly) -> Expr:
    """Canonical expression for a polynomial (stable monomial order)."""
    if not p:
        return Const(0)

    def m_key(m: Monomial):
        return (-sum(k for _, k in m), tuple(_atom_key(a) for a, _ in m))

    terms = []
    for m in sorted(p, key=m_key):
        c = p[m]
        factors: list[Expr] = []
        for atom, k in m:
            factors.extend([atom] * k)
        if not factors:
            term: Expr = Const(abs(c))
        else:
            term = factors[0]
            for f in factors[1:]:
                term = BinOp("*", term, f)
            if abs(c) != 1:
                term = BinOp("*", Const(abs(c)), term)
        terms.append((c >= 0, term))
    pos, expr = terms[0]
    if not pos:
        expr = BinOp("-", Const(0), expr)
    for sign, term in terms[1:]:
        expr = BinOp("+" if sign else "-", expr, term)
    return expr


def simplify_expr(e: Expr) -> Expr:
    if isinstance(e, (Const, Var)):
        return e
    if isinstance(e, BinOp):
        if e.op in ("+", "-", "*"):
            return expr_of(poly_of(e))
        left, right = simplify_expr(e.left), simplify_expr(e.right)
        if isinstance(left, Const) and isinstance(right, Const) and right.value != 0:
            if e.op == "/":
                return Const(euclid_div(left.value, right.value))
            return Const(euclid_mod(left.value, right.value))
        return BinOp(e.op, left, right)
    if isinstance(e, ArrayRead):
        return ArrayRead(e.array, tuple(simplify_expr(i) for i in e.index))
    if isinstance(e, Ite):
        cond = _decide_cond(e.cond)
        if cond is True:
            return simplify_expr(e.then)
        if cond is False:
            return simplify_expr(e.other)
        return Ite(e.cond, simplify_expr(e.then), simplify_expr(e.other))
    return e


def _decide_cond(b) -> object:
    """True/False when a condition is decidable by polynomial arithmetic."""
    from .lang import BoolConst, BoolOp, Cmp, Not

    if isinstance(b, BoolConst):
        return b.value
    if isinstance(b, Cmp):
        d = poly_const(p_sub(poly_of(b.left), poly_of(b.right)))
        if d is None:
            return None
        return {
            "<": d < 0, "<=": d <= 0, ">": d > 0, ">=": d >= 0, "==": d == 0, "!=": d != 0,
        }[b.op]
    if isinstance(b, Not):
        inner = _decide_cond(b.arg)
        return None if inner is None else not inner
    if isinstance(b, BoolOp):
        vals = [_decide_cond(a) for a in b.args]
        if b.op == "and":
            if any(v is False for v in vals):
                return False
            if all(v is True for v in vals):
                return True
        else:
            if any(v is True for v in vals):
                return True
            if all(v is False for v in vals):
                return False
    return None


def diff_const(a: Expr, b: Expr) -> Optional[int]:
    """a - b when the difference normalizes to an integer constant, else None."""
    return poly_const(p_sub(poly_of(a), poly_of(b)))


def exprs_equal(a: Expr, b: Expr) -> bool:
    return diff_const(a, b) == 0
