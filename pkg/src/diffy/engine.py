"""The verification engine: base case, inductive step over the peel, the
strengthening fixpoint, recursion on looping peels, and existential posts."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

from .diffinv import (
    DiffAnalysis,
    Fact,
    InferSettings,
    P,
    Q,
    StructureMismatch,
    infer_diff_invariants,
    tag,
    tag_formula,
    untag,
)
from .formula import (
    FCmp,
    FQuant,
    Formula,
    Spec,
    TRUEF,
    conjuncts,
    fand,
    fnot,
    formula_arrays,
    formula_scalars,
    formula_str,
    map_formula,
    rename_symbols,
    shift_param,
    simplify_formula,
    subst_scalar,
)
from .interp import Env, UnrollBudgetExceeded, execute, satisfies, unroll
from .lang import (
    ArrayAssign,
    ArrayRead,
    BinOp,
    Const,
    Expr,
    For,
    Program,
    Var,
    expr_vars,
    is_loop_free,
    walk_stmts,
)
from .logic import (
    ArrayLink,
    LoopInCode,
    ScalarLink,
    check_valid,
    expand_quantifiers,
    formula_diff,
    implies,
    qe_by_substitution,
    wp,
)
from .poly import affine_coeffs, poly_of, simplify_expr
from .smt import SolverSession, SolverVerdict, SymbolTable
from .transform import (
    PeelSubstitutionBlocked,
    QAndPeel,
    UnsupportedIndexing,
    _all_counter_ranges,
    _compare_indices,
    gen_q_and_peel,
    nesting_depth,
    program_at_prev,
)


@dataclass
class Config:
    solver_path: Optional[str] = None
    timeout_ms: int = 10_000
    budget_s: float = 60.0
    base_width: int = 1
    base_bound: int = 8
    strengthen_cap: int = 10
    unroll_budget: int = 100_000
    recursion_cap: Optional[int] = None
    seed: int = 0
    emit_ssa: bool = False
    emit_peel: bool = False
    emit_diffinv: bool = False


@dataclass
class StrengthenRecord:
    iteration: int
    wp_pre: Formula
    chi_prime: Formula  # the strengthening fact at parameter N-1
    chi: Formula  # the same fact re-indexed at N

    def as_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "wp_pre": formula_str(self.wp_pre),
            "chi_prime": formula_str(self.chi_prime),
            "chi": formula_str(self.chi),
        }


@dataclass
class Verdict:
    status: str  # "verified" | "falsified" | "unknown"
    reason: str = ""
    witness_n: Optional[int] = None
    witness: Optional[Env] = None
    iterations: int = 0
    recursion_depth: int = 0
    diagnostics: dict = field(default_factory=dict)
    analysis: Optional[DiffAnalysis] = None
    strengthening: list[StrengthenRecord] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return {"verified": 0, "falsified": 1, "unknown": 2}[self.status]


class _Budget:
    def __init__(self, seconds: float, vc_timeout_ms: int):
        self.deadline = time.monotonic() + seconds
        self.vc_timeout_ms = vc_timeout_ms

    def left_ms(self) -> int:
        return max(0, int((self.deadline - time.monotonic()) * 1000))

    def vc_ms(self) -> int:
        return max(100, min(self.vc_timeout_ms, self.left_ms()))

    def expired(self) -> bool:
        return self.left_ms() <= 0


def verify(program: Program, spec: Spec, cfg: Optional[Config] = None) -> Verdict:
    """Prove or refute {pre} program {post} for every parameter value >= 1."""
    cfg = cfg or Config()
    session = SolverSession(cfg.solver_path, cfg.timeout_ms)
    budget = _Budget(cfg.budget_s, cfg.timeout_ms)
    t0 = time.monotonic()
    try:
        eng = _Engine(cfg, session, budget)
        if _post_has_existential(spec.post):
            v = eng.verify_existential(program, spec)
        else:
            v = eng.verify(program, spec, depth=0)
    except Exception as e:  # solver crashes and internal faults degrade
        v = Verdict("unknown", reason=f"internal: {e}")
    finally:
        session.close()
    v.diagnostics.setdefault("wall_ms", int((time.monotonic() - t0) * 1000))
    v.diagnostics["program"] = program.name
    v.diagnostics["status"] = v.status
    v.diagnostics["reason"] = v.reason
    v.diagnostics["iterations"] = v.iterations
    v.diagnostics["recursion_depth"] = v.recursion_depth
    v.diagnostics["solver_queries"] = session.queries
    return v


def _post_has_existential(post: Formula) -> bool:
    return any(isinstance(c, FQuant) and c.kind == "exists" for c in conjuncts(post))


def _pre_param_floor(pre: Formula, param: str) -> int:
    """Largest c such that the pre-condition forces param > c."""
    floor = 0
    for c in conjuncts(pre):
        if not isinstance(c, FCmp):
            continue
        left, right, op = c.left, c.right, c.op
        if isinstance(right, Var) and right.name == param:
            left, right = right, left
            op = {"<": ">", "<=": ">=", ">": "<", ">=": "<="}.get(op, op)
        if isinstance(left, Var) and left.name == param and isinstance(right, Const):
            if op == ">":
                floor = max(floor, right.value)
            elif op == ">=":
                floor = max(floor, right.value - 1)
    return floor


class _Engine:
    def __init__(self, cfg: Config, session: SolverSession, budget: _Budget):
        self.cfg = cfg
        self.session = session
        self.budget = budget

    # -- helpers ---------------------------------------------------------

    def _symbols(self, program: Program, extra: list[Formula] = ()) -> SymbolTable:
        scalars = set(program.scalars) | {program.param}
        arrays = dict(program.arrays)
        for f in extra:
            scalars |= formula_scalars(f)
            for a in formula_arrays(f):
                arrays.setdefault(a, 1)
        return SymbolTable(scalars, arrays)

    def check_fixed_n(self, pre: Formula, program: Program, post: Formula, n: int) -> SolverVerdict:
        """Fully unrolled check of {pre} program {post} at a concrete size."""
        try:
            straight = unroll(program, n, self.cfg.unroll_budget)
        except UnrollBudgetExceeded as e:
            return SolverVerdict("unknown", reason=str(e))
        pre_n = expand_quantifiers(subst_scalar(pre, program.param, Const(n)), {})
        post_n = expand_quantifiers(subst_scalar(post, program.param, Const(n)), {})
        w = wp(post_n, straight, ite_budget=4096)
        if w is None:
            return SolverVerdict("unknown", reason="wp blowup at fixed size")
        r = check_valid(
            [pre_n, FCmp("==", Var(program.param), Const(n))],
            w,
            self._symbols(program, [pre, post]),
            self.session,
            self.budget.vc_ms(),
            program.param,
            n_floor=n,
            param_cap=n,
        )
        return r.verdict

    def _model_env(self, program: Program, model: dict) -> Env:
        env = Env(n=model["n"])
        for s in program.scalars:
            env.scalars[s] = model.get("scalars", {}).get(s, 0)
        for a, rank in program.arrays.items():
            got = model.get("arrays", {}).get(a)
            if got is None:
                got = [[0] * env.n for _ in range(env.n)] if rank == 2 else [0] * env.n
            env.arrays[a] = got
        return env

    def _replay(self, program: Program, spec: Spec, model: dict) -> Optional[Env]:
        """Confirm a countermodel by concrete execution; None if it does not replay."""
        try:
            env = self._model_env(program, model)
            if not satisfies(spec.pre, env, program.param):
                return None
            out = execute(program, env)
            if satisfies(spec.post, out, program.param):
                return None
            return env
        except Exception:
            return None

    def falsification_sweep(self, program: Program, spec: Spec, start: int = 1) -> Optional[Verdict]:
        for n in range(start, self.cfg.base_bound + 1):
            if self.budget.expired():
                return None
            r = self.check_fixed_n(spec.pre, program, spec.post, n)
            if r.status == "invalid" and r.model:
                env = self._replay(program, spec, r.model)
                if env is not None:
                    return Verdict("falsified", reason=f"fails at {program.param}={n}",
                                   witness_n=n, witness=env)
        return None

    # -- the main algorithm ----------------------------------------------

    def verify(self, program: Program, spec: Spec, depth: int) -> Verdict:
        diags: dict = {}
        param = program.param
        m_width = max(self.cfg.base_width, _pre_param_floor(spec.pre, param) + 1)
        diags["base_width"] = m_width

        # base case(s)
        base_results = []
        for n in range(1, m_width + 1):
            r = self.check_fixed_n(spec.pre, program, spec.post, n)
            base_results.append({"n": n, "status": r.status})
            if r.status == "invalid" and r.model:
                env = self._replay(program, spec, r.model)
                if env is not None:
                    return Verdict("falsified", reason=f"base case fails at {param}={n}",
                                   witness_n=n, witness=env,
                                   diagnostics={"base_cases": base_results})
                return Verdict("unknown", reason="countermodel did not replay",
                               diagnostics={"base_cases": base_results})
            if r.status == "unknown":
                sweep = self.falsification_sweep(program, spec)
                if sweep:
                    return sweep
                return Verdict("unknown", reason=f"base case undecided at {param}={n}",
                               diagnostics={"base_cases": base_results})
        diags["base_cases"] = base_results

        if is_loop_free(program.body):
            w = wp(spec.post, program.body)
            if w is None:
                return self._degrade(program, spec, "wp blowup on a loop-free program", diags)
            r = check_valid(
                [spec.pre],
                w,
                self._symbols(program, [spec.pre, spec.post]),
                self.session,
                self.budget.vc_ms(),
                param,
                n_floor=1,
            )
            if r.verdict.is_valid:
                diags["final_triple"] = {"status": "valid", "note": "loop-free program"}
                return Verdict("verified", diagnostics=diags, recursion_depth=depth)
            return self._degrade(program, spec, "loop-free check failed", diags)

        # transformation
        try:
            qp = gen_q_and_peel(program)
        except (PeelSubstitutionBlocked, UnsupportedIndexing) as e:
            return self._degrade(program, spec, f"peel blocked: {e}", diags)
        from .lang import program_str

        diags["nesting_depth"] = nesting_depth(program)
        diags["peel_depth"] = nesting_depth(qp.peel)
        diags["peel_loop_free"] = is_loop_free(qp.peel.body)
        diags["substitutions"] = list(qp.substitutions)

        # pre-condition split, guarded by the untouched-boundary requirement
        phi_prime, delta_phi = formula_diff(spec.pre, param)
        if not self._delta_untouched(delta_phi, qp):
            phi_prime, delta_phi = spec.pre, TRUEF
        diags["phi_prime"] = formula_str(phi_prime)
        diags["delta_phi"] = formula_str(delta_phi)

        # difference invariants between Q_{N-1} and P_{N-1}
        p_prev = program_at_prev(program)
        phi_prev = simplify_formula(shift_param(spec.pre, param, -1))
        settings = InferSettings(
            self.session,
            timeout_ms=self.budget.vc_ms(),
            param=param,
            n_floor=max(2, m_width + 1),
            seed=self.cfg.seed,
        )
        try:
            analysis = infer_diff_invariants(qp.q, p_prev, phi_prime, phi_prev, settings)
        except StructureMismatch as e:
            return self._degrade(program, spec, f"product construction: {e}", diags)
        diags["invariants"] = {
            "/".join(map(str, pt)): [f.describe() for f in fs] for pt, fs in analysis.facts.items()
        }
        diags["diffinv_vcs"] = analysis.vc_count

        # psi'(N-1) by quantifier elimination over the substituted copy
        psi_prev = simplify_formula(shift_param(spec.post, param, -1))
        psi_prime, qe_complete = self._qe_against_p(psi_prev, analysis, program)
        diags["psi_prime"] = formula_str(psi_prime)
        diags["psi_prime_complete"] = qe_complete

        step_pre = fand([psi_prime, delta_phi])
        return self._inductive_phase(
            program, spec, qp, analysis, step_pre, psi_prime, delta_phi, m_width, depth, diags
        )

    def _degrade(self, program: Program, spec: Spec, reason: str, diags: dict) -> Verdict:
        sweep = self.falsification_sweep(program, spec)
        if sweep:
            sweep.diagnostics.update(diags)
            return sweep
        return Verdict("unknown", reason=reason, diagnostics=diags)

    def _delta_untouched(self, delta_phi: Formula, qp: QAndPeel) -> bool:
        """Every location the split boundary mentions must be unwritten by Q."""
        if delta_phi == TRUEF:
            return True
        q = qp.q
        ranges = _all_counter_ranges(q, truncated=False)
        cells: list[tuple[str, tuple[Expr, ...]]] = []
        for arr in formula_arrays(delta_phi):
            for c in conjuncts(delta_phi):
                for rd in _formula_reads(c, arr):
                    cells.append((arr, rd))
        scalars = formula_scalars(delta_phi) - {q.param}
        from .lang import Assign, written_scalars

        if scalars & written_scalars(q.body):
            return False
        for s in walk_stmts(q.body):
            if isinstance(s, ArrayAssign):
                for arr, idx in cells:
                    if s.array == arr:
                        if _compare_indices(tuple(idx), s.index, ranges, q.param) != "disjoint":
                            return False
        return True

    def _qe_against_p(self, psi_prev: Formula, analysis: DiffAnalysis, program: Program):
        """psi'(N-1): eliminate the substituted copy's symbols from
        psi(N-1) /\\ D, then restate over plain program names."""
        scalars = {s for s in program.scalars if s not in program.counters}
        arrays = set(program.arrays)
        tagged = tag_formula(psi_prev, P, scalars, arrays)

        slinks, alinks, q_facts = _links_from_exit_facts(analysis, eliminate=P)
        elim_scalars = {tag(s, P) for s in scalars}
        elim_arrays = {tag(a, P) for a in arrays}
        combined = fand([tagged] + [f.formula() for f in q_facts])
        out, complete = qe_by_substitution(
            combined, elim_scalars, elim_arrays, slinks, alinks, program.param
        )
        plain = _untag_formula(out)
        return simplify_formula(plain), complete

    def _inductive_phase(
        self,
        program: Program,
        spec: Spec,
        qp: QAndPeel,
        analysis: DiffAnalysis,
        step_pre: Formula,
        psi_prime: Formula,
        delta_phi: Formula,
        m_width: int,
        depth: int,
        diags: dict,
    ) -> Verdict:
        param = program.param
        peel = qp.peel
        peel_loop_free = is_loop_free(peel.body)
        n_floor = m_width + 1
        syms = self._symbols(program, [spec.pre, spec.post, step_pre])

        if peel_loop_free:
            w = wp(spec.post, peel.body)
            if w is not None:
                r = check_valid([step_pre], w, syms, self.session, self.budget.vc_ms(), param, n_floor)
                if r.verdict.is_valid:
                    diags["final_triple"] = {
                        "pre": formula_str(step_pre),
                        "post": formula_str(spec.post),
                        "status": "valid",
                    }
                    return Verdict("verified", iterations=0, recursion_depth=depth,
                                   diagnostics=diags, analysis=analysis)
        return self._strengthen(
            program, spec, qp, analysis, psi_prime, delta_phi, m_width, depth, diags
        )

    def _strengthen(
        self,
        program: Program,
        spec: Spec,
        qp: QAndPeel,
        analysis: DiffAnalysis,
        psi_prime: Formula,
        delta_phi: Formula,
        m_width: int,
        depth: int,
        diags: dict,
    ) -> Verdict:
        param = program.param
        peel = qp.peel
        n_floor = m_width + 1
        chi = spec.post
        xi: Formula = TRUEF
        xi_prime: Formula = TRUEF
        records: list[StrengthenRecord] = []
        rechecks: list[dict] = []
        syms = self._symbols(program, [spec.pre, spec.post, psi_prime])

        for iteration in range(1, self.cfg.strengthen_cap + 1):
            if self.budget.expired():
                return self._finish_unknown(program, spec, "timeout", diags, records)
            try:
                w = wp(chi, peel.body)
            except LoopInCode:
                w = None
            if w is None:
                if not is_loop_free(peel.body):
                    return self._recurse(program, spec, qp, psi_prime, delta_phi,
                                         xi, xi_prime, m_width, depth, diags, records)
                return self._finish_unknown(program, spec, "wp failed on the peel", diags, records)

            # keep only what the current pre-condition does not already give
            context = [xi_prime, delta_phi, psi_prime]
            new_conjs = [
                c for c in conjuncts(simplify_formula(w))
                if not implies(context, c, syms, self.session, self.budget.vc_ms(), param, n_floor)
            ]
            if not new_conjs:
                # the step should already hold; re-check it outright
                verdict = self._final_step(program, spec, peel, xi, xi_prime, psi_prime,
                                           delta_phi, n_floor, diags, records, rechecks,
                                           iteration - 1, depth, analysis)
                if verdict is not None:
                    return verdict
                return self._finish_unknown(program, spec, "inductive step undecided", diags, records)

            chi_prime_parts: list[Formula] = []
            chi_prev_parts: list[Formula] = []
            for c in new_conjs:
                prev = self._qe_against_q(c, analysis, program)
                if prev is None:
                    continue
                chi_prime_parts.append(c)
                chi_prev_parts.append(prev)
            if not chi_prime_parts:
                return self._finish_unknown(
                    program, spec, "strengthening not expressible over the previous instance",
                    diags, records)

            wp_pre = fand(chi_prime_parts)
            chi_prev = simplify_formula(fand(chi_prev_parts))
            chi = simplify_formula(shift_param(chi_prev, param, +1))
            records.append(StrengthenRecord(iteration, wp_pre, chi_prev, chi))

            xi = simplify_formula(fand([xi, chi]))
            xi_prime = simplify_formula(fand([xi_prime, wp_pre]))

            # strengthened post must still pass the base case
            ok = True
            for n in range(1, m_width + 1):
                r = self.check_fixed_n(spec.pre, program, xi, n)
                rechecks.append({"n": n, "post": formula_str(xi), "status": r.status})
                if r.status != "valid":
                    ok = False
                    break
            if not ok:
                return self._finish_unknown(program, spec, "strengthened post fails the base case",
                                            diags, records)

            verdict = self._final_step(program, spec, peel, xi, xi_prime, psi_prime, delta_phi,
                                       n_floor, diags, records, rechecks, iteration, depth, analysis)
            if verdict is not None:
                return verdict
        return self._finish_unknown(program, spec, "strengthening cap reached", diags, records)

    def _final_step(self, program, spec, peel, xi, xi_prime, psi_prime, delta_phi,
                    n_floor, diags, records, rechecks, iteration, depth, analysis) -> Optional[Verdict]:
        param = program.param
        pre = fand([xi_prime, delta_phi, psi_prime])
        post = fand([xi, spec.post])
        w = wp(post, peel.body)
        if w is None:
            return None
        syms = self._symbols(program, [pre, post])
        r = check_valid([pre], w, syms, self.session, self.budget.vc_ms(), param, n_floor)
        if r.verdict.is_valid:
            diags["final_triple"] = {
                "pre": formula_str(pre),
                "post": formula_str(post),
                "status": "valid",
            }
            diags["base_rechecks"] = rechecks
            diags["strengthening"] = [rec.as_dict() for rec in records]
            return Verdict("verified", iterations=iteration, recursion_depth=depth,
                           diagnostics=diags, analysis=analysis, strengthening=records)
        return None

    def _recurse(self, program, spec, qp, psi_prime, delta_phi, xi, xi_prime,
                 m_width, depth, diags, records) -> Verdict:
        cap = self.cfg.recursion_cap
        if cap is None:
            cap = max(1, nesting_depth(program))
        if depth + 1 > cap:
            return self._finish_unknown(program, spec, "recursion depth cap", diags, records)
        pre_r = simplify_formula(fand([xi_prime, delta_phi, psi_prime]))
        post_r = simplify_formula(fand([xi, spec.post]))
        inner = self.verify(qp.peel, Spec(pre_r, post_r), depth + 1)
        diags["recursion"] = {
            "pre": formula_str(pre_r),
            "post": formula_str(post_r),
            "status": inner.status,
            "reason": inner.reason,
            "diagnostics": inner.diagnostics,
        }
        diags["strengthening"] = [rec.as_dict() for rec in records]
        if inner.status == "verified":
            return Verdict("verified", iterations=inner.iterations,
                           recursion_depth=max(depth + 1, inner.recursion_depth),
                           diagnostics=diags, analysis=inner.analysis,
                           strengthening=records + inner.strengthening)
        # a refutation of the recursive triple does not refute the original
        return self._finish_unknown(program, spec, f"recursion: {inner.reason or inner.status}",
                                    diags, records)

    def _finish_unknown(self, program, spec, reason, diags, records) -> Verdict:
        diags["strengthening"] = [rec.as_dict() for rec in records]
        sweep = self.falsification_sweep(program, spec)
        if sweep:
            sweep.diagnostics.update(diags)
            return sweep
        return Verdict("unknown", reason=reason, diagnostics=diags)

    def _qe_against_q(self, c: Formula, analysis: DiffAnalysis, program: Program) -> Optional[Formula]:
        """chi(N-1) from a peel pre-condition conjunct: rewrite the truncated
        copy's symbols through the exit difference facts, landing on plain
        names for the previous instance."""
        scalars = {s for s in program.scalars if s not in program.counters}
        arrays = set(program.arrays)
        tagged = tag_formula(c, Q, scalars, arrays)
        slinks, alinks, p_facts = _links_from_exit_facts(analysis, eliminate=Q)
        out, complete = qe_by_substitution(
            fand([tagged]),
            {tag(s, Q) for s in scalars},
            {tag(a, Q) for a in arrays},
            slinks,
            alinks,
            program.param,
        )
        if not complete:
            return None
        return simplify_formula(_untag_formula(out))

    # -- existential post-conditions --------------------------------------

    def verify_existential(self, program: Program, spec: Spec) -> Verdict:
        param = program.param
        m_width = max(self.cfg.base_width, _pre_param_floor(spec.pre, param) + 1)
        base_results = []
        for n in range(1, m_width + 1):
            r = self.check_fixed_n(spec.pre, program, spec.post, n)
            base_results.append({"n": n, "status": r.status})
            if r.status == "invalid" and r.model:
                env = self._replay(program, spec, r.model)
                if env is not None:
                    return Verdict("falsified", reason=f"base case fails at {param}={n}",
                                   witness_n=n, witness=env,
                                   diagnostics={"base_cases": base_results})
            if r.status != "valid":
                return self._degrade(program, spec, "existential base case undecided",
                                     {"base_cases": base_results})

        diags: dict = {"base_cases": base_results, "existential": []}
        strategies: list[dict] = diags["existential"]
        for conj in conjuncts(spec.post):
            verdict = self._verify_one_post(program, spec.pre, conj, m_width, strategies)
            if verdict != "verified":
                return self._degrade(program, spec, f"existential conjunct undecided", diags)
        return Verdict("verified", diagnostics=diags)

    def _verify_one_post(self, program: Program, pre: Formula, conj: Formula,
                         m_width: int, log: list[dict]) -> str:
        if not (isinstance(conj, FQuant) and conj.kind == "exists"):
            v = self.verify(program, Spec(pre, conj), depth=0)
            log.append({"conjunct": formula_str(conj), "strategy": "universal", "status": v.status})
            return v.status

        param = program.param
        n_var = Var(param)
        witnesses = [Const(0), BinOp("-", n_var, Const(1))]
        if m_width >= 2:
            witnesses.append(BinOp("-", n_var, Const(2)))
        for wexpr in witnesses:
            inst = simplify_formula(subst_scalar(conj.body, conj.var, wexpr))
            guard_ok = self._witness_in_range(conj, wexpr, pre, program)
            if not guard_ok:
                continue
            v = self.verify(program, Spec(pre, inst), depth=0)
            if v.status == "verified":
                log.append({
                    "conjunct": formula_str(conj),
                    "strategy": "witness",
                    "witness": formula_str(FCmp("==", Var(conj.var), wexpr)),
                    "status": "verified",
                })
                return "verified"
        status = self._witness_preservation(program, pre, conj, m_width)
        log.append({"conjunct": formula_str(conj), "strategy": "preservation", "status": status})
        return status

    def _witness_in_range(self, conj: FQuant, wexpr: Expr, pre: Formula, program: Program) -> bool:
        lo_ok = FCmp("<=", conj.lo, wexpr)
        hi_ok = FCmp("<", wexpr, conj.hi)
        syms = self._symbols(program, [pre])
        return implies([pre], fand([lo_ok, hi_ok]), syms, self.session,
                       self.budget.vc_ms(), program.param,
                       n_floor=max(1, _pre_param_floor(pre, program.param) + 1))

    def _witness_preservation(self, program: Program, pre: Formula, conj: FQuant,
                              m_width: int) -> str:
        """Inductive step: an old witness survives the peel or the peel
        establishes the property at the new boundary index."""
        param = program.param
        try:
            qp = gen_q_and_peel(program)
        except (PeelSubstitutionBlocked, UnsupportedIndexing):
            return "unknown"
        if not is_loop_free(qp.peel.body):
            return "unknown"
        phi_prime, delta_phi = formula_diff(pre, param)
        if not self._delta_untouched(delta_phi, qp):
            phi_prime, delta_phi = pre, TRUEF
        p_prev = program_at_prev(program)
        phi_prev = simplify_formula(shift_param(pre, param, -1))
        settings = InferSettings(self.session, timeout_ms=self.budget.vc_ms(), param=param,
                                 n_floor=max(2, m_width + 1), seed=self.cfg.seed)
        try:
            analysis = infer_diff_invariants(qp.q, p_prev, phi_prime, phi_prev, settings)
        except StructureMismatch:
            return "unknown"
        psi_prev = simplify_formula(shift_param(conj, param, -1))
        psi_prime, _ = self._qe_against_p(psi_prev, analysis, program)

        # skolemize the surviving witness, then prove the peel re-establishes
        # the property at it or at a boundary index
        wvar = f"{conj.var}0"
        skolem_parts: list[Formula] = []
        rest: list[Formula] = []
        for c in conjuncts(psi_prime):
            if isinstance(c, FQuant) and c.kind == "exists":
                skolem_parts.append(FCmp("<=", c.lo, Var(wvar)))
                skolem_parts.append(FCmp("<", Var(wvar), c.hi))
                skolem_parts.append(subst_scalar(c.body, c.var, Var(wvar)))
            else:
                rest.append(c)
        if not skolem_parts:
            return "unknown"
        pre_step = fand(skolem_parts + rest + [delta_phi])
        candidates = [Var(wvar), BinOp("-", Var(param), Const(1))]
        goals = []
        for t in candidates:
            inrange = fand([FCmp("<=", conj.lo, t), FCmp("<", t, conj.hi)])
            goals.append(fand([inrange, subst_scalar(conj.body, conj.var, t)]))
        from .formula import for_

        w = wp(for_(goals), qp.peel.body)
        if w is None:
            return "unknown"
        syms = self._symbols(program, [pre_step, w])
        syms.scalars.add(wvar)
        r = check_valid([pre_step], w, syms, self.session, self.budget.vc_ms(),
                        param, n_floor=m_width + 1)
        return "verified" if r.verdict.is_valid else "unknown"


def _formula_reads(f: Formula, array: str) -> list[tuple[Expr, ...]]:
    out: list[tuple[Expr, ...]] = []

    def fn(e: Expr):
        if isinstance(e, ArrayRead) and e.array == array:
            out.append(e.index)
        return None

    map_formula(f, fn)
    return out


def _untag_formula(f: Formula) -> Formula:
    def fn(e: Expr):
        if isinstance(e, Var) and "$" in e.name:
            return Var(untag(e.name))
        if isinstance(e, ArrayRead) and "$" in e.array:
            return ArrayRead(untag(e.array), e.index)
        return None

    return map_formula(f, fn)


def _links_from_exit_facts(analysis: DiffAnalysis, eliminate: str):
    """Substitution links that rewrite one copy's exit symbols through the
    verified exit difference facts; also returns the facts usable as plain
    conjuncts (absolute facts about the surviving copy)."""
    slinks: list[ScalarLink] = []
    alinks: list[ArrayLink] = []
    keep_side = Q if eliminate == P else P
    extra: list[Fact] = []
    for f in analysis.exit_facts():
        if f.den != 1:
            if (eliminate == P and f.kind in ("sabs_q", "cabs_q", "aabs_q")) or (
                eliminate == Q and f.kind in ("sabs_p", "cabs_p", "aabs_p")
            ):
                extra.append(f)
            continue
        if f.kind == "sdelta":
            q_sym, p_sym = tag(f.name, Q), tag(f.name, P)
            if eliminate == P:
                slinks.append(ScalarLink(p_sym, simplify_expr(BinOp("-", Var(q_sym), f.num))))
            else:
                slinks.append(ScalarLink(q_sym, simplify_expr(BinOp("+", Var(p_sym), f.num))))
        elif f.kind == "adelta" and f.guard is None and f.dims:
            dims = list(f.dims)
            if any(slot is not None for slot in (f.fixed or ())) and len(dims) != len(f.fixed or ()):
                continue
            if f.fixed and any(s is not None for s in f.fixed):
                continue  # slice facts are not substitution links
            q_sym, p_sym = tag(f.name, Q), tag(f.name, P)
            num, dvars = f.num, [v for v, _ in dims]

            def mk_fn(num=num, dvars=dvars, q_sym=q_sym, p_sym=p_sym):
                def repl(index: tuple[Expr, ...]) -> Expr:
                    delta = num
                    for dv, ix in zip(dvars, index):
                        delta = simplify_expr(_subst_expr(delta, dv, ix))
                    if eliminate == P:
                        return BinOp("-", ArrayRead(q_sym, index), delta)
                    return BinOp("+", ArrayRead(p_sym, index), delta)

                return repl

            hi = dims[0][1]
            alinks.append(ArrayLink(tag(f.name, eliminate), mk_fn(), hi))
        elif f.kind == f"sabs_{eliminate}":
            slinks.append(ScalarLink(tag(f.name, eliminate), f.num))
        elif f.kind in (f"sabs_{keep_side}", f"cabs_{keep_side}", f"aabs_{keep_side}"):
            extra.append(f)
    return slinks, alinks, extra


def _subst_expr(e: Expr, name: str, repl: Expr) -> Expr:
    from .lang import map_expr

    def fn(x: Expr):
        if isinstance(x, Var) and x.name == name:
            return repl
        return None

    return map_expr(e, fn)
