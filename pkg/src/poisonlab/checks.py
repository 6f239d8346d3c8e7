"""Invariant and oracle verification suite behind the ``verify`` command.

Every check is a small self-contained experiment that re-derives an
expected value through an independent path (dense linear algebra, finite
differences, exhaustive enumeration, exact value iteration) and compares
the production code against it. :func:`run_verify` executes all checks and
returns a pass/fail manifest suitable for JSON serialization.
"""

from __future__ import annotations

import dataclasses
import time
import warnings

import numpy as np

from .bilevel import (
    BilevelProblem,
    HypergradConfig,
    StaleThetaError,
    cg_solve,
    finite_diff_hypergradient,
    hypergrad_attack,
    implicit_hypergradient,
)
from .diffnum import OptimizerConfig, finite_diff_grad, train_inner
from .memory import (
    CovertnessBudget,
    Document,
    Edit,
    MemoryStore,
    Perturbation,
    apply,
    perturbation_norms,
    poison_rate,
    project,
    semantic_distances,
)


@dataclasses.dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    duration_s: float

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _rel_err(got: np.ndarray, want: np.ndarray, abs_floor: float = 1e-6) -> float:
    got, want = np.asarray(got, float), np.asarray(want, float)
    scale = np.maximum(np.abs(want), abs_floor)
    return float(np.max(np.abs(got - want) / scale)) if got.size else 0.0


# ---------------------------------------------------------------------------
# shipped-loss zoo (small instances of every DiffLoss in the package)
# ---------------------------------------------------------------------------


def _micro_env():
    from .marl import GridEnv

    return GridEnv(width=3, height=3, n_agents=1, horizon=6, goal_cells=((0, 0),),
                   gamma=0.9)


def _micro_marl_losses(rng):
    from .marl import (
        TDLoss,
        TargetPolicy,
        TargetPolicyLoss,
        collect_dataset,
    )

    env = _micro_env()
    store = collect_dataset(env, 20, seed=3)
    td = TDLoss(store, env)
    target = TargetPolicy.from_rule(env, rule="freeze")
    states = tuple((c,) for c in range(env.n_cells))
    policy_loss = TargetPolicyLoss(env, target, key_states=states, margin=0.1)
    theta = 0.1 * rng.normal(size=env.n_agents * 5 * env.n_cells)
    from .memory import full_edit_template

    template = full_edit_template(store, field="reward")
    probe = template.with_free_vector(0.03 * rng.normal(size=20))
    return [("td_loss", td, theta, probe), ("target_policy_loss", policy_loss, theta, None)]


def _tiny_rag_losses(rng):
    from .rag import (
        AnchorLoss,
        CorpusSpec,
        GenerationLoss,
        TargetResponseLoss,
        default_rag_params,
        injection_template,
        make_corpus,
    )

    spec = CorpusSpec(
        n_docs=60, n_clusters=4, dim=8, value_dim=6, v_r=4, n_queries=20,
        n_triggers=6, vocab_size=32, doc_len=10,
    )
    bundle = make_corpus(spec, seed=5)
    params = default_rag_params(spec, hidden=6, seed=5)
    theta = params.generator
    gen = GenerationLoss(bundle.kb, bundle.queries, params, 0.1)
    tgt = TargetResponseLoss(bundle.kb, bundle.triggers, params, 0.1)
    anchor = AnchorLoss(theta + 0.5)
    probe = injection_template(bundle, 2, value_scale=1.0)
    jitter = probe.free_vector() + 0.05 * rng.normal(size=probe.free_vector().size)
    probe = probe.with_free_vector(jitter)
    return [
        ("generation_loss", gen, theta, probe),
        ("target_response_loss", tgt, theta, probe),
        ("anchor_loss", anchor, theta, None),
    ], bundle, params


def _quadratic_losses(rng):
    from .testbed import QuadraticLowerLoss, QuadraticUpperLoss

    n = 4
    g = rng.normal(size=(n, n))
    a = g @ g.T + n * np.eye(n)
    b = rng.normal(size=n)
    c = rng.normal(size=(n, n))
    t = rng.normal(size=n)
    lower = QuadraticLowerLoss(a, b, c)
    upper = QuadraticUpperLoss(t)
    theta = rng.normal(size=n)
    edits = tuple(Edit(i, "reward", [0.1 * rng.normal()]) for i in range(n))
    probe = Perturbation(mode="modify", edits=edits)
    return [
        ("quadratic_lower_loss", lower, theta, probe),
        ("quadratic_upper_loss", upper, theta, probe),
    ]


def _loss_zoo(rng):
    zoo = []
    zoo += _quadratic_losses(rng)
    zoo += _micro_marl_losses(rng)
    rag_losses, _, _ = _tiny_rag_losses(rng)
    zoo += rag_losses
    return zoo


# ---------------------------------------------------------------------------
# individual checks
# ---------------------------------------------------------------------------


def check_cg_vs_dense(rng) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(5):
        g = rng.normal(size=(5, 5))
        h = g @ g.T + 5 * np.eye(5)
        b = rng.normal(size=5)
        x = cg_solve(lambda v: h @ v, b, tol=1e-14, max_iter=200, damping=0.0).x
        worst = max(worst, float(np.linalg.norm(x - np.linalg.solve(h, b))))
    return worst <= 1e-8, f"max |cg - dense| = {worst:.3e} (tol 1e-8)"


def check_gradients(rng) -> tuple[bool, str]:
    failures = []
    for name, loss, theta, probe in _loss_zoo(rng):
        err = _rel_err(
            loss.grad_theta(theta, probe),
            finite_diff_grad(lambda x: loss.value(x, probe), theta, 1e-5),
        )
        if err > 1e-4:
            failures.append(f"{name}: grad_theta rel err {err:.2e}")
        if probe is None:
            continue
        try:
            got = loss.grad_delta(theta, probe)
        except NotImplementedError:
            continue
        base = probe.free_vector()
        want = finite_diff_grad(
            lambda v: loss.value(theta, probe.with_free_vector(v)), base, 1e-5
        )
        err = _rel_err(got, want)
        if err > 1e-4:
            failures.append(f"{name}: grad_delta rel err {err:.2e}")
    return not failures, "; ".join(failures) or "all shipped losses match finite differences (rel tol 1e-4)"


def check_hvp_symmetry(rng) -> tuple[bool, str]:
    failures = []
    for name, loss, theta, probe in _loss_zoo(rng):
        try:
            u = rng.normal(size=theta.size)
            v = rng.normal(size=theta.size)
            uhv = float(u @ loss.hvp_theta(theta, probe, v))
            vhu = float(v @ loss.hvp_theta(theta, probe, u))
        except NotImplementedError:
            continue
        scale = max(abs(uhv), abs(vhu), 1e-6)
        if abs(uhv - vhu) / scale > 1e-6:
            failures.append(f"{name}: |u'Hv - v'Hu| rel {abs(uhv - vhu) / scale:.2e}")
    return not failures, "; ".join(failures) or "u'Hv = v'Hu on every loss (rel tol 1e-6)"


def check_hvp_vs_fd(rng) -> tuple[bool, str]:
    failures = []
    h = 1e-5
    for name, loss, theta, probe in _loss_zoo(rng):
        try:
            v = rng.normal(size=theta.size)
            got = loss.hvp_theta(theta, probe, v)
        except NotImplementedError:
            continue
        want = (
            loss.grad_theta(theta + h * v, probe) - loss.grad_theta(theta - h * v, probe)
        ) / (2 * h)
        err = _rel_err(got, want, abs_floor=1e-3)
        if err > 1e-3:
            failures.append(f"{name}: hvp vs fd rel err {err:.2e}")
    return not failures, "; ".join(failures) or "hvp matches finite differences of the gradient (rel tol 1e-3)"


def check_retrieval_simplex(rng) -> tuple[bool, str]:
    from .rag import soft_retrieve

    _, bundle, params = _tiny_rag_losses(rng)
    for q in bundle.queries[:8] + bundle.triggers[:4]:
        for temp in (1.0, 0.1, 0.01):
            res = soft_retrieve(bundle.kb, params, q, temp, 4)
            w = np.asarray(res.weights)
            if w.min() < 0 or abs(w.sum() - 1.0) > 1e-9:
                return False, f"weights violate simplex at temp {temp}"
            data = bundle.kb.data
            scores = data.embeddings @ (params.projection @ q.embedding) / np.linalg.norm(
                params.projection @ q.embedding
            )
            order = sorted(range(len(data)), key=lambda i: (-scores[i], data.doc_ids[i]))
            if tuple(data.doc_ids[i] for i in order[: len(res.hard_topk)]) != res.hard_topk:
                return False, "hard_topk does not match score ranking with doc_id ties"
    return True, "weights on the simplex; hard top-k matches exhaustive ranking"


def check_soft_hard_convergence(rng) -> tuple[bool, str]:
    from .memory import KnowledgeData
    from .rag import Query, RagParams, generator_size, soft_retrieve

    dim, d_v, m = 8, 6, 50
    emb = rng.normal(size=(m, dim))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    data = KnowledgeData(
        doc_ids=np.arange(m), embeddings=emb, values=rng.normal(size=(m, d_v)),
        token_ids=tuple(tuple(int(x) for x in rng.integers(0, 16, size=6)) for _ in range(m)),
        topics=np.zeros(m, dtype=np.int64),
    )
    kb = MemoryStore(kind="kb", data=data)
    params = RagParams(np.eye(dim), np.zeros(generator_size(dim, d_v, 4, 4)), dim, d_v, 4, 4)
    worst_final = 0.0
    for probe in range(10):
        target = int(rng.integers(0, m))
        q_emb = emb[target] + 0.1 * rng.normal(size=dim)
        q = Query(probe, q_emb / np.linalg.norm(q_emb), False, 0)
        gaps = []
        for temp in (1.0, 0.1, 0.01):
            res = soft_retrieve(kb, params, q, temp, 1)
            top1 = data.values[res.hard_topk[0]]
            gaps.append(float(np.linalg.norm(res.soft_context - top1)))
        if not (gaps[0] >= gaps[1] - 1e-12 and gaps[1] >= gaps[2] - 1e-12):
            return False, f"gap not monotone in temperature: {gaps}"
        worst_final = max(worst_final, gaps[2])
    return worst_final <= 1e-3, (
        f"soft context converges to hard top-1 (worst gap at temp 0.01: {worst_final:.2e})"
    )


def _random_modify_delta(store, rng, scale=0.2):
    idx = rng.choice(store.element_count, size=30, replace=False)
    edits = tuple(Edit(int(i), "reward", scale * rng.normal(size=1)) for i in sorted(idx))
    return Perturbation(mode="modify", edits=edits)


def check_projection_idempotence(rng) -> tuple[bool, str]:
    from .marl import collect_dataset

    store = collect_dataset(_micro_env(), 1000, seed=1)
    budget = CovertnessBudget(rho_max=0.01, linf_max=0.05, l2_max=0.1)
    delta = _random_modify_delta(store, rng)
    once = project(delta, budget, memory=store)
    twice = project(once, budget, memory=store)
    if perturbation_norms(once) != perturbation_norms(twice) or once.n_edits != twice.n_edits:
        return False, "modify projection is not idempotent"
    for a, b in zip(once.edits, twice.edits):
        if a.record_index != b.record_index or not np.array_equal(a.delta_values, b.delta_values):
            return False, "modify projection is not idempotent"

    _, bundle, _ = _tiny_rag_losses(rng)
    kb = bundle.kb
    rows = rng.choice(kb.element_count, size=3, replace=False)
    docs = tuple(
        Document(-1, kb.data.embeddings[r] + 0.01 * rng.normal(size=kb.data.embeddings.shape[1]),
                 kb.data.values[r], kb.data.token_ids[r], int(kb.data.topics[r]))
        for r in rows
    )
    dinj = Perturbation(mode="inject", injections=docs)
    binj = CovertnessBudget(rho_max=0.05, dsem_max=0.15)
    once = project(dinj, binj, memory=kb)
    twice = project(once, binj, memory=kb)
    same = once.n_injections == twice.n_injections and all(
        np.array_equal(a.embedding, b.embedding) and np.array_equal(a.value_vector, b.value_vector)
        for a, b in zip(once.injections, twice.injections)
    )
    return same, "project(project(d)) = project(d) in both modes" if same else "inject projection is not idempotent"


def check_budget_feasibility(rng) -> tuple[bool, str]:
    from .marl import collect_dataset

    store = collect_dataset(_micro_env(), 1000, seed=2)
    budget = CovertnessBudget(rho_max=0.01, linf_max=0.05, l2_max=0.1)
    for scale in (0.01, 0.2, 3.0):
        delta = project(_random_modify_delta(store, rng, scale), budget, memory=store)
        linf, l2 = perturbation_norms(delta)
        if poison_rate(store, delta) > budget.rho_max + 1e-15:
            return False, "rho cap violated after projection"
        if linf > budget.linf_max + 1e-15 or l2 > budget.l2_max + 1e-12:
            return False, f"norm caps violated after projection (linf {linf}, l2 {l2})"
    _, bundle, _ = _tiny_rag_losses(rng)
    kb = bundle.kb
    emb = kb.data.embeddings[0] + 0.8 * rng.normal(size=kb.data.embeddings.shape[1])
    doc = Document(-1, emb, kb.data.values[0], kb.data.token_ids[0], int(kb.data.topics[0]))
    binj = CovertnessBudget(rho_max=0.05, dsem_max=0.15)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        proj = project(Perturbation(mode="inject", injections=(doc,)), binj, memory=kb)
    if proj.n_injections:
        dmax = float(semantic_distances(kb, proj).max())
        if dmax > binj.dsem_max + 1e-12:
            return False, f"dsem cap violated after projection ({dmax})"
    return True, "poison rate and norm caps hold exactly after projection"


def check_apply_undo(rng) -> tuple[bool, str]:
    from .marl import collect_dataset

    store = collect_dataset(_micro_env(), 200, seed=4)
    noop = apply(store, Perturbation.empty("modify"))
    if not np.array_equal(noop.replay.rewards, store.replay.rewards):
        return False, "empty perturbation changed the store"
    delta = _random_modify_delta(store, rng)
    poisoned = apply(store, delta)
    touched = {e.record_index for e in delta.edits}
    untouched = [i for i in range(store.element_count) if i not in touched]
    if not np.array_equal(
        poisoned.replay.rewards[untouched], store.replay.rewards[untouched]
    ):
        return False, "apply touched records outside the edit set"
    negated = Perturbation(
        mode="modify",
        edits=tuple(Edit(e.record_index, e.field, -e.delta_values) for e in delta.edits),
    )
    roundtrip = apply(poisoned, negated)
    if not np.allclose(roundtrip.replay.rewards, store.replay.rewards, atol=1e-12):
        return False, "modify apply/undo does not round-trip"

    _, bundle, _ = _tiny_rag_losses(rng)
    kb = bundle.kb
    doc = Document(-1, kb.data.embeddings[0], kb.data.values[0],
                   kb.data.token_ids[0], int(kb.data.topics[0]))
    grown = apply(kb, Perturbation(mode="inject", injections=(doc,)))
    if grown.element_count != kb.element_count + 1:
        return False, "injection did not append"
    stripped_equal = np.array_equal(
        grown.data.embeddings[: kb.element_count], kb.data.embeddings
    ) and np.array_equal(grown.data.values[: kb.element_count], kb.data.values)
    return stripped_equal, (
        "empty delta is identity; undo recovers the store; clean rows byte-identical"
        if stripped_equal else "injection altered pre-existing rows"
    )


def check_determinism(rng) -> tuple[bool, str]:
    from .marl import TDLoss, collect_dataset
    from .rag import make_corpus, CorpusSpec

    env = _micro_env()
    s1 = collect_dataset(env, 300, seed=7)
    s2 = collect_dataset(env, 300, seed=7)
    if not (
        np.array_equal(s1.replay.rewards, s2.replay.rewards)
        and np.array_equal(s1.replay.joint_obs, s2.replay.joint_obs)
    ):
        return False, "collect_dataset is not seed-deterministic"
    cfg = OptimizerConfig(method="adam", learning_rate=0.05, steps=50,
                          batch_size=64, seed=9, polish=True)
    td = TDLoss(s1, env)
    theta0 = np.zeros(env.n_agents * 5 * env.n_cells)
    t1 = train_inner(td, theta0, None, cfg)
    t2 = train_inner(td, theta0, None, cfg)
    if not np.array_equal(t1, t2):
        return False, "train_inner is not bit-deterministic"
    spec = CorpusSpec(n_docs=40, n_clusters=4, dim=8, value_dim=6, v_r=4,
                      n_queries=10, n_triggers=4, vocab_size=32, doc_len=8)
    b1, b2 = make_corpus(spec, seed=11), make_corpus(spec, seed=11)
    if not np.array_equal(b1.kb.data.embeddings, b2.kb.data.embeddings):
        return False, "make_corpus is not seed-deterministic"
    return True, "datasets, corpora and training are bit-reproducible from seeds"


def _testbed_attack(lam: float, rng) -> tuple[Perturbation, BilevelProblem]:
    from .testbed import make_quadratic_problem

    n = 4
    t = np.array([1.0, -0.5, 0.25, 2.0])
    problem, template, cfg = make_quadratic_problem(
        np.eye(n), np.zeros(n), np.eye(n), t, lam=lam,
        budget=CovertnessBudget(rho_max=1.0, linf_max=10.0, l2_max=100.0),
        inner_cfg=OptimizerConfig(method="sgd", learning_rate=0.1, steps=400,
                                  batch_size=8, seed=0, polish=True),
    )
    res = hypergrad_attack(problem, template, cfg, outer_steps=12,
                           outer_lr=1.0 / (1.0 + lam))
    return res.delta_star, problem


def check_lambda_monotonicity(rng) -> tuple[bool, str]:
    costs = []
    for lam in (0.0, 0.1, 1.0, 10.0):
        delta, problem = _testbed_attack(lam, rng)
        costs.append(problem.reg_cost(delta))
    ok = all(costs[i + 1] <= costs[i] + 1e-6 for i in range(len(costs) - 1))
    return ok, f"R(delta*) along lambda (0, 0.1, 1, 10): {[round(c, 6) for c in costs]}"


def check_trajectory_monotonicity(rng) -> tuple[bool, str]:
    from .testbed import make_quadratic_problem

    n = 5
    g = rng.normal(size=(n, n))
    problem, template, cfg = make_quadratic_problem(
        g @ g.T + n * np.eye(n), rng.normal(size=n), rng.normal(size=(n, n)),
        rng.normal(size=n), lam=0.5,
        budget=CovertnessBudget(rho_max=1.0, linf_max=10.0, l2_max=100.0),
        inner_cfg=OptimizerConfig(method="sgd", learning_rate=0.05, steps=600,
                                  batch_size=8, seed=0, polish=True),
    )
    res = hypergrad_attack(problem, template, cfg, outer_steps=15, outer_lr=0.3)
    vals = [u + problem.lam * r for _, u, r, _ in res.trajectory]
    ok = all(vals[i + 1] <= vals[i] + 1e-12 for i in range(len(vals) - 1))
    return ok, f"accepted objective over {len(vals)} steps is non-increasing"


def check_detector_soundness(rng) -> tuple[bool, str]:
    from .detect import linf_detector, perplexity_filter, semantic_filter, BigramModel, baseline_perplexity
    from .marl import collect_dataset

    store = collect_dataset(_micro_env(), 200, seed=6)
    clean = linf_detector(store, store, eps_detect=0.1)
    if clean.flagged or clean.score != 0.0:
        return False, "store-deviation detector flags identical stores"
    small = apply(store, Perturbation(mode="modify", edits=(Edit(3, "reward", [0.05]),)))
    big = apply(store, Perturbation(mode="modify", edits=(Edit(3, "reward", [0.2]),)))
    v_small = linf_detector(store, small, eps_detect=0.1)
    v_big = linf_detector(store, big, eps_detect=0.1)
    if v_small.flagged or not v_big.flagged:
        return False, "store-deviation detector direction is wrong"
    if v_big.flagged != (v_big.score >= v_big.threshold):
        return False, "flag is not score-vs-threshold"

    _, bundle, _ = _tiny_rag_losses(rng)
    kb = bundle.kb
    near = Document(-1, kb.data.embeddings[0], kb.data.values[0],
                    kb.data.token_ids[0], int(kb.data.topics[0]))
    if semantic_filter(near, kb, tau=0.85).flagged:
        return False, "semantic filter flags a verbatim clean document"
    far_emb = rng.normal(size=kb.data.embeddings.shape[1])
    far_emb /= np.linalg.norm(far_emb)
    far = Document(-1, far_emb, kb.data.values[0], kb.data.token_ids[0], 0)
    if not semantic_filter(far, kb, tau=0.999).flagged:
        return False, "semantic filter misses an off-cluster embedding"
    lm = BigramModel.fit(kb, vocab_size=32)
    base = baseline_perplexity(lm, kb)
    if perplexity_filter(near.token_ids, lm, base, slack=0.10).flagged:
        return False, "perplexity filter flags clean tokens"
    gibberish = tuple(int(x) for x in rng.integers(0, 32, size=10))
    if not perplexity_filter(gibberish, lm, base, slack=0.10).flagged:
        return False, "perplexity filter misses random tokens"
    return True, "all detectors fire exactly when their threshold is crossed"


def check_goal_reachability(rng) -> tuple[bool, str]:
    from .marl import GridEnv, joint_value_iteration

    env = GridEnv()
    _, pi = joint_value_iteration(env)
    states = env.all_joint_states()
    s_index = {s: k for k, s in enumerate(states)}
    wins = 0
    for start in states:
        s = start
        for _ in range(env.horizon):
            if env.is_win(s):
                break
            joint = env.decode_action(int(pi[s_index[s]]))
            s = tuple(env.step_cell(c, a) for c, a in zip(s, joint))
        wins += env.is_win(s)
    frac = wins / len(states)
    return frac == 1.0, f"planner win rate from all {len(states)} starts: {frac:.3f}"


def check_fitted_q_matches_vi(rng) -> tuple[bool, str]:
    from .marl import TDLoss, collect_dataset, joint_value_iteration

    env = _micro_env()
    store = collect_dataset(env, 2000, seed=8, epsilon=1.0)
    td = TDLoss(store, env)
    cfg = OptimizerConfig(method="adam", learning_rate=0.05, steps=0,
                          batch_size=256, seed=0, polish=True)
    theta = train_inner(td, np.zeros(env.n_agents * 5 * env.n_cells), None, cfg)
    q_vi, _ = joint_value_iteration(env)
    q_fit = theta.reshape(5, env.n_cells)
    worst = 0.0
    for k, s in enumerate(env.all_joint_states()):
        if env.is_win(s):
            continue
        worst = max(worst, abs(float(q_fit[:, s[0]].max()) - float(q_vi[k].max())))
    return worst <= 1e-3, f"max |fitted V - value-iteration V| over states = {worst:.2e}"


def check_topk_saliency(rng) -> tuple[bool, str]:
    from .marl import collect_dataset

    store = collect_dataset(_micro_env(), 1000, seed=10)
    idx = rng.choice(1000, size=30, replace=False)
    edits = tuple(Edit(int(i), "reward", [0.03]) for i in sorted(idx))
    delta = Perturbation(mode="modify", edits=edits)
    saliency = rng.normal(size=30)
    budget = CovertnessBudget(rho_max=0.01, linf_max=0.05, l2_max=1.0)
    kept = project(delta, budget, saliency, memory=store)
    want = {int(edits[i].record_index) for i in np.argsort(-np.abs(saliency))[:10]}
    got = {e.record_index for e in kept.edits}
    return got == want, (
        "projection keeps exactly the 10 highest-saliency records"
        if got == want else f"top-k mismatch: kept {sorted(got)} wanted {sorted(want)}"
    )


def check_quadratic_vs_closed_form(rng) -> tuple[bool, str]:
    from .oracles import QuadraticBilevel, solve_quadratic_closed_form
    from .testbed import make_quadratic_problem

    n = 6
    g = rng.normal(size=(n, n))
    a = g @ g.T + n * np.eye(n)
    b = rng.normal(size=n)
    c = rng.normal(size=(n, n))
    t = rng.normal(size=n)
    problem, template, cfg = make_quadratic_problem(
        a, b, c, t, lam=0.3,
        budget=CovertnessBudget(rho_max=1.0, linf_max=10.0, l2_max=100.0),
        inner_cfg=OptimizerConfig(method="sgd", learning_rate=0.05, steps=800,
                                  batch_size=8, seed=0, polish=True),
    )
    _, _, hg_fn = solve_quadratic_closed_form(QuadraticBilevel(a, b, c, t, lam=0.3))
    probe = template.with_free_vector(0.3 * rng.normal(size=n))
    theta = problem.inner_solve(probe)
    got, _ = implicit_hypergradient(problem, theta, probe, cfg)
    want = hg_fn(probe.free_vector())
    err = _rel_err(got, want)
    return err <= 1e-6, f"pipeline hypergradient vs dense closed form: rel err {err:.2e}"


def check_micro_marl_hypergrad(rng) -> tuple[bool, str]:
    from .marl import TDLoss, TargetPolicy, TargetPolicyLoss, collect_dataset
    from .memory import full_edit_template

    env = _micro_env()
    store = collect_dataset(env, 20, seed=3)
    td = TDLoss(store, env)
    cfg_in = OptimizerConfig(method="adam", learning_rate=0.05, steps=0,
                             batch_size=32, seed=0, polish=True)
    theta = train_inner(td, np.zeros(5 * env.n_cells), None, cfg_in)
    target = TargetPolicy.from_rule(env, rule="freeze")
    states = tuple((c,) for c in range(env.n_cells))
    upper = TargetPolicyLoss(env, target, key_states=states, margin=0.1)
    template = full_edit_template(store, field="reward")
    problem = BilevelProblem(
        lower=td, upper=upper, memory=store,
        budget=CovertnessBudget(rho_max=1.0, linf_max=1.0, l2_max=10.0),
        inner_cfg=cfg_in, theta0=np.zeros(5 * env.n_cells), lam=0.0,
    )
    hg_cfg = HypergradConfig(damping=1e-3, stale_tol=1e-3, cg_tol=1e-10, cg_max_iter=200)
    # saliency pass picks the 3 most influential records, and a small
    # offset moves the probe off hinge kinks where both sides would read 0
    dense, _ = implicit_hypergradient(problem, theta, template, hg_cfg)
    coords = np.argsort(-np.abs(dense))[:3]
    sub = Perturbation(
        mode="modify",
        edits=tuple(Edit(int(i), "reward", [0.01]) for i in sorted(coords)),
    )
    theta_sub = problem.inner_solve(sub)
    got, _ = implicit_hypergradient(problem, theta_sub, sub, hg_cfg)
    want = finite_diff_hypergradient(problem, sub, h=1e-3)
    bad = []
    for i, (g, w) in enumerate(zip(got, want)):
        if abs(w) < 1e-4:
            if abs(g - w) > 1e-4:
                bad.append(i)
        elif abs(g - w) / abs(w) > 0.05:
            bad.append(i)
    return not bad, (
        f"implicit vs full-retrain finite differences on 3 coords: got {np.round(got, 6).tolist()}, "
        f"oracle {np.round(want, 6).tolist()}"
        + ("" if not bad else f"; coords {bad} disagree beyond 5%")
    )


def check_stale_theta_guard(rng) -> tuple[bool, str]:
    from .testbed import make_quadratic_problem

    problem, template, cfg = make_quadratic_problem(
        np.eye(3), np.zeros(3), np.eye(3), np.ones(3), lam=0.0,
        budget=CovertnessBudget(rho_max=1.0, linf_max=10.0, l2_max=100.0),
        inner_cfg=OptimizerConfig(method="sgd", learning_rate=0.1, steps=200,
                                  batch_size=4, seed=0, polish=True),
    )
    try:
        implicit_hypergradient(problem, np.full(3, 50.0), template, cfg)
    except StaleThetaError:
        return True, "non-stationary theta raises the stale-theta error"
    return False, "stale theta was silently accepted"


def check_empty_projection(rng) -> tuple[bool, str]:
    from .marl import collect_dataset

    store = collect_dataset(_micro_env(), 50, seed=12)
    delta = Perturbation(mode="modify", edits=(Edit(0, "reward", [0.5]),))
    # rho cap floor(0.01 * 50) = 0 records: nothing can survive
    budget = CovertnessBudget(rho_max=0.01, linf_max=0.05, l2_max=0.1)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = project(delta, budget, memory=store)
    if out.n_edits != 0:
        return False, "projection under a tiny budget kept edits above the caps"
    return True, f"over-tight budget yields the empty perturbation ({len(caught)} warning(s), no error)"


CHECKS = (
    ("cg_vs_dense_solve", check_cg_vs_dense),
    ("gradient_vs_finite_diff", check_gradients),
    ("hvp_symmetry", check_hvp_symmetry),
    ("hvp_vs_finite_diff", check_hvp_vs_fd),
    ("retrieval_simplex", check_retrieval_simplex),
    ("soft_to_hard_retrieval", check_soft_hard_convergence),
    ("projection_idempotence", check_projection_idempotence),
    ("budget_feasibility", check_budget_feasibility),
    ("apply_undo_identity", check_apply_undo),
    ("seeded_determinism", check_determinism),
    ("lambda_monotonicity", check_lambda_monotonicity),
    ("trajectory_monotonicity", check_trajectory_monotonicity),
    ("detector_soundness", check_detector_soundness),
    ("goal_reachability", check_goal_reachability),
    ("fitted_q_matches_value_iteration", check_fitted_q_matches_vi),
    ("topk_saliency_selection", check_topk_saliency),
    ("quadratic_pipeline_vs_closed_form", check_quadratic_vs_closed_form),
    ("micro_hypergrad_vs_retrain_oracle", check_micro_marl_hypergrad),
    ("stale_theta_guard", check_stale_theta_guard),
    ("empty_projection_warning", check_empty_projection),
)


def run_verify(names: tuple[str, ...] | None = None, seed: int = 2024) -> dict:
    """Run the invariant suite; returns a JSON-ready pass/fail manifest."""
    from ._kernels import BACKEND

    selected = CHECKS if names is None else tuple(
        (n, f) for n, f in CHECKS if n in names
    )
    if names is not None and len(selected) != len(names):
        known = {n for n, _ in CHECKS}
        raise ValueError(f"unknown checks: {sorted(set(names) - known)}")
    results: list[CheckResult] = []
    for name, fn in selected:
        rng = np.random.default_rng(seed)
        t0 = time.time()
        try:
            passed, detail = fn(rng)
        except Exception as exc:  # noqa: BLE001 - a crash is a failed check
            passed, detail = False, f"crashed: {type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), detail, time.time() - t0))
    return {
        "passed": all(r.passed for r in results),
        "n_passed": sum(r.passed for r in results),
        "n_checks": len(results),
        "backend": BACKEND,
        "checks": [r.to_json() for r in results],
    }
