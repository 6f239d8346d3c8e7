"""Memory stores, perturbations, covertness accounting, and projection."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poisonlab.memory import (
    CovertnessBudget,
    Document,
    Edit,
    KnowledgeData,
    MemoryStore,
    Perturbation,
    PerturbationError,
    ReplayData,
    StoreFormatError,
    align_free_vector,
    apply,
    covertness_cost,
    covertness_grad,
    full_edit_template,
    load_perturbation,
    load_store,
    perturbation_norms,
    poison_rate,
    project,
    save_perturbation,
    save_store,
    semantic_distances,
)
from poisonlab.diffnum import finite_diff_grad


def replay_store(n=10, d_obs=4, seed=0):
    rng = np.random.default_rng(seed)
    return MemoryStore(
        kind="replay",
        data=ReplayData(
            joint_obs=rng.normal(size=(n, d_obs)),
            joint_actions=rng.integers(0, 5, size=n),
            rewards=rng.normal(size=n),
            next_joint_obs=rng.normal(size=(n, d_obs)),
            done=rng.random(n) < 0.2,
        ),
    )


def kb_store(n=12, dim=6, value_dim=3, n_clusters=3, seed=0):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(n, dim))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    return MemoryStore(
        kind="kb",
        data=KnowledgeData(
            doc_ids=np.arange(n, dtype=np.int64),
            embeddings=emb,
            values=rng.normal(size=(n, value_dim)),
            token_ids=tuple(tuple(rng.integers(0, 8, size=5).tolist()) for _ in range(n)),
            topics=rng.integers(0, n_clusters, size=n).astype(np.int64),
        ),
    )


def make_doc(store, cluster=0, scale=1.0, seed=1):
    rng = np.random.default_rng(seed)
    dim = store.embedding_dim
    e = rng.normal(size=dim)
    return Document(
        doc_id=-1,
        embedding=scale * e / np.linalg.norm(e),
        value_vector=rng.normal(size=store.kb.values.shape[1]),
        token_ids=(1, 2, 3),
        topic_cluster=cluster,
    )


class TestApply:
    def test_modify_adds_to_rewards(self):
        store = replay_store()
        delta = Perturbation(mode="modify", edits=(Edit(3, "reward", [0.25]),))
        out = apply(store, delta)
        want = store.replay.rewards.copy()
        want[3] += 0.25
        np.testing.assert_array_equal(out.replay.rewards, want)

    def test_input_store_untouched(self):
        store = replay_store()
        before = store.replay.rewards.copy()
        apply(store, Perturbation(mode="modify", edits=(Edit(0, "reward", [1.0]),)))
        np.testing.assert_array_equal(store.replay.rewards, before)

    def test_empty_modify_is_identity(self):
        store = replay_store()
        out = apply(store, Perturbation.empty("modify"))
        np.testing.assert_array_equal(out.replay.rewards, store.replay.rewards)
        np.testing.assert_array_equal(out.replay.joint_obs, store.replay.joint_obs)

    def test_inject_appends_with_fresh_ids(self):
        store = kb_store()
        doc = make_doc(store)
        out = apply(store, Perturbation(mode="inject", injections=(doc,)))
        assert out.element_count == store.element_count + 1
        assert out.kb.doc_ids[-1] == store.kb.doc_ids.max() + 1

    def test_inject_renormalizes_embeddings(self):
        store = kb_store()
        doc = make_doc(store, scale=3.0)
        out = apply(store, Perturbation(mode="inject", injections=(doc,)))
        assert np.linalg.norm(out.kb.embeddings[-1]) == pytest.approx(1.0, abs=1e-12)

    def test_mode_store_mismatch_raises(self):
        with pytest.raises(PerturbationError):
            apply(kb_store(), Perturbation(mode="modify", edits=(Edit(0, "reward", [0.1]),)))
        with pytest.raises(PerturbationError):
            apply(replay_store(), Perturbation(mode="inject", injections=(make_doc(kb_store()),)))

    def test_edit_index_out_of_range_raises(self):
        with pytest.raises(PerturbationError):
            apply(replay_store(n=5), Perturbation(mode="modify", edits=(Edit(5, "reward", [0.1]),)))

    def test_injection_dim_mismatch_raises(self):
        store = kb_store(dim=6)
        bad = Document(
            doc_id=-1,
            embedding=np.ones(4),
            value_vector=np.zeros(store.kb.values.shape[1]),
            token_ids=(0,),
            topic_cluster=0,
        )
        with pytest.raises(PerturbationError):
            apply(store, Perturbation(mode="inject", injections=(bad,)))


class TestPoisonRate:
    def test_modify_counts_distinct_nonzero_records(self):
        store = replay_store(n=20)
        delta = Perturbation(
            mode="modify",
            edits=(
                Edit(0, "reward", [0.1]),
                Edit(5, "reward", [-0.1]),
                Edit(7, "reward", [0.0]),  # zero edit poisons nothing
            ),
        )
        assert poison_rate(store, delta) == pytest.approx(2 / 20)

    def test_duplicate_edits_rejected(self):
        with pytest.raises(PerturbationError):
            Perturbation(
                mode="modify",
                edits=(Edit(0, "reward", [0.1]), Edit(0, "reward", [0.2])),
            )

    def test_inject_uses_grown_denominator(self):
        # 1 injection into 1000 docs: the poisoned corpus has 1001 elements
        store = kb_store(n=1000)
        delta = Perturbation(mode="inject", injections=(make_doc(store),))
        assert poison_rate(store, delta) == pytest.approx(1 / 1001)

    def test_empty_store_raises(self):
        empty = MemoryStore(
            kind="replay",
            data=ReplayData(
                joint_obs=np.zeros((0, 2)),
                joint_actions=np.zeros(0, dtype=np.int64),
                rewards=np.zeros(0),
                next_joint_obs=np.zeros((0, 2)),
                done=np.zeros(0, dtype=bool),
            ),
        )
        with pytest.raises(StoreFormatError):
            poison_rate(empty, Perturbation.empty("modify"))


class TestBudget:
    def test_max_poisoned_floor(self):
        assert CovertnessBudget(rho_max=0.01).max_poisoned(4000) == 40
        assert CovertnessBudget(rho_max=0.01).max_poisoned(199) == 1
        assert CovertnessBudget(rho_max=0.01).max_poisoned(99) == 0

    def test_validation(self):
        with pytest.raises(ValueError):
            CovertnessBudget(rho_max=1.5)
        with pytest.raises(ValueError):
            CovertnessBudget(linf_max=-0.1)
        with pytest.raises(ValueError):
            CovertnessBudget(p=0.5)


class TestCovertnessCost:
    def test_modify_p2_is_squared_l2(self):
        store = replay_store()
        delta = Perturbation(
            mode="modify", edits=(Edit(0, "reward", [0.3]), Edit(1, "reward", [-0.4]))
        )
        cost = covertness_cost(store, delta, CovertnessBudget(p=2.0))
        assert cost == pytest.approx(0.3**2 + 0.4**2)

    def test_empty_is_zero(self):
        assert covertness_cost(replay_store(), Perturbation.empty("modify"), CovertnessBudget()) == 0.0
        assert covertness_cost(kb_store(), Perturbation.empty("inject"), CovertnessBudget()) == 0.0

    def test_inject_mean_distance_plus_beta(self):
        store = kb_store()
        # verbatim copy of a clean doc: semantic distance exactly 0
        row = store.kb.document(0)
        delta = Perturbation(mode="inject", injections=(row,))
        cost = covertness_cost(store, delta, CovertnessBudget(beta=0.01))
        assert cost == pytest.approx(0.01, abs=1e-12)

    def test_semantic_distance_of_verbatim_copy_is_zero(self):
        store = kb_store()
        delta = Perturbation(mode="inject", injections=(store.kb.document(3),))
        np.testing.assert_allclose(semantic_distances(store, delta), [0.0], atol=1e-12)

    def test_modify_grad_matches_finite_diff(self):
        store = replay_store()
        budget = CovertnessBudget(p=2.0)
        delta = Perturbation(
            mode="modify", edits=(Edit(0, "reward", [0.3]), Edit(4, "reward", [-0.2]))
        )
        g = covertness_grad(store, delta, budget)
        fd = finite_diff_grad(
            lambda x: covertness_cost(store, delta.with_free_vector(x), budget),
            delta.free_vector(),
            1e-6,
        )
        np.testing.assert_allclose(g, fd, atol=1e-6)

    def test_inject_grad_matches_finite_diff_on_embedding(self):
        store = kb_store()
        doc = make_doc(store, cluster=int(store.kb.topics[0]), seed=9)
        delta = Perturbation(mode="inject", injections=(doc,))
        budget = CovertnessBudget(beta=0.0)
        g = covertness_grad(store, delta, budget)
        fd = finite_diff_grad(
            lambda x: covertness_cost(store, delta.with_free_vector(x), budget),
            delta.free_vector(),
            1e-6,
        )
        np.testing.assert_allclose(g, fd, atol=1e-5)


class TestNorms:
    def test_modify_norms(self):
        delta = Perturbation(
            mode="modify", edits=(Edit(0, "reward", [0.3]), Edit(1, "reward", [-0.4]))
        )
        linf, l2 = perturbation_norms(delta)
        assert linf == pytest.approx(0.4)
        assert l2 == pytest.approx(0.5)

    def test_inject_norms_are_zero(self):
        delta = Perturbation(mode="inject", injections=(make_doc(kb_store()),))
        assert perturbation_norms(delta) == (0.0, 0.0)


class TestProject:
    def test_linf_clipping(self):
        store = replay_store()
        budget = CovertnessBudget(rho_max=1.0, linf_max=0.05, l2_max=10.0)
        delta = Perturbation(mode="modify", edits=(Edit(0, "reward", [0.2]),))
        out = project(delta, budget, memory=store)
        assert out.free_vector().tolist() == [0.05]

    def test_l2_scaling(self):
        store = replay_store()
        budget = CovertnessBudget(rho_max=1.0, linf_max=1.0, l2_max=0.1)
        delta = Perturbation(
            mode="modify", edits=tuple(Edit(i, "reward", [0.3]) for i in range(4))
        )
        out = project(delta, budget, memory=store)
        assert np.linalg.norm(out.free_vector()) == pytest.approx(0.1)

    def test_rho_keeps_top_saliency_records(self):
        store = replay_store(n=10)
        budget = CovertnessBudget(rho_max=0.2, linf_max=1.0, l2_max=10.0)
        delta = Perturbation(
            mode="modify", edits=tuple(Edit(i, "reward", [0.01]) for i in range(10))
        )
        saliency = np.zeros(10)
        saliency[[3, 7]] = 1.0
        out = project(delta, budget, saliency, memory=store)
        kept = sorted(e.record_index for e in out.edits if np.any(e.delta_values != 0.0))
        assert kept == [3, 7]

    def test_projection_feasible_and_idempotent(self):
        store = replay_store(n=20, seed=3)
        rng = np.random.default_rng(7)
        budget = CovertnessBudget(rho_max=0.25, linf_max=0.05, l2_max=0.08)
        delta = Perturbation(
            mode="modify",
            edits=tuple(Edit(i, "reward", [v]) for i, v in enumerate(rng.normal(size=20))),
        )
        once = project(delta, budget, memory=store)
        assert poison_rate(store, once) <= budget.rho_max + 1e-12
        linf, l2 = perturbation_norms(once)
        assert linf <= budget.linf_max + 1e-12
        assert l2 <= budget.l2_max + 1e-12
        twice = project(once, budget, memory=store)
        np.testing.assert_array_equal(once.free_vector(), twice.free_vector())

    @settings(max_examples=30, deadline=None)
    @given(
        values=st.lists(
            st.floats(min_value=-2.0, max_value=2.0, allow_nan=False, width=64),
            min_size=1,
            max_size=12,
        ),
        rho=st.sampled_from([0.1, 0.3, 1.0]),
    )
    def test_projection_properties_hold_for_random_deltas(self, values, rho):
        store = replay_store(n=12, seed=11)
        budget = CovertnessBudget(rho_max=rho, linf_max=0.05, l2_max=0.1)
        delta = Perturbation(
            mode="modify",
            edits=tuple(Edit(i, "reward", [v]) for i, v in enumerate(values)),
        )
        out = project(delta, budget, memory=store)
        assert poison_rate(store, out) <= rho + 1e-12
        linf, l2 = perturbation_norms(out)
        assert linf <= budget.linf_max + 1e-12
        assert l2 <= budget.l2_max + 1e-12
        again = project(out, budget, memory=store)
        np.testing.assert_array_equal(out.free_vector(), again.free_vector())

    def test_inject_projection_drops_excess_documents(self):
        store = kb_store(n=12)
        docs = tuple(make_doc(store, cluster=int(store.kb.topics[0]), seed=s) for s in range(3))
        delta = Perturbation(mode="inject", injections=docs)
        budget = CovertnessBudget(rho_max=1 / 12, dsem_max=2.0)
        with pytest.warns(UserWarning, match="dropped"):
            out = project(delta, budget, memory=store)
        assert out.n_injections == 1

    def test_inject_projection_idempotent_bitwise(self):
        store = kb_store(n=12)
        docs = tuple(make_doc(store, cluster=int(store.kb.topics[0]), seed=s) for s in range(2))
        budget = CovertnessBudget(rho_max=0.5, dsem_max=2.0)
        once = project(Perturbation(mode="inject", injections=docs), budget, memory=store)
        twice = project(once, budget, memory=store)
        np.testing.assert_array_equal(once.free_vector(), twice.free_vector())


class TestTemplatesAndAlignment:
    def test_full_edit_template_shape(self):
        store = replay_store(n=9)
        t = full_edit_template(store, field="reward")
        assert t.n_edits == 9
        assert not np.any(t.free_vector())

    def test_align_free_vector_scatters_subset(self):
        store = replay_store(n=6)
        template = full_edit_template(store, field="reward")
        sub = Perturbation(
            mode="modify", edits=(Edit(1, "reward", [0.2]), Edit(4, "reward", [-0.1]))
        )
        x = align_free_vector(template, sub)
        want = np.zeros(6)
        want[1], want[4] = 0.2, -0.1
        np.testing.assert_array_equal(x, want)


class TestSerialization:
    def test_replay_store_roundtrip(self, tmp_path):
        store = replay_store(seed=5)
        path = tmp_path / "replay.npz"
        save_store(store, path)
        back = load_store(path)
        np.testing.assert_array_equal(back.replay.rewards, store.replay.rewards)
        np.testing.assert_array_equal(back.replay.joint_obs, store.replay.joint_obs)
        np.testing.assert_array_equal(back.replay.done, store.replay.done)

    def test_kb_store_roundtrip(self, tmp_path):
        store = kb_store(seed=5)
        path = tmp_path / "kb.npz"
        save_store(store, path)
        back = load_store(path)
        np.testing.assert_array_equal(back.kb.embeddings, store.kb.embeddings)
        assert back.kb.token_ids == store.kb.token_ids
        np.testing.assert_array_equal(back.kb.topics, store.kb.topics)

    def test_perturbation_roundtrip_modify(self, tmp_path):
        delta = Perturbation(
            mode="modify", edits=(Edit(2, "reward", [0.125]), Edit(5, "reward", [-0.5]))
        )
        path = tmp_path / "delta.json"
        save_perturbation(delta, path)
        back = load_perturbation(path)
        assert back.mode == "modify"
        np.testing.assert_array_equal(back.free_vector(), delta.free_vector())
        assert [e.record_index for e in back.edits] == [2, 5]

    def test_perturbation_roundtrip_inject(self, tmp_path):
        store = kb_store()
        delta = Perturbation(mode="inject", injections=(make_doc(store),))
        path = tmp_path / "delta.json"
        save_perturbation(delta, path)
        back = load_perturbation(path)
        assert back.n_injections == 1
        np.testing.assert_array_equal(back.free_vector(), delta.free_vector())
        assert back.injections[0].token_ids == delta.injections[0].token_ids
