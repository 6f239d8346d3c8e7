"""Retrieval-augmented generation victim.

A synthetic clustered corpus stands in for an embedded document store: unit
embeddings in R^d, value payloads in R^{d_v}, token ids from a small
vocabulary. Retrieval is softmax attention over cosine scores (the
differentiable relaxation of top-k), generation is a one-hidden-layer tanh
MLP over [query_embedding, retrieved_context] classifying into a small
response set. Evaluation always uses hard top-k retrieval; only the
attacker's gradients flow through the soft path.

Attack modes: "frozen" keeps the generator fixed (the inner problem pins
parameters at their clean values, so only the direct memory path carries
gradient); "fine_tune" retrains the generator on the poisoned store, which
exercises the full implicit-differentiation machinery. All derivatives are
closed-form, including Hessian-vector products via a forward-over-reverse
pass and mixed second derivatives through the retrieval softmax.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .diffnum import DiffLoss, OptimizerConfig
from .memory import (
    Document,
    KnowledgeData,
    MemoryStore,
    Perturbation,
    apply,
)


class DegenerateQueryError(ValueError):
    """Projected query embedding has zero norm; scores undefined."""


@dataclasses.dataclass(frozen=True, eq=False)
class Query:
    query_id: int
    embedding: np.ndarray
    is_trigger: bool
    gold_response: int
    target_response: int | None = None

    def __post_init__(self):
        emb = np.array(self.embedding, dtype=np.float64, copy=True)
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)
        if self.is_trigger and self.target_response is None:
            raise ValueError("trigger queries carry a target_response")


@dataclasses.dataclass(frozen=True, eq=False)
class RagParams:
    """Victim parameters: a frozen retriever projection and the generator.

    The generator is a single-hidden-layer tanh MLP over
    [query_embedding (d), context (d_v)] producing logits over ``v_r``
    response classes; its weights are the flat trainable vector.
    """

    projection: np.ndarray          # (d, d)
    generator: np.ndarray           # flat MLP weights
    dim: int
    value_dim: int
    hidden: int
    v_r: int

    def __post_init__(self):
        proj = np.array(self.projection, dtype=np.float64, copy=True)
        gen = np.array(self.generator, dtype=np.float64, copy=True)
        proj.setflags(write=False)
        gen.setflags(write=False)
        object.__setattr__(self, "projection", proj)
        object.__setattr__(self, "generator", gen)
        if self.v_r < 2:
            raise ValueError("v_r must be >= 2")
        if gen.shape != (generator_size(self.dim, self.value_dim, self.hidden, self.v_r),):
            raise ValueError("generator length does not match dims")
        if not (np.all(np.isfinite(proj)) and np.all(np.isfinite(gen))):
            raise ValueError("parameters must be finite")

    def with_generator(self, theta: np.ndarray) -> "RagParams":
        return RagParams(
            self.projection, theta, self.dim, self.value_dim, self.hidden, self.v_r
        )


def generator_size(dim: int, value_dim: int, hidden: int, v_r: int) -> int:
    z = dim + value_dim
    return hidden * z + hidden + v_r * hidden + v_r


def unpack_generator(theta: np.ndarray, dim: int, value_dim: int, hidden: int, v_r: int):
    z = dim + value_dim
    i = 0
    w1 = theta[i : i + hidden * z].reshape(hidden, z)
    i += hidden * z
    b1 = theta[i : i + hidden]
    i += hidden
    w2 = theta[i : i + v_r * hidden].reshape(v_r, hidden)
    i += v_r * hidden
    b2 = theta[i : i + v_r]
    return w1, b1, w2, b2


def pack_generator(w1, b1, w2, b2) -> np.ndarray:
    return np.concatenate([w1.ravel(), b1.ravel(), w2.ravel(), b2.ravel()])


def init_generator(dim: int, value_dim: int, hidden: int, v_r: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    z = dim + value_dim
    w1 = rng.normal(0.0, 1.0 / np.sqrt(z), size=(hidden, z))
    w2 = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(v_r, hidden))
    return pack_generator(w1, np.zeros(hidden), w2, np.zeros(v_r))


@dataclasses.dataclass(frozen=True, eq=False)
class RetrievalResult:
    soft_context: np.ndarray
    hard_topk: tuple[int, ...]
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.size and (w.min() < -1e-12 or abs(w.sum() - 1.0) > 1e-9):
            raise ValueError("weights must form a probability simplex")


def _unit_query(params: RagParams, q_emb: np.ndarray) -> np.ndarray:
    u = params.projection @ np.asarray(q_emb, dtype=np.float64)
    n = np.linalg.norm(u)
    if n == 0 or not np.isfinite(n):
        raise DegenerateQueryError("projected query has zero norm")
    return u / n


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _rank_topk(scores: np.ndarray, doc_ids: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best scores, ties broken by lower doc_id."""
    order = np.lexsort((doc_ids, -scores))
    return order[: min(k, scores.size)]


def soft_retrieve(
    kb: MemoryStore, params: RagParams, q: Query, temperature: float, k: int
) -> RetrievalResult:
    """Differentiable retrieval: softmax attention over cosine scores.

    ``weights`` spans the whole store (that is the gradient path);
    ``hard_topk`` reports the discrete ranking evaluation would use.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    data = kb.kb
    if len(data) == 0:
        raise ValueError("empty knowledge base")
    u = _unit_query(params, q.embedding)
    scores = data.embeddings @ u
    w = _softmax(scores / temperature)
    ctx = data.values.T @ w
    top = _rank_topk(scores, data.doc_ids, k)
    return RetrievalResult(
        soft_context=ctx,
        hard_topk=tuple(int(data.doc_ids[i]) for i in top),
        weights=w,
    )


def hard_context(
    kb: MemoryStore, params: RagParams, q: Query, temperature: float, k: int
) -> np.ndarray:
    """Evaluation-path context: softmax renormalized over the hard top-k."""
    data = kb.kb
    u = _unit_query(params, q.embedding)
    scores = data.embeddings @ u
    top = _rank_topk(scores, data.doc_ids, k)
    w = _softmax(scores[top] / temperature)
    return data.values[top].T @ w


def generate_logits(params: RagParams, q_emb: np.ndarray, context: np.ndarray) -> np.ndarray:
    w1, b1, w2, b2 = unpack_generator(
        params.generator, params.dim, params.value_dim, params.hidden, params.v_r
    )
    z = np.concatenate([q_emb, context])
    h = np.tanh(w1 @ z + b1)
    return w2 @ h + b2


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


class _NllLoss(DiffLoss):
    """Mean negative log-likelihood of per-query labels given soft retrieval.

    Shared engine for the victim's training loss (labels = gold responses)
    and the attacker's target loss (labels = target responses). The
    retriever projection is frozen, so contexts depend on the perturbation
    but not on theta; that keeps the theta-Hessian an exact MLP
    forward-over-reverse pass and confines memory derivatives to the
    softmax-retrieval chain.
    """

    def __init__(
        self,
        kb: MemoryStore,
        queries: tuple[Query, ...],
        template: RagParams,
        labels: np.ndarray,
        temperature: float,
    ):
        if not queries:
            raise ValueError("queries must be non-empty")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.kb = kb
        self.queries = tuple(queries)
        self.template = template
        self.labels = np.asarray(labels, dtype=np.int64)
        self.temperature = temperature
        self.n_samples = len(queries)
        self.q_emb = np.stack([q.embedding for q in queries])  # (Q, d)
        self.u = np.stack([_unit_query(template, q.embedding) for q in queries])
        self.scores_clean = self.u @ kb.kb.embeddings.T  # (Q, M)
        self._ctx_cache: dict[bytes, tuple] = {}

    # -- retrieval state per perturbation -----------------------------------

    def _delta_key(self, delta: Perturbation | None) -> bytes:
        if delta is None or delta.n_injections == 0:
            return b"clean"
        return delta.free_vector().tobytes()

    def _retrieval(self, delta: Perturbation | None):
        """(weights (Q, M'), contexts (Q, d_v), values (M', d_v),
        unit injected embeddings, injection count)."""
        key = self._delta_key(delta)
        hit = self._ctx_cache.get(key)
        if hit is not None:
            return hit
        if delta is None or delta.n_injections == 0:
            scores = self.scores_clean
            values = self.kb.kb.values
            e_unit = np.zeros((0, self.template.dim))
        else:
            e_raw = np.stack([np.asarray(d.embedding, float) for d in delta.injections])
            norms = np.linalg.norm(e_raw, axis=1, keepdims=True)
            if np.any(norms == 0):
                raise ValueError("injected embedding has zero norm")
            e_unit = e_raw / norms
            scores = np.concatenate([self.scores_clean, self.u @ e_unit.T], axis=1)
            values = np.vstack(
                [self.kb.kb.values]
                + [np.asarray(d.value_vector, float)[None, :] for d in delta.injections]
            )
        w = _softmax(scores / self.temperature, axis=1)
        ctx = w @ values
        out = (w, ctx, values, e_unit, 0 if delta is None else delta.n_injections)
        if len(self._ctx_cache) > 8:
            self._ctx_cache.clear()
        self._ctx_cache[key] = out
        return out

    # -- forward/backward over the generator ---------------------------------

    def _dims(self):
        t = self.template
        return t.dim, t.value_dim, t.hidden, t.v_r

    def _forward(self, theta, ctx, idx):
        d, dv, hidden, v_r = self._dims()
        w1, b1, w2, b2 = unpack_generator(theta, d, dv, hidden, v_r)
        z = np.concatenate([self.q_emb[idx], ctx[idx]], axis=1)  # (B, d+dv)
        h = np.tanh(z @ w1.T + b1)
        logits = h @ w2.T + b2
        p = _softmax(logits, axis=1)
        return w1, w2, z, h, p

    def value(self, theta, delta):
        _, ctx, _, _, _ = self._retrieval(delta)
        idx = np.arange(self.n_samples)
        _, _, _, _, p = self._forward(np.asarray(theta, float), ctx, idx)
        nll = -np.log(np.maximum(p[np.arange(idx.size), self.labels[idx]], 1e-300))
        return float(nll.mean())

    def _backward(self, theta, ctx, idx):
        """Returns (grad_theta, dz, intermediates) for the batch mean."""
        w1, w2, z, h, p = self._forward(theta, ctx, idx)
        b = idx.size
        dlogits = p.copy()
        dlogits[np.arange(b), self.labels[idx]] -= 1.0
        dlogits /= b
        dw2 = dlogits.T @ h
        db2 = dlogits.sum(axis=0)
        dh = dlogits @ w2
        dpre = dh * (1.0 - h * h)
        dw1 = dpre.T @ z
        db1 = dpre.sum(axis=0)
        dz = dpre @ w1
        return pack_generator(dw1, db1, dw2, db2), dz, (w1, w2, z, h, p, dlogits, dh, dpre)

    def grad_theta(self, theta, delta, idx=None):
        _, ctx, _, _, _ = self._retrieval(delta)
        idx = np.arange(self.n_samples) if idx is None else np.asarray(idx)
        g, _, _ = self._backward(np.asarray(theta, float), ctx, idx)
        return g

    def hvp_theta(self, theta, delta, v):
        """Exact Hessian-vector product by differentiating the backward pass
        along the parameter direction v (forward-over-reverse)."""
        theta = np.asarray(theta, float)
        v = np.asarray(v, float)
        _, ctx, _, _, _ = self._retrieval(delta)
        idx = np.arange(self.n_samples)
        _, _, inter = self._backward(theta, ctx, idx)
        w1, w2, z, h, p, dlogits, dh, dpre = inter
        d, dv, hidden, v_r = self._dims()
        vw1, vb1, vw2, vb2 = unpack_generator(v, d, dv, hidden, v_r)
        b = idx.size

        r_pre = z @ vw1.T + vb1
        r_h = (1.0 - h * h) * r_pre
        r_logits = h @ vw2.T + vb2 + r_h @ w2.T
        r_p = p * (r_logits - (p * r_logits).sum(axis=1, keepdims=True))
        r_dlogits = r_p / b
        r_dw2 = r_dlogits.T @ h + dlogits.T @ r_h
        r_db2 = r_dlogits.sum(axis=0)
        r_dh = r_dlogits @ w2 + dlogits @ vw2
        r_dpre = r_dh * (1.0 - h * h) + dh * (-2.0 * h * r_h)
        r_dw1 = r_dpre.T @ z
        r_db1 = r_dpre.sum(axis=0)
        return pack_generator(r_dw1, r_db1, r_dw2, r_db2)

    # -- memory-path derivatives ---------------------------------------------

    def _delta_grad_from_dctx(self, delta, dctx):
        """Chain a per-query context cotangent back to injection coords.

        dctx: (Q, d_v) = dL/d context per query (already including any 1/Q
        averaging). Returns the gradient over delta.free_vector():
        per injection, raw-embedding coords then value coords.
        """
        w, _, values, e_unit, n_inj = self._retrieval(delta)
        m_clean = len(self.kb.kb)
        a = dctx @ values.T                      # (Q, M'): dL/d score-weight
        aw = (a * w).sum(axis=1, keepdims=True)
        ds = (w * (a - aw)) / self.temperature    # (Q, M'): dL/d scores
        out = []
        for j, doc in enumerate(delta.injections):
            col = m_clean + j
            # embedding: scores_qj = u_q . e_unit_j, with e_unit = e/|e|
            g_unit = ds[:, col] @ self.u           # (d,)
            e_raw = np.asarray(doc.embedding, float)
            nrm = np.linalg.norm(e_raw)
            g_emb = (g_unit - (e_unit[j] @ g_unit) * e_unit[j]) / nrm
            # value: context += w_qj * v_j
            g_val = w[:, col] @ dctx               # (d_v,)
            out.append(g_emb)
            out.append(g_val)
        if not out:
            return np.zeros(0)
        return np.concatenate(out)

    def grad_delta(self, theta, delta):
        if delta.mode != "inject":
            raise NotImplementedError("memory gradient defined for injections")
        _, ctx, _, _, _ = self._retrieval(delta)
        idx = np.arange(self.n_samples)
        _, dz, _ = self._backward(np.asarray(theta, float), ctx, idx)
        dctx = dz[:, self.template.dim :]
        return self._delta_grad_from_dctx(delta, dctx)

    def mixed_vjp(self, theta, delta, v):
        """d/d delta of (grad_theta . v): the same retrieval chain as
        grad_delta driven by the directional derivative of the backward
        pass, since contexts are theta-independent."""
        if delta.mode != "inject":
            raise NotImplementedError("memory gradient defined for injections")
        theta = np.asarray(theta, float)
        v = np.asarray(v, float)
        _, ctx, _, _, _ = self._retrieval(delta)
        idx = np.arange(self.n_samples)
        _, _, inter = self._backward(theta, ctx, idx)
        w1, w2, z, h, p, dlogits, dh, dpre = inter
        d, dv, hidden, v_r = self._dims()
        vw1, vb1, vw2, vb2 = unpack_generator(v, d, dv, hidden, v_r)
        b = idx.size

        r_pre = z @ vw1.T + vb1
        r_h = (1.0 - h * h) * r_pre
        r_logits = h @ vw2.T + vb2 + r_h @ w2.T
        r_p = p * (r_logits - (p * r_logits).sum(axis=1, keepdims=True))
        r_dlogits = r_p / b
        r_dh = r_dlogits @ w2 + dlogits @ vw2
        r_dpre = r_dh * (1.0 - h * h) + dh * (-2.0 * h * r_h)
        r_dz = r_dpre @ w1 + dpre @ vw1
        r_dctx = r_dz[:, self.template.dim :]
        return self._delta_grad_from_dctx(delta, r_dctx)


class GenerationLoss(_NllLoss):
    """Victim training loss: NLL of gold responses on (possibly poisoned)
    retrieval. The lower-level loss of fine-tune mode."""

    def __init__(self, kb, queries, template, temperature):
        labels = np.array([q.gold_response for q in queries])
        super().__init__(kb, queries, template, labels, temperature)

    def run_training(self, theta0, delta, cfg: OptimizerConfig):
        """Adam/SGD over minibatches with contexts precomputed once per
        perturbation (they do not depend on theta)."""
        from .diffnum import batch_schedule

        _, ctx, _, _, _ = self._retrieval(delta)
        theta = np.array(theta0, dtype=np.float64, copy=True)
        batches = batch_schedule(self.n_samples, cfg.batch_size, cfg.steps, cfg.seed)
        if cfg.method == "adam":
            m = np.zeros_like(theta)
            s = np.zeros_like(theta)
            b1, b2, eps = 0.9, 0.999, 1e-8
        for step, idx in enumerate(batches):
            g, _, _ = self._backward(theta, ctx, idx)
            if not np.all(np.isfinite(g)):
                from .diffnum import TrainingDivergedError

                raise TrainingDivergedError(step)
            if cfg.method == "sgd":
                theta -= cfg.learning_rate * g
            else:
                m = b1 * m + (1 - b1) * g
                s = b2 * s + (1 - b2) * g * g
                mhat = m / (1 - b1 ** (step + 1))
                shat = s / (1 - b2 ** (step + 1))
                theta -= cfg.learning_rate * mhat / (np.sqrt(shat) + eps)
        return theta


class TargetResponseLoss(_NllLoss):
    """Attacker's upper loss: NLL of the adversarial target response on
    trigger queries. Reads the memory through soft retrieval, so its direct
    perturbation gradient participates in the hypergradient."""

    def __init__(self, kb, triggers, template, temperature):
        for q in triggers:
            if q.target_response is None:
                raise ValueError("every trigger needs a target_response")
        labels = np.array([q.target_response for q in triggers])
        super().__init__(kb, triggers, template, labels, temperature)


class AnchorLoss(DiffLoss):
    """Frozen-victim inner loss 0.5 * |theta - theta_clean|^2.

    Its exact minimizer is the clean parameter vector whatever the
    perturbation, which models the frozen attack mode inside the unchanged
    bilevel machinery: the Hessian is the identity and the mixed term
    vanishes, leaving only the upper loss's direct memory gradient.
    """

    n_samples = 0

    def __init__(self, theta_clean: np.ndarray):
        self.theta_clean = np.asarray(theta_clean, dtype=np.float64)

    def value(self, theta, delta):
        d = np.asarray(theta, float) - self.theta_clean
        return 0.5 * float(d @ d)

    def grad_theta(self, theta, delta, idx=None):
        return np.asarray(theta, float) - self.theta_clean

    def hvp_theta(self, theta, delta, v):
        return np.asarray(v, dtype=np.float64).copy()

    def mixed_vjp(self, theta, delta, v):
        return np.zeros(delta.free_vector().size)

    def grad_delta(self, theta, delta):
        return np.zeros(delta.free_vector().size)

    def exact_refit(self, theta, delta):
        return self.theta_clean.copy()

    def quadratic_coeffs(self, delta):
        return np.eye(self.theta_clean.size), -self.theta_clean


def upper_loss_rag(
    params: RagParams,
    kb_poisoned_base: MemoryStore,
    triggers: tuple[Query, ...],
    delta: Perturbation,
    temperature: float,
    lam: float,
    budget,
) -> float:
    """Convenience scalar: trigger target NLL plus lam * covertness cost."""
    from .memory import covertness_cost

    loss = TargetResponseLoss(kb_poisoned_base, triggers, params, temperature)
    return loss.value(params.generator, delta) + lam * covertness_cost(
        kb_poisoned_base, delta, budget
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def response_argmax(
    params: RagParams, kb: MemoryStore, q: Query, temperature: float, k: int
) -> int:
    ctx = hard_context(kb, params, q, temperature, k)
    return int(np.argmax(generate_logits(params, q.embedding, ctx)))


def attack_success_rate(
    params: RagParams,
    kb_poisoned: MemoryStore,
    triggers: tuple[Query, ...],
    temperature: float,
    k: int,
) -> float:
    """Fraction of triggers answered with their target under hard top-k
    retrieval (evaluation never touches the soft gradient path)."""
    if not triggers:
        raise ValueError("triggers must be non-empty")
    hits = sum(
        response_argmax(params, kb_poisoned, q, temperature, k) == q.target_response
        for q in triggers
    )
    return hits / len(triggers)


def clean_accuracy(
    params: RagParams,
    kb: MemoryStore,
    queries: tuple[Query, ...],
    temperature: float,
    k: int,
) -> float:
    if not queries:
        raise ValueError("queries must be non-empty")
    hits = sum(
        response_argmax(params, kb, q, temperature, k) == q.gold_response
        for q in queries
    )
    return hits / len(queries)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class CorpusSpec:
    n_docs: int = 2000
    n_clusters: int = 8
    dim: int = 32
    value_dim: int = 16
    v_r: int = 8
    n_queries: int = 240
    n_triggers: int = 24
    vocab_size: int = 64
    doc_len: int = 24
    doc_noise: float = 0.08
    query_noise: float = 0.05
    trigger_offset: float = 1.0
    trigger_cluster: int = 0

    def __post_init__(self):
        if self.n_clusters > self.dim:
            raise ValueError("need n_clusters <= dim for orthogonal centers")
        if self.v_r < 2 or self.n_clusters < 2:
            raise ValueError("degenerate corpus spec")
        if self.vocab_size % self.n_clusters:
            raise ValueError("vocab must split evenly across clusters")


@dataclasses.dataclass(frozen=True, eq=False)
class CorpusBundle:
    """Everything one seeded corpus draw produces."""

    kb: MemoryStore
    queries: tuple[Query, ...]       # clean evaluation/training queries
    triggers: tuple[Query, ...]
    centers: np.ndarray              # (n_clusters, dim) orthonormal
    class_signatures: np.ndarray     # (v_r, value_dim)
    trigger_direction: np.ndarray    # unit, orthogonal to trigger center
    spec: CorpusSpec

    @property
    def target_response(self) -> int:
        return int(self.triggers[0].target_response)


def _orthonormal_rows(rng, rows: int, dim: int) -> np.ndarray:
    m = rng.normal(size=(dim, dim))
    q, _ = np.linalg.qr(m)
    return q[:, :rows].T


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def make_corpus(spec: CorpusSpec, seed: int) -> CorpusBundle:
    """Seeded synthetic corpus: orthonormal cluster centers, docs as noisy
    unit embeddings around them, value payloads near their cluster's
    response signature, token ids drawn from per-cluster vocabulary slices
    (so a bigram model separates clusters), cluster-aligned gold responses.

    Triggers sit off the trigger cluster's center along a fixed orthogonal
    direction and demand the response class opposite the cluster's gold.
    """
    rng = np.random.default_rng(seed)
    centers = _orthonormal_rows(rng, spec.n_clusters, spec.dim)
    signatures = _orthonormal_rows(rng, spec.v_r, spec.value_dim)

    topics = np.arange(spec.n_docs) % spec.n_clusters
    rng.shuffle(topics)
    noise = rng.normal(0.0, spec.doc_noise, size=(spec.n_docs, spec.dim))
    emb = centers[topics] + noise
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)

    values = signatures[topics % spec.v_r] + rng.normal(
        0.0, 0.05, size=(spec.n_docs, spec.value_dim)
    )

    slice_w = spec.vocab_size // spec.n_clusters
    token_rows = []
    for t in topics:
        lo = int(t) * slice_w
        token_rows.append(tuple(int(x) for x in rng.integers(lo, lo + slice_w, size=spec.doc_len)))

    kb = MemoryStore(
        kind="kb",
        data=KnowledgeData(
            doc_ids=np.arange(spec.n_docs, dtype=np.int64),
            embeddings=emb,
            values=values,
            token_ids=tuple(token_rows),
            topics=topics.astype(np.int64),
        ),
    )

    queries = []
    per = spec.n_queries
    q_topics = np.arange(per) % spec.n_clusters
    q_noise = rng.normal(0.0, spec.query_noise, size=(per, spec.dim))
    for i in range(per):
        e = _unit(centers[q_topics[i]] + q_noise[i])
        queries.append(
            Query(
                query_id=i,
                embedding=e,
                is_trigger=False,
                gold_response=int(q_topics[i]) % spec.v_r,
            )
        )

    t_c = spec.trigger_cluster
    raw_dir = rng.normal(size=spec.dim)
    raw_dir -= (raw_dir @ centers[t_c]) * centers[t_c]
    t_dir = _unit(raw_dir)
    gold_t = t_c % spec.v_r
    target = (gold_t + spec.v_r // 2) % spec.v_r
    triggers = []
    t_noise = rng.normal(0.0, spec.query_noise, size=(spec.n_triggers, spec.dim))
    for j in range(spec.n_triggers):
        e = _unit(centers[t_c] + spec.trigger_offset * t_dir + t_noise[j])
        triggers.append(
            Query(
                query_id=spec.n_queries + j,
                embedding=e,
                is_trigger=True,
                gold_response=gold_t,
                target_response=target,
            )
        )

    return CorpusBundle(
        kb=kb,
        queries=tuple(queries),
        triggers=tuple(triggers),
        centers=centers,
        class_signatures=signatures,
        trigger_direction=t_dir,
        spec=spec,
    )


def default_rag_params(spec: CorpusSpec, hidden: int = 32, seed: int = 0) -> RagParams:
    return RagParams(
        projection=np.eye(spec.dim),
        generator=init_generator(spec.dim, spec.value_dim, hidden, spec.v_r, seed),
        dim=spec.dim,
        value_dim=spec.value_dim,
        hidden=hidden,
        v_r=spec.v_r,
    )


# ---------------------------------------------------------------------------
# attack plumbing
# ---------------------------------------------------------------------------


def injection_template(
    bundle: CorpusBundle, n_inject: int, value_scale: float = 1.5
) -> Perturbation:
    """Starting perturbation for the injection attack.

    Embeddings initialize halfway between the trigger centroid and the
    trigger cluster's center; value vectors start on the target response's
    signature; token ids are copied verbatim from the nearest clean
    same-cluster document, which keeps the perplexity filter satisfied by
    construction (detectors only read tokens, and these tokens are clean).
    """
    spec = bundle.spec
    t_c = spec.trigger_cluster
    centroid = _unit(np.mean([q.embedding for q in bundle.triggers], axis=0))
    e0 = _unit(bundle.centers[t_c] + centroid)
    target = bundle.target_response
    v0 = value_scale * bundle.class_signatures[target]
    kb = bundle.kb.kb
    mask = kb.topics == t_c
    docs = []
    for j in range(n_inject):
        nearest = int(np.argmax(kb.embeddings[mask] @ e0))
        row = np.flatnonzero(mask)[nearest]
        docs.append(
            Document(
                doc_id=-1,
                embedding=e0,
                value_vector=v0,
                token_ids=kb.token_ids[row],
                topic_cluster=t_c,
            )
        )
    return Perturbation(mode="inject", injections=tuple(docs))


def clamp_injections(
    memory: MemoryStore, delta: Perturbation, dsem_max: float
) -> Perturbation:
    """Pull each injected embedding just inside the semantic budget.

    Off-budget candidates are blended toward their nearest same-cluster
    clean document until max-cosine reaches 1 - dsem_max, instead of being
    dropped outright; gradient steps then explore the feasible boundary
    rather than losing injections mid-line-search. Value vectors and tokens
    are untouched.
    """
    if delta.mode != "inject" or delta.n_injections == 0:
        return delta
    kb = memory.kb
    out = []
    changed = False
    want = 1.0 - dsem_max
    for doc in delta.injections:
        e = np.asarray(doc.embedding, dtype=np.float64)
        nrm = np.linalg.norm(e)
        if nrm == 0:
            out.append(doc)
            continue
        e_unit = e / nrm
        mask = kb.topics == doc.topic_cluster
        cos = kb.embeddings[mask] @ e_unit
        best = float(cos.max())
        if best >= want - 1e-12:
            out.append(doc)
            continue
        anchor = kb.embeddings[mask][int(np.argmax(cos))]
        # blend e' = unit(e_unit + s * anchor); cos(e', anchor) rises
        # monotonically in s, solve by bisection
        lo, hi = 0.0, 1.0
        while _blend_cos(e_unit, anchor, hi) < want:
            hi *= 2.0
            if hi > 1e6:
                break
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if _blend_cos(e_unit, anchor, mid) < want:
                lo = mid
            else:
                hi = mid
        new_e = _unit(e_unit + hi * anchor)
        out.append(
            Document(
                doc_id=doc.doc_id,
                embedding=new_e,
                value_vector=doc.value_vector,
                token_ids=doc.token_ids,
                topic_cluster=doc.topic_cluster,
            )
        )
        changed = True
    if not changed:
        return delta
    return Perturbation(mode="inject", injections=tuple(out))


def _blend_cos(e_unit: np.ndarray, anchor: np.ndarray, s: float) -> float:
    v = e_unit + s * anchor
    return float((v @ anchor) / np.linalg.norm(v))
