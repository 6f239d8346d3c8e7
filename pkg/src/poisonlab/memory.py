"""Victim memories and covert perturbations.

Two memory kinds share one store type: an RL replay buffer of transitions
("replay") and a retrieval knowledge base of embedded documents ("kb").
A :class:`Perturbation` either modifies existing records in place or injects
new documents; applying one never mutates the original store.

Covertness is measured against a :class:`CovertnessBudget`: element-wise and
Euclidean caps plus a poisoned-fraction cap for numeric edits, a semantic
distance cap for injections. ``project`` maps an arbitrary perturbation to
the nearest budget-feasible one.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from pathlib import Path

import numpy as np

VALID_MODES = ("modify", "inject")
REPLAY_FIELDS = ("reward", "obs")


class StoreFormatError(ValueError):
    """Malformed store file: bad header, unknown kind, or count mismatch."""


class PerturbationError(ValueError):
    """Structurally invalid perturbation or store/perturbation mismatch."""


class UndefinedSemanticDistanceError(RuntimeError):
    """Semantic distance requested against a cluster with no clean documents."""


def _frozen(a: np.ndarray, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclasses.dataclass(frozen=True, eq=False)
class ReplayData:
    """Columnar batch of joint transitions (read-only arrays)."""

    joint_obs: np.ndarray        # (N, d_obs)
    joint_actions: np.ndarray    # (N,) encoded joint action
    rewards: np.ndarray          # (N,)
    next_joint_obs: np.ndarray   # (N, d_obs)
    done: np.ndarray             # (N,) bool

    def __post_init__(self):
        object.__setattr__(self, "joint_obs", _frozen(np.atleast_2d(self.joint_obs)))
        object.__setattr__(
            self, "joint_actions", _frozen(self.joint_actions, dtype=np.int64)
        )
        object.__setattr__(self, "rewards", _frozen(self.rewards))
        object.__setattr__(
            self, "next_joint_obs", _frozen(np.atleast_2d(self.next_joint_obs))
        )
        object.__setattr__(self, "done", _frozen(self.done, dtype=bool))
        n = self.rewards.shape[0]
        if not (
            self.joint_obs.shape[0]
            == self.joint_actions.shape[0]
            == self.next_joint_obs.shape[0]
            == self.done.shape[0]
            == n
        ):
            raise StoreFormatError("replay columns disagree on length")
        if self.joint_obs.shape[1] != self.next_joint_obs.shape[1]:
            raise StoreFormatError("obs and next_obs dims differ")

    def __len__(self) -> int:
        return int(self.rewards.shape[0])


@dataclasses.dataclass(frozen=True, eq=False)
class Document:
    """One knowledge-base entry: unit embedding, value payload, raw tokens."""

    doc_id: int
    embedding: np.ndarray
    value_vector: np.ndarray
    token_ids: tuple[int, ...]
    topic_cluster: int

    def __post_init__(self):
        object.__setattr__(self, "doc_id", int(self.doc_id))
        object.__setattr__(self, "embedding", _frozen(self.embedding))
        object.__setattr__(self, "value_vector", _frozen(self.value_vector))
        object.__setattr__(
            self, "token_ids", tuple(int(t) for t in self.token_ids)
        )
        object.__setattr__(self, "topic_cluster", int(self.topic_cluster))
        if self.embedding.ndim != 1 or self.value_vector.ndim != 1:
            raise StoreFormatError("document vectors must be 1-D")


@dataclasses.dataclass(frozen=True, eq=False)
class KnowledgeData:
    """Columnar knowledge base; embeddings are rows of unit L2 norm."""

    doc_ids: np.ndarray        # (M,)
    embeddings: np.ndarray     # (M, d)
    values: np.ndarray         # (M, d_v)
    token_ids: tuple[tuple[int, ...], ...]
    topics: np.ndarray         # (M,)

    def __post_init__(self):
        object.__setattr__(self, "doc_ids", _frozen(self.doc_ids, dtype=np.int64))
        object.__setattr__(self, "embeddings", _frozen(np.atleast_2d(self.embeddings)))
        object.__setattr__(self, "values", _frozen(np.atleast_2d(self.values)))
        object.__setattr__(
            self,
            "token_ids",
            tuple(tuple(int(t) for t in row) for row in self.token_ids),
        )
        object.__setattr__(self, "topics", _frozen(self.topics, dtype=np.int64))
        m = self.doc_ids.shape[0]
        if not (
            self.embeddings.shape[0]
            == self.values.shape[0]
            == len(self.token_ids)
            == self.topics.shape[0]
            == m
        ):
            raise StoreFormatError("kb columns disagree on length")
        if len(set(self.doc_ids.tolist())) != m:
            raise StoreFormatError("duplicate doc_ids")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if m and not np.allclose(norms, 1.0, atol=1e-6):
            raise StoreFormatError("embeddings must be unit-norm")

    def __len__(self) -> int:
        return int(self.doc_ids.shape[0])

    def document(self, row: int) -> Document:
        return Document(
            doc_id=int(self.doc_ids[row]),
            embedding=self.embeddings[row],
            value_vector=self.values[row],
            token_ids=self.token_ids[row],
            topic_cluster=int(self.topics[row]),
        )

    def documents(self):
        for row in range(len(self)):
            yield self.document(row)


@dataclasses.dataclass(frozen=True, eq=False)
class MemoryStore:
    """A victim memory: ``kind`` is "replay" or "kb"."""

    kind: str
    data: ReplayData | KnowledgeData

    def __post_init__(self):
        if self.kind == "replay":
            if not isinstance(self.data, ReplayData):
                raise StoreFormatError("replay store needs ReplayData")
        elif self.kind == "kb":
            if not isinstance(self.data, KnowledgeData):
                raise StoreFormatError("kb store needs KnowledgeData")
        else:
            raise StoreFormatError(f"unknown store kind {self.kind!r}")

    @property
    def element_count(self) -> int:
        return len(self.data)

    @property
    def embedding_dim(self) -> int | None:
        if self.kind == "kb":
            return int(self.data.embeddings.shape[1])
        return None

    @property
    def replay(self) -> ReplayData:
        if self.kind != "replay":
            raise TypeError("not a replay store")
        return self.data

    @property
    def kb(self) -> KnowledgeData:
        if self.kind != "kb":
            raise TypeError("not a kb store")
        return self.data


@dataclasses.dataclass(frozen=True, eq=False)
class Edit:
    """Additive change to one field of one existing record."""

    record_index: int
    field: str
    delta_values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "record_index", int(self.record_index))
        object.__setattr__(self, "delta_values", _frozen(np.atleast_1d(self.delta_values)))
        if self.record_index < 0:
            raise PerturbationError("record_index must be >= 0")
        if self.delta_values.ndim != 1:
            raise PerturbationError("delta_values must be 1-D")
        if not np.all(np.isfinite(self.delta_values)):
            raise PerturbationError("delta_values must be finite")


@dataclasses.dataclass(frozen=True, eq=False)
class Perturbation:
    """A covert attack on a memory store.

    mode "modify": ``edits`` only. mode "inject": ``injections`` only.
    The perturbation's continuous degrees of freedom are exposed by
    :meth:`free_vector` (edit values, or injected embeddings and value
    vectors concatenated per document); token ids stay discrete.
    """

    mode: str
    edits: tuple[Edit, ...] = ()
    injections: tuple[Document, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "edits", tuple(self.edits))
        object.__setattr__(self, "injections", tuple(self.injections))
        if self.mode not in VALID_MODES:
            raise PerturbationError(f"unknown mode {self.mode!r}")
        if self.mode == "modify" and self.injections:
            raise PerturbationError("modify-mode perturbation carries injections")
        if self.mode == "inject" and self.edits:
            raise PerturbationError("inject-mode perturbation carries edits")
        keys = [(e.record_index, e.field) for e in self.edits]
        if len(set(keys)) != len(keys):
            raise PerturbationError("duplicate (record_index, field) edits")
        for e in self.edits:
            if e.field not in REPLAY_FIELDS:
                raise PerturbationError(f"unknown edit field {e.field!r}")

    @classmethod
    def empty(cls, mode: str = "modify") -> "Perturbation":
        return cls(mode=mode)

    @property
    def n_edits(self) -> int:
        return len(self.edits)

    @property
    def n_injections(self) -> int:
        return len(self.injections)

    def free_vector(self) -> np.ndarray:
        """Flat float64 view of the continuous attack coordinates."""
        parts: list[np.ndarray] = []
        if self.mode == "modify":
            parts = [e.delta_values for e in self.edits]
        else:
            for doc in self.injections:
                parts.append(doc.embedding)
                parts.append(doc.value_vector)
        if not parts:
            return np.zeros(0, dtype=np.float64)
        return np.concatenate(parts).astype(np.float64)

    def with_free_vector(self, x: np.ndarray) -> "Perturbation":
        """Same structure, continuous coordinates replaced by ``x``."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.free_vector().size,):
            raise PerturbationError(
                f"free vector length {x.size} does not match perturbation"
            )
        pos = 0
        if self.mode == "modify":
            new_edits = []
            for e in self.edits:
                k = e.delta_values.size
                new_edits.append(
                    Edit(e.record_index, e.field, x[pos : pos + k])
                )
                pos += k
            return Perturbation(mode=self.mode, edits=tuple(new_edits))
        new_docs = []
        for doc in self.injections:
            d = doc.embedding.size
            dv = doc.value_vector.size
            new_docs.append(
                Document(
                    doc_id=doc.doc_id,
                    embedding=x[pos : pos + d],
                    value_vector=x[pos + d : pos + d + dv],
                    token_ids=doc.token_ids,
                    topic_cluster=doc.topic_cluster,
                )
            )
            pos += d + dv
        return Perturbation(mode=self.mode, injections=tuple(new_docs))


@dataclasses.dataclass(frozen=True)
class CovertnessBudget:
    """Feasible region for covert perturbations.

    ``rho_max`` caps the poisoned fraction of the store; ``linf_max`` and
    ``l2_max`` cap numeric edit magnitudes; ``dsem_max`` caps each injected
    document's semantic distance to its cluster; ``beta`` prices injection
    count in the covertness cost; ``p`` selects the edit-norm exponent.
    """

    rho_max: float = 0.01
    linf_max: float = 0.05
    l2_max: float = 0.1
    dsem_max: float = 0.15
    beta: float = 0.01
    p: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.rho_max <= 1.0:
            raise ValueError("rho_max must lie in [0, 1]")
        for name in ("linf_max", "l2_max", "dsem_max", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.p < 1.0:
            raise ValueError("p must be >= 1")

    def max_poisoned(self, element_count: int) -> int:
        # floor(rho * N) keeps both modes feasible: for injections the true
        # cap floor(rho N / (1 - rho)) is never smaller than this
        return int(np.floor(self.rho_max * element_count))


# ---------------------------------------------------------------------------
# core operations
# ---------------------------------------------------------------------------


def _check_compatible(memory: MemoryStore, delta: Perturbation) -> None:
    if delta.mode == "modify" and memory.kind != "replay":
        raise PerturbationError("modify-mode perturbations target replay stores")
    if delta.mode == "inject" and memory.kind != "kb":
        raise PerturbationError("inject-mode perturbations target kb stores")
    if delta.mode == "modify":
        n = memory.element_count
        d_obs = memory.replay.joint_obs.shape[1]
        for e in delta.edits:
            if e.record_index >= n:
                raise PerturbationError(
                    f"edit index {e.record_index} out of range for {n} records"
                )
            want = 1 if e.field == "reward" else d_obs
            if e.delta_values.size != want:
                raise PerturbationError(
                    f"edit on {e.field!r} needs {want} values, got {e.delta_values.size}"
                )
    else:
        d = memory.embedding_dim
        dv = memory.kb.values.shape[1]
        for doc in delta.injections:
            if doc.embedding.size != d or doc.value_vector.size != dv:
                raise PerturbationError("injection dims do not match the store")


def apply(memory: MemoryStore, delta: Perturbation) -> MemoryStore:
    """Return a new store with ``delta`` applied; the input is untouched.

    Edits add onto the named field. Injections are appended with fresh
    doc_ids and re-normalized embeddings (the store invariant, not a
    covertness projection).
    """
    _check_compatible(memory, delta)
    if delta.mode == "modify":
        r = memory.replay
        rewards = r.rewards.copy()
        obs = r.joint_obs.copy()
        for e in delta.edits:
            if e.field == "reward":
                rewards[e.record_index] += e.delta_values[0]
            else:
                obs[e.record_index] += e.delta_values
        return MemoryStore(
            kind="replay",
            data=ReplayData(
                joint_obs=obs,
                joint_actions=r.joint_actions,
                rewards=rewards,
                next_joint_obs=r.next_joint_obs,
                done=r.done,
            ),
        )

    kb = memory.kb
    if not delta.injections:
        return MemoryStore(kind="kb", data=kb)
    next_id = int(kb.doc_ids.max()) + 1 if len(kb) else 0
    embs = [kb.embeddings]
    vals = [kb.values]
    ids = list(kb.doc_ids.tolist())
    toks = list(kb.token_ids)
    topics = list(kb.topics.tolist())
    for j, doc in enumerate(delta.injections):
        e = np.asarray(doc.embedding, dtype=np.float64)
        nrm = np.linalg.norm(e)
        if nrm == 0 or not np.isfinite(nrm):
            raise PerturbationError("injected embedding must be nonzero and finite")
        embs.append((e / nrm)[None, :])
        vals.append(np.asarray(doc.value_vector, dtype=np.float64)[None, :])
        ids.append(next_id + j)
        toks.append(doc.token_ids)
        topics.append(doc.topic_cluster)
    return MemoryStore(
        kind="kb",
        data=KnowledgeData(
            doc_ids=np.array(ids, dtype=np.int64),
            embeddings=np.vstack(embs),
            values=np.vstack(vals),
            token_ids=tuple(toks),
            topics=np.array(topics, dtype=np.int64),
        ),
    )


def poison_rate(memory: MemoryStore, delta: Perturbation) -> float:
    """Fraction of the store that is malicious.

    modify: distinct records carrying a nonzero edit over the (unchanged)
    record count. inject: injected documents over the grown total, i.e.
    n / (element_count + n), the malicious share of the poisoned corpus.
    """
    if memory.element_count == 0:
        raise StoreFormatError("poison rate undefined for an empty store")
    if delta.mode == "inject":
        n = delta.n_injections
        return n / (memory.element_count + n)
    touched = len(
        {e.record_index for e in delta.edits if np.any(e.delta_values != 0.0)}
    )
    return touched / memory.element_count


def semantic_distances(memory: MemoryStore, delta: Perturbation) -> np.ndarray:
    """Per-injection distance 1 - max cosine to clean docs of the same cluster."""
    if delta.mode != "inject":
        raise PerturbationError("semantic distance applies to inject mode")
    kb = memory.kb
    out = np.zeros(delta.n_injections)
    for j, doc in enumerate(delta.injections):
        mask = kb.topics == doc.topic_cluster
        if not np.any(mask):
            raise UndefinedSemanticDistanceError(
                f"cluster {doc.topic_cluster} has no clean documents"
            )
        e = np.asarray(doc.embedding, dtype=np.float64)
        nrm = np.linalg.norm(e)
        if nrm == 0:
            raise PerturbationError("zero embedding has no semantic distance")
        cos = kb.embeddings[mask] @ (e / nrm)
        out[j] = 1.0 - float(cos.max())
    return out


def covertness_cost(
    memory: MemoryStore, delta: Perturbation, budget: CovertnessBudget
) -> float:
    """Scalar covertness penalty R(delta).

    modify: sum of |edit value|^p. inject: mean semantic distance to the
    nearest same-cluster clean document plus ``beta`` per injected document.
    Empty perturbations cost exactly 0.
    """
    if delta.mode == "modify":
        v = delta.free_vector()
        if v.size == 0:
            return 0.0
        return float(np.sum(np.abs(v) ** budget.p))
    if delta.n_injections == 0:
        return 0.0
    d = semantic_distances(memory, delta)
    return float(d.mean() + budget.beta * delta.n_injections)


def covertness_grad(
    memory: MemoryStore, delta: Perturbation, budget: CovertnessBudget
) -> np.ndarray:
    """Gradient of :func:`covertness_cost` over the perturbation's free
    coordinates (a subgradient where the cost is only piecewise smooth)."""
    if delta.mode == "modify":
        v = delta.free_vector()
        if v.size == 0:
            return v
        return budget.p * np.abs(v) ** (budget.p - 1.0) * np.sign(v)

    n = delta.n_injections
    out = np.zeros(delta.free_vector().size)
    if n == 0:
        return out
    kb = memory.kb
    pos = 0
    for doc in delta.injections:
        d = doc.embedding.size
        dv = doc.value_vector.size
        mask = kb.topics == doc.topic_cluster
        if not np.any(mask):
            raise UndefinedSemanticDistanceError(
                f"cluster {doc.topic_cluster} has no clean documents"
            )
        e = np.asarray(doc.embedding, dtype=np.float64)
        nrm = np.linalg.norm(e)
        if nrm == 0:
            raise PerturbationError("zero embedding has no semantic distance")
        cos_all = kb.embeddings[mask] @ (e / nrm)
        c_star = kb.embeddings[mask][int(np.argmax(cos_all))]
        cos = float(cos_all.max())
        # d/de of (1 - cos(e, c*)) with the normalization folded in
        out[pos : pos + d] = -(c_star / nrm - cos * e / nrm**2) / n
        pos += d + dv
    return out


def perturbation_norms(delta: Perturbation) -> tuple[float, float]:
    """(L-infinity, L2) of the numeric edit vector; zeros for inject mode."""
    if delta.mode != "modify":
        return 0.0, 0.0
    v = delta.free_vector()
    if v.size == 0:
        return 0.0, 0.0
    return float(np.max(np.abs(v))), float(np.linalg.norm(v))


def _record_scores(
    delta: Perturbation, saliency: np.ndarray | None
) -> dict[int, float]:
    """Aggregate per-record importance from a free-vector-aligned saliency."""
    if saliency is None:
        saliency = np.abs(delta.free_vector())
    else:
        saliency = np.abs(np.asarray(saliency, dtype=np.float64))
        if saliency.shape != (delta.free_vector().size,):
            raise PerturbationError("saliency length does not match free vector")
    scores: dict[int, float] = {}
    pos = 0
    for e in delta.edits:
        k = e.delta_values.size
        scores[e.record_index] = scores.get(e.record_index, 0.0) + float(
            saliency[pos : pos + k].sum()
        )
        pos += k
    return scores


def project(
    delta: Perturbation,
    budget: CovertnessBudget,
    saliency: np.ndarray | None = None,
    *,
    memory: MemoryStore,
) -> Perturbation:
    """Map ``delta`` onto the budget-feasible set.

    modify: clip entries to [-linf_max, linf_max], rescale the whole edit
    vector to l2_max if it overshoots, then keep at most
    floor(rho_max * element_count) records ranked by saliency (absolute edit
    magnitude when no saliency is given) and drop all-zero edits. inject:
    keep at most the same count of injections, re-normalize embeddings, and
    drop any injection whose semantic distance exceeds dsem_max.

    Idempotent. If everything is projected away the empty perturbation is
    returned after a warning.
    """
    k_max = budget.max_poisoned(memory.element_count)

    if delta.mode == "modify":
        v = delta.free_vector()
        if v.size:
            v = np.clip(v, -budget.linf_max, budget.linf_max)
            nrm = np.linalg.norm(v)
            if nrm > budget.l2_max and nrm > 0:
                v = v * (budget.l2_max / nrm)
        clipped = delta.with_free_vector(v) if v.size else delta
        scores = _record_scores(clipped, saliency)
        nonzero = [
            e for e in clipped.edits if np.any(e.delta_values != 0.0)
        ]
        keep_records = {
            idx
            for idx, _ in sorted(
                ((i, s) for i, s in scores.items()), key=lambda t: (-t[1], t[0])
            )[:k_max]
        }
        kept = tuple(e for e in nonzero if e.record_index in keep_records)
        if not kept and nonzero:
            warnings.warn("projection removed every edit", stacklevel=2)
        return Perturbation(mode="modify", edits=kept)

    docs = list(delta.injections[:k_max])
    if len(delta.injections) > k_max:
        warnings.warn(
            f"projection dropped {len(delta.injections) - k_max} injections over budget",
            stacklevel=2,
        )
    normed: list[Document] = []
    for doc in docs:
        e = np.asarray(doc.embedding, dtype=np.float64)
        nrm = np.linalg.norm(e)
        if nrm == 0:
            continue
        if abs(nrm - 1.0) <= 1e-12:
            # dividing by a norm one ulp away from 1 would perturb bits and
            # break project(project(d)) = project(d)
            normed.append(doc)
            continue
        normed.append(
            Document(
                doc_id=doc.doc_id,
                embedding=e / nrm,
                value_vector=doc.value_vector,
                token_ids=doc.token_ids,
                topic_cluster=doc.topic_cluster,
            )
        )
    kept_docs = []
    for doc in normed:
        trial = Perturbation(mode="inject", injections=(doc,))
        if semantic_distances(memory, trial)[0] <= budget.dsem_max + 1e-12:
            kept_docs.append(doc)
        else:
            warnings.warn(
                "projection dropped an injection exceeding the semantic budget",
                stacklevel=2,
            )
    if not kept_docs and delta.n_injections:
        warnings.warn("projection removed every injection", stacklevel=2)
    return Perturbation(mode="inject", injections=tuple(kept_docs))


def full_edit_template(memory: MemoryStore, field: str = "reward") -> Perturbation:
    """Zero-valued edit on every record: the dense starting point for
    gradient attacks (projection later sparsifies it)."""
    if memory.kind != "replay":
        raise PerturbationError("edit templates target replay stores")
    d_obs = memory.replay.joint_obs.shape[1]
    width = 1 if field == "reward" else d_obs
    edits = tuple(
        Edit(i, field, np.zeros(width)) for i in range(memory.element_count)
    )
    return Perturbation(mode="modify", edits=edits)


def align_free_vector(template: Perturbation, delta: Perturbation) -> np.ndarray:
    """Scatter ``delta``'s values onto ``template``'s free coordinates.

    ``delta`` is typically a projected (sparsified) version of the template:
    coordinates the projection zeroed or dropped come back as zeros, so
    ``template.with_free_vector(result)`` materializes to the same store as
    ``delta`` while exposing every candidate coordinate to gradients.
    """
    if delta.mode != template.mode:
        raise PerturbationError("template and delta modes differ")
    if template.mode == "modify":
        lookup = {(e.record_index, e.field): e.delta_values for e in delta.edits}
        parts = []
        for e in template.edits:
            v = lookup.get((e.record_index, e.field))
            if v is None:
                parts.append(np.zeros_like(e.delta_values))
            elif v.shape != e.delta_values.shape:
                raise PerturbationError("edit width mismatch against template")
            else:
                parts.append(np.asarray(v, dtype=np.float64))
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts)
    # injections: match by position (projection preserves order); documents
    # beyond the surviving prefix keep their template coordinates
    parts = []
    for j, doc in enumerate(template.injections):
        src = delta.injections[j] if j < delta.n_injections else doc
        parts.append(np.asarray(src.embedding, dtype=np.float64).ravel())
        parts.append(np.asarray(src.value_vector, dtype=np.float64).ravel())
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_store(memory: MemoryStore, path: str | Path) -> None:
    """Write a store as JSON lines: one header line, then one record per line."""
    path = Path(path)
    with path.open("w") as fh:
        header = {
            "kind": memory.kind,
            "element_count": memory.element_count,
            "embedding_dim": memory.embedding_dim,
        }
        fh.write(json.dumps(header) + "\n")
        if memory.kind == "replay":
            r = memory.replay
            for i in range(len(r)):
                fh.write(
                    json.dumps(
                        {
                            "joint_obs": r.joint_obs[i].tolist(),
                            "joint_action": int(r.joint_actions[i]),
                            "reward": float(r.rewards[i]),
                            "next_joint_obs": r.next_joint_obs[i].tolist(),
                            "done": bool(r.done[i]),
                        }
                    )
                    + "\n"
                )
        else:
            kb = memory.kb
            for i in range(len(kb)):
                fh.write(
                    json.dumps(
                        {
                            "doc_id": int(kb.doc_ids[i]),
                            "embedding": kb.embeddings[i].tolist(),
                            "value_vector": kb.values[i].tolist(),
                            "token_ids": list(kb.token_ids[i]),
                            "topic_cluster": int(kb.topics[i]),
                        }
                    )
                    + "\n"
                )


def load_store(path: str | Path) -> MemoryStore:
    """Inverse of :func:`save_store`; validates the header against the body."""
    path = Path(path)
    with path.open() as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise StoreFormatError("empty store file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise StoreFormatError(f"unreadable header: {exc}") from exc
    kind = header.get("kind")
    if kind not in ("replay", "kb"):
        raise StoreFormatError(f"unknown kind in header: {kind!r}")
    records = [json.loads(ln) for ln in lines[1:]]
    if header.get("element_count") != len(records):
        raise StoreFormatError(
            f"header claims {header.get('element_count')} records, file has {len(records)}"
        )
    if kind == "replay":
        data = ReplayData(
            joint_obs=np.array([r["joint_obs"] for r in records], dtype=np.float64),
            joint_actions=np.array([r["joint_action"] for r in records]),
            rewards=np.array([r["reward"] for r in records], dtype=np.float64),
            next_joint_obs=np.array(
                [r["next_joint_obs"] for r in records], dtype=np.float64
            ),
            done=np.array([r["done"] for r in records], dtype=bool),
        )
        return MemoryStore(kind="replay", data=data)
    emb = np.array([r["embedding"] for r in records], dtype=np.float64)
    if records and header.get("embedding_dim") != emb.shape[1]:
        raise StoreFormatError("embedding_dim header does not match records")
    data = KnowledgeData(
        doc_ids=np.array([r["doc_id"] for r in records], dtype=np.int64),
        embeddings=emb,
        values=np.array([r["value_vector"] for r in records], dtype=np.float64),
        token_ids=tuple(tuple(r["token_ids"]) for r in records),
        topics=np.array([r["topic_cluster"] for r in records], dtype=np.int64),
    )
    return MemoryStore(kind="kb", data=data)


def perturbation_to_json(delta: Perturbation) -> dict:
    return {
        "mode": delta.mode,
        "edits": [
            {
                "record_index": e.record_index,
                "field": e.field,
                "delta_values": e.delta_values.tolist(),
            }
            for e in delta.edits
        ],
        "injections": [
            {
                "embedding": d.embedding.tolist(),
                "value_vector": d.value_vector.tolist(),
                "token_ids": list(d.token_ids),
                "topic_cluster": d.topic_cluster,
            }
            for d in delta.injections
        ],
    }


def perturbation_from_json(obj: dict) -> Perturbation:
    mode = obj.get("mode")
    if mode not in VALID_MODES:
        raise PerturbationError(f"unknown mode {mode!r}")
    edits = tuple(
        Edit(e["record_index"], e["field"], np.array(e["delta_values"]))
        for e in obj.get("edits", [])
    )
    injections = tuple(
        Document(
            doc_id=-1,
            embedding=np.array(d["embedding"]),
            value_vector=np.array(d["value_vector"]),
            token_ids=tuple(d["token_ids"]),
            topic_cluster=d["topic_cluster"],
        )
        for d in obj.get("injections", [])
    )
    return Perturbation(mode=mode, edits=edits, injections=injections)


def save_perturbation(delta: Perturbation, path: str | Path) -> None:
    Path(path).write_text(json.dumps(perturbation_to_json(delta), indent=2) + "\n")


def load_perturbation(path: str | Path) -> Perturbation:
    return perturbation_from_json(json.loads(Path(path).read_text()))
