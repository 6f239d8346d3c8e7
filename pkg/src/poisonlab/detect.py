"""Evaluation-time poisoning detectors.

Three heuristics a defender might run over a memory store: an L-infinity
comparison against a trusted snapshot, a semantic-similarity filter for
injected documents, and a bigram-perplexity filter over document tokens.
They only ever produce verdicts; nothing here feeds the attacker gradients.
Thresholds are calibrated so the unmodified clean store always passes.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .memory import Document, MemoryStore, Perturbation


class DetectorInputError(ValueError):
    """Detector preconditions violated (store mismatch, empty tokens)."""


@dataclasses.dataclass(frozen=True)
class DetectorVerdict:
    detector_name: str
    flagged: bool
    score: float
    threshold: float

    def to_json(self) -> dict:
        return {
            "detector_name": self.detector_name,
            "flagged": bool(self.flagged),
            "score": float(self.score),
            "threshold": float(self.threshold),
        }


def linf_detector(
    clean: MemoryStore, poisoned: MemoryStore, eps_detect: float
) -> DetectorVerdict:
    """Max absolute per-field deviation between two aligned stores.

    Flags iff the deviation reaches ``eps_detect``. Inject-mode changes are
    outside this detector's model; stores must share kind and length.
    """
    if clean.kind != poisoned.kind:
        raise DetectorInputError("store kinds differ")
    if clean.element_count != poisoned.element_count:
        raise DetectorInputError("stores not aligned record-for-record")
    if clean.kind == "replay":
        a, b = clean.replay, poisoned.replay
        pairs = [
            (a.rewards, b.rewards),
            (a.joint_obs, b.joint_obs),
            (a.next_joint_obs, b.next_joint_obs),
            (a.joint_actions.astype(float), b.joint_actions.astype(float)),
        ]
    else:
        a, b = clean.kb, poisoned.kb
        pairs = [(a.embeddings, b.embeddings), (a.values, b.values)]
    score = 0.0
    for x, y in pairs:
        if x.size:
            score = max(score, float(np.max(np.abs(x - y))))
    return DetectorVerdict(
        detector_name="linf_detector",
        flagged=score >= eps_detect,
        score=score,
        threshold=float(eps_detect),
    )


def semantic_filter(doc: Document, corpus: MemoryStore, tau: float) -> DetectorVerdict:
    """Max cosine similarity of one document against a trusted corpus.

    Flags iff the best similarity falls below ``tau``: content unlike
    anything known-good is suspicious.
    """
    data = corpus.kb
    if len(data) == 0:
        raise DetectorInputError("empty reference corpus")
    e = np.asarray(doc.embedding, dtype=np.float64)
    n = np.linalg.norm(e)
    if n == 0:
        raise DetectorInputError("zero-norm document embedding")
    score = float(np.max(data.embeddings @ (e / n)))
    return DetectorVerdict(
        detector_name="semantic_filter",
        flagged=score < tau,
        score=score,
        threshold=float(tau),
    )


class BigramModel:
    """Add-one-smoothed bigram language model over a fixed vocabulary.

    The first token of a sequence conditions on a dedicated start state.
    Immutable after fitting; safe to share across threads.
    """

    def __init__(self, vocab_size: int, counts: np.ndarray):
        if counts.shape != (vocab_size + 1, vocab_size):
            raise ValueError("counts shape must be (vocab_size+1, vocab_size)")
        self.vocab_size = vocab_size
        self._counts = counts.astype(np.float64)
        self._counts.setflags(write=False)
        totals = self._counts.sum(axis=1, keepdims=True)
        self._log_prob = np.log(self._counts + 1.0) - np.log(totals + vocab_size)
        self._log_prob.setflags(write=False)

    @classmethod
    def fit(cls, corpus: MemoryStore, vocab_size: int) -> "BigramModel":
        counts = np.zeros((vocab_size + 1, vocab_size))
        for seq in corpus.kb.token_ids:
            prev = vocab_size  # start state
            for tok in seq:
                if not 0 <= tok < vocab_size:
                    raise DetectorInputError("token id outside vocabulary")
                counts[prev, tok] += 1
                prev = tok
        return cls(vocab_size, counts)

    def log_likelihood(self, token_ids) -> float:
        toks = list(token_ids)
        if not toks:
            raise DetectorInputError("empty token sequence")
        prev = self.vocab_size
        total = 0.0
        for tok in toks:
            if not 0 <= tok < self.vocab_size:
                raise DetectorInputError("token id outside vocabulary")
            total += self._log_prob[prev, tok]
            prev = tok
        return total

    def perplexity(self, token_ids) -> float:
        toks = list(token_ids)
        return math.exp(-self.log_likelihood(toks) / len(toks))


def perplexity_filter(
    token_ids,
    corpus_lm: BigramModel,
    baseline_ppl: float,
    slack: float = 0.10,
) -> DetectorVerdict:
    """Flags token sequences whose perplexity exceeds baseline by > slack."""
    if baseline_ppl <= 0:
        raise DetectorInputError("baseline perplexity must be positive")
    score = corpus_lm.perplexity(token_ids)
    threshold = baseline_ppl * (1.0 + slack)
    return DetectorVerdict(
        detector_name="perplexity_filter",
        flagged=score > threshold,
        score=score,
        threshold=threshold,
    )


def baseline_perplexity(lm: BigramModel, corpus: MemoryStore) -> float:
    """Highest clean-document perplexity: the loosest threshold anchor that
    still never flags the clean corpus itself."""
    return max(lm.perplexity(seq) for seq in corpus.kb.token_ids)


def evaluate_detectors(
    clean: MemoryStore,
    poisoned: MemoryStore,
    delta: Perturbation,
    *,
    eps_detect: float = 0.1,
    tau: float = 0.85,
    slack: float = 0.10,
    lm: BigramModel | None = None,
    baseline_ppl: float | None = None,
    vocab_size: int | None = None,
) -> tuple[DetectorVerdict, ...]:
    """All detectors applicable to one perturbation, per injected doc.

    Modify-mode attacks face the store-deviation detector; injections face
    the semantic filter and the perplexity filter on each new document.
    """
    if delta.mode == "modify":
        return (linf_detector(clean, poisoned, eps_detect),)
    verdicts = []
    n_clean = clean.element_count
    injected = [d for d in poisoned.kb.documents() if d.doc_id >= n_clean]
    if lm is None:
        if vocab_size is None:
            vocab_size = 1 + max(
                (max(seq) if seq else 0) for seq in clean.kb.token_ids
            )
        lm = BigramModel.fit(clean, vocab_size)
    if baseline_ppl is None:
        baseline_ppl = baseline_perplexity(lm, clean)
    for j, doc in enumerate(injected):
        sem = semantic_filter(doc, clean, tau)
        ppl = perplexity_filter(doc.token_ids, lm, baseline_ppl, slack)
        verdicts.append(
            dataclasses.replace(sem, detector_name=f"semantic_filter#{j}")
        )
        verdicts.append(
            dataclasses.replace(ppl, detector_name=f"perplexity_filter#{j}")
        )
    return tuple(verdicts)
