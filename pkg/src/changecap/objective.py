"""Contrastive and captioning objectives with false-negative correction.

Caption similarity drives the correction: in-batch pairs with different
labels whose caption embeddings exceed a threshold are either excluded from
the contrastive loss (FNE) or relabeled positive (FNA).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DegenerateBatchError
from .vocab import tokenize

NEGATIVE, POSITIVE, EXCLUDED = 0, 1, 2

FN_MODES = ("none", "fne", "fna")

STOPWORDS = frozenset(
    "a an the at on in of to and or is are was were has have had been be "
    "there it its this that with across between no not".split()
)


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.01
    theta: float = 1.0
    fn_mode: str = "none"
    contrastive_weight: float = 1.0  # lambda in the joint loss

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError("tau must be > 0")
        if not 0.0 < self.theta <= 1.0:
            raise ConfigurationError("theta must be in (0, 1]")
        if self.fn_mode not in FN_MODES:
            raise ConfigurationError(f"fn_mode must be one of {FN_MODES}")
        if self.contrastive_weight < 0:
            raise ConfigurationError("contrastive weight must be >= 0")


class BagOfWordsSimilarity:
    """Deterministic caption embedder: L2-normalized content-word counts.

    Verbatim-identical texts get cosine exactly 1; texts with disjoint
    content words get cosine exactly 0. Stand-in for a learned sentence
    embedder; any object with an embed(text) -> unit vector method works.
    """

    def __init__(self, corpus):
        words = set()
        for text in corpus:
            words.update(self.content_words(text))
        self.word_index = {w: i for i, w in enumerate(sorted(words))}
        self.dim = max(1, len(self.word_index))
        self._cache: dict[str, np.ndarray] = {}

    @staticmethod
    def content_words(text):
        return [t for t in tokenize(text) if t not in STOPWORDS]

    def embed(self, text: str) -> np.ndarray:
        vec = self._cache.get(text)
        if vec is not None:
            return vec
        counts = np.zeros(self.dim)
        for w in self.content_words(text):
            idx = self.word_index.get(w)
            if idx is not None:
                counts[idx] += 1.0
        norm = np.linalg.norm(counts)
        if norm > 0:
            counts /= norm
        self._cache[text] = counts
        return counts

    def embed_all(self, texts) -> np.ndarray:
        return np.stack([self.embed(t) for t in texts])


def build_pair_labels(labels, t_vectors, theta: float, fn_mode: str = "none") -> np.ndarray:
    """N x N status matrix over (image i, caption j) pairs.

    Base rule: positive iff labels match. FNE marks detected false negatives
    (label mismatch but caption similarity >= theta) excluded; FNA marks them
    positive.
    """
    if fn_mode not in FN_MODES:
        raise ConfigurationError(f"fn_mode must be one of {FN_MODES}")
    labels = np.asarray(labels)
    t = np.asarray(t_vectors, dtype=np.float64)
    if labels.shape[0] != t.shape[0]:
        raise ConfigurationError("labels and caption embeddings must have equal length")
    same_label = labels[:, None] == labels[None, :]
    status = np.where(same_label, POSITIVE, NEGATIVE)
    if fn_mode != "none":
        sim = t @ t.T
        detected = ~same_label & (sim >= theta)
        status[detected] = EXCLUDED if fn_mode == "fne" else POSITIVE
    return status


def info_nce(e, s, status, tau: float):
    """Symmetric multi-positive InfoNCE with exclusions.

    e, s: (N, D) visual / textual embeddings (normalized here); status: N x N
    matrix from build_pair_labels. Per anchor the log-term is averaged over
    its positives; excluded pairs leave both numerator and denominator.
    """
    if tau <= 0:
        raise ConfigurationError("tau must be > 0")
    status = torch.as_tensor(np.asarray(status), device=e.device)
    pos = status == POSITIVE
    exc = status == EXCLUDED
    if not bool(pos.any(dim=1).all()) or not bool(pos.any(dim=0).all()):
        raise DegenerateBatchError("a batch row/column has no positive pair")
    if not bool((~exc).any(dim=1).all()) or not bool((~exc).any(dim=0).all()):
        raise DegenerateBatchError("a batch row/column has an all-excluded denominator")

    e = F.normalize(e, dim=-1)
    s = F.normalize(s, dim=-1)
    sim = e @ s.T / tau
    masked = sim.masked_fill(exc, float("-inf"))

    log_z_rows = torch.logsumexp(masked, dim=1)
    pos_f = pos.to(sim.dtype)
    mean_pos_rows = (sim * pos_f).sum(dim=1) / pos_f.sum(dim=1)
    i2t = log_z_rows - mean_pos_rows

    log_z_cols = torch.logsumexp(masked, dim=0)
    mean_pos_cols = (sim * pos_f).sum(dim=0) / pos_f.sum(dim=0)
    t2i = log_z_cols - mean_pos_cols

    return (i2t.sum() + t2i.sum()) / sim.shape[0]


def caption_loss(logits, targets, pad_id: int = 0):
    """Mean token NLL with teacher forcing; pad positions masked out."""
    targets = torch.as_tensor(targets, device=logits.device)
    if not bool((targets != pad_id).any()):
        raise DegenerateBatchError("caption loss over an all-pad target")
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=pad_id
    )


def total_loss(l_cap, l_con, contrastive_weight: float):
    if contrastive_weight < 0:
        raise ConfigurationError("contrastive weight must be >= 0")
    return l_cap + contrastive_weight * l_con
