"""Retrieval metrics with threshold-merged relevance, plus caption metrics.

Retrieval queries are each item's first caption; relevance for a query is
its own pair plus every pair whose query caption embedding clears the same
similarity threshold used for false-negative detection during training.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError

# ---------------------------------------------------------------------------
# Ranking metrics


def precision_at_k(ranked_ids, relevant, k: int) -> float:
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    hits = sum(1 for r in list(ranked_ids)[:k] if r in relevant)
    return 100.0 * hits / k


def recall_at_k(ranked_ids, relevant, k: int) -> float:
    if not relevant:
        raise ConfigurationError("relevant set must be non-empty")
    hits = sum(1 for r in list(ranked_ids)[:k] if r in relevant)
    return 100.0 * hits / len(relevant)


def mrr_at_k(ranked_lists, relevance_sets, k: int) -> float:
    if not ranked_lists:
        raise ConfigurationError("need at least one query")
    total = 0.0
    for ranked, relevant in zip(ranked_lists, relevance_sets):
        for pos, r in enumerate(list(ranked)[:k], start=1):
            if r in relevant:
                total += 1.0 / pos
                break
    return 100.0 * total / len(ranked_lists)


# ---------------------------------------------------------------------------
# Caption metrics (corpus-level, scores x100)


def _ngram_counts(tokens, n):
    counts = Counter()
    for i in range(len(tokens) - n + 1):
        counts[tuple(tokens[i : i + n])] += 1
    return counts


def bleu_n(candidates, reference_sets, n: int) -> float:
    """Corpus BLEU-n: clipped modified precision, geometric mean over 1..n,
    brevity penalty against the closest reference length."""
    if n not in (1, 2, 3, 4):
        raise ConfigurationError("BLEU order must be in 1..4")
    correct = [0] * n
    guess = [0] * n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, reference_sets):
        c_tok = cand.split()
        cand_len += len(c_tok)
        if refs:
            ref_len += min((len(r.split()) for r in refs), key=lambda L: (abs(L - len(c_tok)), L))
        for k in range(1, n + 1):
            c_counts = _ngram_counts(c_tok, k)
            max_ref = Counter()
            for ref in refs:
                for g, c in _ngram_counts(ref.split(), k).items():
                    max_ref[g] = max(max_ref[g], c)
            guess[k - 1] += max(0, len(c_tok) - k + 1)
            correct[k - 1] += sum(min(c, max_ref[g]) for g, c in c_counts.items())
    if cand_len == 0 or any(c == 0 for c in correct) or any(g == 0 for g in guess):
        return 0.0
    log_prec = sum(math.log(c / g) for c, g in zip(correct, guess)) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return 100.0 * bp * math.exp(log_prec)


def _lcs_len(a, b):
    m, n = len(a), len(b)
    dp = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            if a[i - 1] == b[j - 1]:
                dp[i][j] = dp[i - 1][j - 1] + 1
            else:
                dp[i][j] = max(dp[i - 1][j], dp[i][j - 1])
    return dp[m][n]


def rouge_l_single(candidate: str, references, beta: float = 1.2) -> float:
    """LCS F-measure; best precision and best recall taken over references."""
    c_tok = candidate.split()
    if not c_tok or not references:
        return 0.0
    precs, recs = [], []
    for ref in references:
        r_tok = ref.split()
        if not r_tok:
            continue
        lcs = _lcs_len(c_tok, r_tok)
        precs.append(lcs / len(c_tok))
        recs.append(lcs / len(r_tok))
    if not precs:
        return 0.0
    p, r = max(precs), max(recs)
    if p == 0 or r == 0:
        return 0.0
    return 100.0 * (1 + beta**2) * p * r / (r + beta**2 * p)


def rouge_l(candidates, reference_sets) -> float:
    scores = [rouge_l_single(c, refs) for c, refs in zip(candidates, reference_sets)]
    return float(np.mean(scores)) if scores else 0.0


def cider(candidates, reference_sets, n_max: int = 4, sigma: float = 6.0) -> float:
    """CIDEr-D x100: clipped TF-IDF n-gram cosine (n=1..4) with a gaussian
    length penalty; IDF from the reference corpus."""
    candidates = list(candidates)
    reference_sets = list(reference_sets)
    if len(candidates) < 2:
        raise ConfigurationError("CIDEr needs a corpus of at least 2 items")
    doc_freq: Counter = Counter()
    for refs in reference_sets:
        seen = set()
        for ref in refs:
            toks = ref.split()
            for k in range(1, n_max + 1):
                seen.update(_ngram_counts(toks, k))
        doc_freq.update(seen)
    log_corpus = math.log(len(reference_sets))

    def tfidf_vec(tokens):
        vecs = [defaultdict(float) for _ in range(n_max)]
        norms = [0.0] * n_max
        for k in range(1, n_max + 1):
            for g, tf in _ngram_counts(tokens, k).items():
                w = tf * (log_corpus - math.log(max(1.0, doc_freq[g])))
                vecs[k - 1][g] = w
                norms[k - 1] += w * w
        return vecs, [math.sqrt(x) for x in norms], len(tokens)

    scores = []
    for cand, refs in zip(candidates, reference_sets):
        v_c, n_c, len_c = tfidf_vec(cand.split())
        acc = np.zeros(n_max)
        for ref in refs:
            v_r, n_r, len_r = tfidf_vec(ref.split())
            penalty = math.exp(-((len_c - len_r) ** 2) / (2 * sigma**2))
            for k in range(n_max):
                dot = sum(min(w, v_r[k][g]) * v_r[k][g] for g, w in v_c[k].items())
                if n_c[k] > 0 and n_r[k] > 0:
                    acc[k] += penalty * dot / (n_c[k] * n_r[k])
        scores.append(10.0 * float(np.mean(acc)) / max(1, len(refs)))
    return 100.0 * float(np.mean(scores))


def caption_exact_match(candidates, reference_sets) -> int:
    return sum(1 for c, refs in zip(candidates, reference_sets) if c in refs)


# ---------------------------------------------------------------------------
# Model evaluation


@dataclass
class EvalReport:
    """Retrieval and caption metrics, all x100."""

    p_at_k: dict = field(default_factory=dict)
    r_at_k: dict = field(default_factory=dict)
    mrr_at_k: dict = field(default_factory=dict)
    bleu: dict = field(default_factory=dict)
    rouge_l: float | None = None
    cider: float | None = None

    def lines(self):
        out = []
        for k in sorted(self.p_at_k):
            out.append(f"P@{k} {self.p_at_k[k]:.2f}")
            out.append(f"R@{k} {self.r_at_k[k]:.2f}")
            out.append(f"MRR@{k} {self.mrr_at_k[k]:.2f}")
        for n in sorted(self.bleu):
            out.append(f"BLEU-{n} {self.bleu[n]:.2f}")
        if self.rouge_l is not None:
            out.append(f"ROUGE-L {self.rouge_l:.2f}")
        if self.cider is not None:
            out.append(f"CIDEr {self.cider:.2f}")
        return out

    def __str__(self):
        return "\n".join(self.lines())


def _image_tensors(items, device, dtype):
    before = torch.as_tensor(
        np.stack([it.pair.before for it in items]), dtype=dtype, device=device
    )
    after = torch.as_tensor(np.stack([it.pair.after for it in items]), dtype=dtype, device=device)
    return before, after


@torch.no_grad()
def embed_pairs(model, items, batch_size: int = 32):
    """Normalized E_con rows for every item, in item order."""
    model.eval()
    dtype = next(model.parameters()).dtype
    device = next(model.parameters()).device
    chunks = []
    for i in range(0, len(items), batch_size):
        before, after = _image_tensors(items[i : i + batch_size], device, dtype)
        _, e_con = model.encoder(before, after)
        chunks.append(torch.nn.functional.normalize(e_con, dim=-1))
    return torch.cat(chunks, dim=0)


@torch.no_grad()
def embed_captions(model, vocab, texts, batch_size: int = 64):
    """Normalized unimodal S_end rows for the given caption texts."""
    model.eval()
    device = next(model.parameters()).device
    chunks = []
    for i in range(0, len(texts), batch_size):
        batch = texts[i : i + batch_size]
        ids = np.stack([vocab.encode(t, model.decoder.config.max_len) for t in batch])
        ids_t = torch.as_tensor(ids, device=device)
        lengths = (ids_t != 0).sum(dim=1)
        _, s_end = model.decoder.unimodal_forward(model.decoder.embed_tokens(ids_t), lengths)
        chunks.append(torch.nn.functional.normalize(s_end, dim=-1))
    return torch.cat(chunks, dim=0)


def relevance_sets(items, provider, theta: float):
    """Per query caption: own pair plus pairs whose query caption clears theta."""
    texts = [it.captions[0] for it in items]
    t = provider.embed_all(texts)
    sims = t @ t.T
    ids = [it.pair_id for it in items]
    sets = []
    for i in range(len(items)):
        rel = {ids[i]}
        rel.update(ids[j] for j in np.nonzero(sims[i] >= theta)[0])
        sets.append(rel)
    return sets


def rank_pairs(sim_row, pair_ids):
    """Descending similarity, ties broken by ascending pair_id."""
    order = np.lexsort((pair_ids, -sim_row))
    return [int(pair_ids[j]) for j in order]


def evaluate_retrieval(model, items, vocab, provider, theta: float, ks=(1, 5)) -> EvalReport:
    e = embed_pairs(model, items)
    texts = [it.captions[0] for it in items]
    s = embed_captions(model, vocab, texts)
    sims = (s @ e.T).cpu().numpy()
    pair_ids = np.asarray([it.pair_id for it in items])
    ranked = [rank_pairs(sims[i], pair_ids) for i in range(len(items))]
    rels = relevance_sets(items, provider, theta)

    report = EvalReport()
    for k in ks:
        report.p_at_k[k] = float(np.mean([precision_at_k(r, rel, k) for r, rel in zip(ranked, rels)]))
        report.r_at_k[k] = float(np.mean([recall_at_k(r, rel, k) for r, rel in zip(ranked, rels)]))
        report.mrr_at_k[k] = mrr_at_k(ranked, rels, k)
    return report


@torch.no_grad()
def generate_captions(model, vocab, items, batch_size: int = 32):
    model.eval()
    dtype = next(model.parameters()).dtype
    device = next(model.parameters()).device
    captions = []
    for i in range(0, len(items), batch_size):
        before, after = _image_tensors(items[i : i + batch_size], device, dtype)
        e_cap, _ = model.encoder(before, after)
        ids = model.decoder.generate(e_cap)
        captions.extend(vocab.decode(row) for row in ids)
    return captions


def evaluate_captioning(model, items, vocab) -> EvalReport:
    candidates = generate_captions(model, vocab, items)
    references = [it.captions for it in items]
    report = EvalReport()
    for n in (1, 2, 3, 4):
        report.bleu[n] = bleu_n(candidates, references, n)
    report.rouge_l = rouge_l(candidates, references)
    report.cider = cider(candidates, references)
    return report
