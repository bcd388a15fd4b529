"""Joint training loop: AdamW with linear warmup, optional epoch-wise global
hard-negative mining, best-validation-loss checkpointing."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import evalkit
from .errors import ConfigurationError
from .model import ChangeCapModel, ModelConfig, save_checkpoint
from .objective import (
    BagOfWordsSimilarity,
    LossConfig,
    build_pair_labels,
    caption_loss,
    info_nce,
    total_loss,
)
from .synthdata import make_batches
from .vocab import PAD, build_vocab


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    target_lr: float = 1e-4
    warmup_fraction: float = 0.05
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    hard_negatives: int = 0  # 0 = off, otherwise negatives mined per anchor
    vocab_min_freq: int = 5
    fixed_caption_index: int | None = None  # debug/overfit aid; None = sample per epoch
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")


def lr_schedule(step: int, total_steps: int, target_lr: float, warmup_fraction: float) -> float:
    """Linear ramp 0 -> target_lr over the warmup steps, constant afterwards."""
    if not 0 <= step <= total_steps:
        raise ConfigurationError("step must be in [0, total_steps]")
    warmup_steps = max(1, int(round(warmup_fraction * total_steps)))
    if step >= warmup_steps:
        return target_lr
    return target_lr * step / warmup_steps


def mine_hard_negatives(model, items, vocab, provider, theta: float, m: int):
    """Exhaustive global mining: per anchor caption, the m most-similar image
    pairs that are not relevant under threshold-merged relevance."""
    if m < 1:
        raise ConfigurationError("hard negative count must be >= 1")
    if m >= len(items):
        raise ConfigurationError("hard negative count must be smaller than the dataset")
    e = evalkit.embed_pairs(model, items)
    s = evalkit.embed_captions(model, vocab, [it.captions[0] for it in items])
    sims = (s @ e.T).cpu().numpy()
    pair_ids = np.asarray([it.pair_id for it in items])
    rels = evalkit.relevance_sets(items, provider, theta)
    plan = {}
    for i, it in enumerate(items):
        ranked = evalkit.rank_pairs(sims[i], pair_ids)
        plan[it.pair_id] = [pid for pid in ranked if pid not in rels[i]][:m]
    return plan


def collate(batch, device, dtype):
    pairs = [p for p, _ in batch]
    records = [r for _, r in batch]
    before = torch.as_tensor(np.stack([p.before for p in pairs]), dtype=dtype, device=device)
    after = torch.as_tensor(np.stack([p.after for p in pairs]), dtype=dtype, device=device)
    ids = torch.as_tensor(np.stack([r.token_ids for r in records]), device=device)
    labels = np.asarray([r.pair_label for r in records])
    t_vectors = np.stack([r.sim_embedding for r in records])
    return before, after, ids, labels, t_vectors


def batch_losses(model, batch, loss_cfg: LossConfig):
    """Returns (total, caption, contrastive) losses for one collated batch."""
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    before, after, ids, labels, t_vectors = collate(batch, device, dtype)
    inputs = ids[:, :-1]
    targets = ids[:, 1:]
    lengths = (inputs != PAD).sum(dim=1)
    logits, e_con, s_end, _ = model(before, after, inputs, lengths)
    l_cap = caption_loss(logits, targets, pad_id=PAD)
    if loss_cfg.contrastive_weight > 0:
        status = build_pair_labels(labels, t_vectors, loss_cfg.theta, loss_cfg.fn_mode)
        l_con = info_nce(e_con, s_end, status, loss_cfg.tau)
    else:
        l_con = torch.zeros((), device=device, dtype=l_cap.dtype)
    return total_loss(l_cap, l_con, loss_cfg.contrastive_weight), l_cap, l_con


@dataclass
class TrainResult:
    model: ChangeCapModel
    vocab: object
    provider: BagOfWordsSimilarity
    log: list
    best_epoch: int
    best_val_loss: float
    checkpoint_path: Path | None = None


def train(config: TrainConfig, train_items, val_items, run_dir=None) -> TrainResult:
    """Train on train_items, keep the checkpoint minimizing validation loss."""
    torch.manual_seed(config.seed)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    captions = [c for it in train_items for c in it.captions]
    vocab = build_vocab(captions, min_freq=config.vocab_min_freq)
    provider = BagOfWordsSimilarity(
        captions + [c for it in val_items for c in it.captions]
    )
    model = ChangeCapModel(config.model, vocab_size=len(vocab))

    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(
        trainable, lr=config.target_lr, eps=config.adam_eps, weight_decay=config.weight_decay
    )
    steps_per_epoch = math.ceil(len(train_items) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    log = []
    best_val = float("inf")
    best_epoch = -1
    best_state = None
    step = 0
    plan = None
    for epoch in range(config.epochs):
        if config.hard_negatives:
            plan = mine_hard_negatives(
                model, train_items, vocab, provider, config.loss.theta, config.hard_negatives
            )
        batches = make_batches(
            train_items,
            config.batch_size,
            shuffle_seed=config.seed,
            vocab=vocab,
            provider=provider,
            max_len=config.model.max_len,
            epoch=epoch,
            hard_negative_plan=plan,
            fixed_caption_index=config.fixed_caption_index,
        )
        model.train()
        epoch_losses = []
        epoch_cap_losses = []
        epoch_con_losses = []
        last_lr = 0.0
        for batch in batches:
            step += 1
            last_lr = lr_schedule(step, total_steps, config.target_lr, config.warmup_fraction)
            for group in optimizer.param_groups:
                group["lr"] = last_lr
            loss, l_cap, l_con = batch_losses(model, batch, config.loss)
            if not torch.isfinite(loss):
                _dump_bad_batch(run_dir, epoch, batch, l_cap, l_con)
                raise RuntimeError(f"non-finite loss at epoch {epoch}, step {step}")
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(trainable, config.grad_clip)
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
            epoch_cap_losses.append(float(l_cap.detach()))
            epoch_con_losses.append(float(l_con.detach()))

        val_loss = _validation_loss(model, val_items, config, vocab, provider)
        model.eval()
        retrieval = evalkit.evaluate_retrieval(
            model, val_items, vocab, provider, config.loss.theta, ks=(5,)
        )
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "train_caption_loss": float(np.mean(epoch_cap_losses)),
            "train_contrastive_loss": float(np.mean(epoch_con_losses)),
            "val_loss": val_loss,
            "val_r_at_5": retrieval.r_at_k[5],
            "lr": last_lr,
        }
        log.append(record)
        if run_dir is not None:
            with (run_dir / "metrics.jsonl").open("a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    checkpoint_path = None
    if run_dir is not None:
        checkpoint_path = run_dir / "checkpoint.pt"
        save_checkpoint(checkpoint_path, model, vocab)
    return TrainResult(model, vocab, provider, log, best_epoch, best_val, checkpoint_path)


@torch.no_grad()
def _validation_loss(model, val_items, config, vocab, provider) -> float:
    model.eval()
    batches = make_batches(
        val_items,
        config.batch_size,
        shuffle_seed=config.seed,
        vocab=vocab,
        provider=provider,
        max_len=config.model.max_len,
        epoch=0,
        fixed_caption_index=config.fixed_caption_index,
    )
    losses = []
    for batch in batches:
        loss, _, _ = batch_losses(model, batch, config.loss)
        losses.append(float(loss))
    return float(np.mean(losses))


def _dump_bad_batch(run_dir, epoch, batch, l_cap, l_con):
    if run_dir is None:
        return
    dump = {
        "epoch": epoch,
        "pair_ids": [r.pair_label for _, r in batch],
        "captions": [r.text for _, r in batch],
        "caption_loss": float(l_cap.detach()),
        "contrastive_loss": float(l_con.detach()),
    }
    (run_dir / "nan_batch.json").write_text(json.dumps(dump, indent=2))


# ---------------------------------------------------------------------------
# Gradient validation harness


@dataclass
class FDEntry:
    param: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class FDReport:
    max_rel_error: float
    entries: list

    @property
    def worst(self) -> FDEntry:
        return max(self.entries, key=lambda e: e.rel_error)


def _rel_error(a: float, f: float) -> float:
    # floor the denominator: for near-zero gradients the central-difference
    # truncation noise (~|loss| * eps / step) dominates and a raw ratio would
    # flag agreement at the 1e-10 absolute level as a large relative error
    return abs(a - f) / max(abs(a), abs(f), 1e-4)


def finite_difference_check(
    loss_fn, named_params, coords_per_param: int = 3, step: float = 1e-5, seed: int = 0
) -> FDReport:
    """Compare analytic gradients with central finite differences.

    loss_fn is a closure over the given parameters returning a scalar tensor;
    parameters should be double precision. Frozen parameters (requires_grad
    False) are skipped: they are excluded from the optimized objective, so
    their training gradient is identically zero by contract.
    """
    named_params = [(n, p) for n, p in named_params if p.requires_grad]
    live = [p for _, p in named_params]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, live, allow_unused=True)
    grad_map = dict(zip([id(p) for p in live], grads))

    rng = np.random.default_rng(seed)
    entries = []
    for name, p in named_params:
        g = grad_map.get(id(p))
        flat = p.detach().reshape(-1)
        n = flat.numel()
        for idx in rng.choice(n, size=min(coords_per_param, n), replace=False):
            idx = int(idx)
            analytic = 0.0 if g is None else float(g.reshape(-1)[idx])
            with torch.no_grad():
                orig = float(flat[idx])
                flat[idx] = orig + step
                loss_plus = float(loss_fn())
                flat[idx] = orig - step
                loss_minus = float(loss_fn())
                flat[idx] = orig
            numeric = (loss_plus - loss_minus) / (2 * step)
            entries.append(FDEntry(name, idx, analytic, numeric, _rel_error(analytic, numeric)))
    return FDReport(max(e.rel_error for e in entries), entries)
