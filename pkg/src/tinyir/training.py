"""Unsupervised contrastive training.

One step embeds a batch of (anchor, positive, negatives) token sequences
through the live model, scores every anchor against every positive and every
mined negative in the batch, and minimizes the softmax cross-entropy of each
anchor against its own positive. Updates come from a hand-rolled AdamW with
decoupled weight decay.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .augment import DROPOUT, AugmentationConfig, build_batches
from .corpus import DocumentStore, Vocabulary
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .model import (LoraAdapter, ModelConfig, ModelParams, apply_lora, embed_eos,
                    init_lora, merge_lora, save_checkpoint)
from .tensor import Tensor

SCOPE_BATCH = "batch"
SCOPE_OWN = "own"


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.05
    batch_size: int = 64
    lr: float = 1e-4
    epochs: int = 1
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    use_lora: bool = False
    lora_rank: int = 8
    lora_alpha: float = 16.0
    grad_clip: float | None = None
    warmup_steps: int = 0
    negatives_scope: str = SCOPE_BATCH

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.negatives_scope not in (SCOPE_BATCH, SCOPE_OWN):
            raise ConfigError(f"negatives_scope must be batch or own, "
                              f"got {self.negatives_scope!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")


@dataclass
class ContrastiveBatch:
    """Unit-row embeddings: anchors [N x d], positives [N x d], and the
    batch's mined negatives flattened to [(N*K) x d] (None when K = 0)."""

    anchors: Tensor
    positives: Tensor
    negatives: Tensor | None
    k_per_anchor: int

    def validate(self) -> None:
        n, d = self.anchors.shape
        if self.positives.shape != (n, d):
            raise ShapeError(f"positives {self.positives.shape} do not match "
                             f"anchors {self.anchors.shape}")
        if self.k_per_anchor < 0:
            raise ConfigError("k_per_anchor must be >= 0")
        if self.k_per_anchor == 0:
            if self.negatives is not None:
                raise ShapeError("negatives supplied with k_per_anchor = 0")
        else:
            want = (n * self.k_per_anchor, d)
            if self.negatives is None or self.negatives.shape != want:
                raise ShapeError(f"negatives must be {want}")
        for name, t in (("anchor", self.anchors), ("positive", self.positives),
                        ("negative", self.negatives)):
            if t is None:
                continue
            norms = np.linalg.norm(t.data, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise DataError(f"{name} rows are not unit-normalized "
                                f"(worst |norm-1| = {np.max(np.abs(norms - 1.0)):.2e})")


def _own_scope_mask(n: int, k: int, dtype) -> np.ndarray:
    """0 over positives and own negatives, sentinel -inf over the negatives
    mined for other anchors."""
    mask = np.zeros((n, n + n * k), dtype=dtype)
    for i in range(n):
        mask[i, n:] = T.NEG_INF
        mask[i, n + i * k:n + (i + 1) * k] = 0.0
    return mask


def info_nce_from_sims(sims: Tensor, k_per_anchor: int, tau: float,
                       negatives_scope: str = SCOPE_BATCH) -> Tensor:
    """Mean over anchors of -log softmax at the own-positive column.

    Column layout of `sims` for anchor i: columns [0, N) are the batch
    positives (column i is the matching one), columns [N, N + N*K) are all
    mined negatives, anchor j's block at [N + j*K, N + (j+1)*K).
    """
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    n = sims.shape[0]
    if sims.shape[1] != n + n * k_per_anchor:
        raise ShapeError(f"sims must be (n, n + n*k) = ({n}, {n + n * k_per_anchor}), "
                         f"got {sims.shape}")
    logits = T.scale(sims, 1.0 / tau)
    if negatives_scope == SCOPE_OWN and k_per_anchor > 0:
        logits = T.add(logits, T.constant(_own_scope_mask(n, k_per_anchor, sims.dtype)))
    elif negatives_scope not in (SCOPE_BATCH, SCOPE_OWN):
        raise ConfigError(f"negatives_scope must be batch or own, got {negatives_scope!r}")
    return T.cross_entropy_rows(logits, list(range(n)))


def info_nce_loss(batch: ContrastiveBatch, tau: float,
                  negatives_scope: str = SCOPE_BATCH) -> Tensor:
    """Contrastive loss over a batch of unit embeddings; cosine similarity
    reduces to a dot product on unit rows."""
    batch.validate()
    if batch.negatives is None:
        candidates = batch.positives
    else:
        candidates = T.concat([batch.positives, batch.negatives], axis=0)
    sims = T.matmul(batch.anchors, T.transpose(candidates))
    return info_nce_from_sims(sims, batch.k_per_anchor, tau, negatives_scope)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def init_optimizer(params: dict[str, Tensor]) -> OptimizerState:
    state = OptimizerState()
    for name, t in params.items():
        state.m[name] = np.zeros_like(t.data, dtype=np.float64)
        state.v[name] = np.zeros_like(t.data, dtype=np.float64)
    return state


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimizerState, cfg: TrainConfig, lr: float | None = None) -> None:
    """One in-place AdamW update. Decay is decoupled: weights shrink by
    (1 - lr*wd) before the moment-driven step, gradients untouched."""
    if lr is None:
        lr = cfg.lr
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, "
                             f"parameter is {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
        if cfg.weight_decay:
            p.data *= 1.0 - lr * cfg.weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p.data -= (lr * update).astype(p.dtype)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm;
    returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data, dtype=np.float64))
        for name, t in params.items()
    }


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    adapter: LoraAdapter | None
    losses: list[float]
    log_path: str | None
    checkpoint_path: str | None


def _embed_stack(seqs, params, cfg, mode, rng) -> Tensor:
    rows = [embed_eos(s, params, cfg, mode=mode, rng=rng) for s in seqs]
    return rows[0] if len(rows) == 1 else T.concat(rows, axis=0)


def train(store: DocumentStore, vocab: Vocabulary, negatives: dict[str, list[str]],
          params: ModelParams, model_cfg: ModelConfig, aug_cfg: AugmentationConfig,
          train_cfg: TrainConfig, out_dir: str | None = None,
          log_every: int = 1) -> TrainResult:
    """Run the contrastive loop over the corpus and return trained parameters.

    Every sequence in a step (anchors, positives, negatives) is embedded
    through the same live parameters, and gradients flow through all of them.
    With LoRA enabled the base weights are frozen and only adapters move.
    """
    if len(store) <= aug_cfg.k_negatives:
        raise DataError(f"corpus of {len(store)} documents cannot supply "
                        f"{aug_cfg.k_negatives} negatives per anchor")

    run_cfg = model_cfg
    if aug_cfg.mode == DROPOUT:
        run_cfg = replace(model_cfg, dropout_p=aug_cfg.dropout_p)
    forward_mode = "train" if run_cfg.dropout_p > 0 else "infer"
    drop_rng = np.random.default_rng([train_cfg.seed, 104729])

    adapter = None
    if train_cfg.use_lora:
        adapter = init_lora(params, rank=train_cfg.lora_rank, alpha=train_cfg.lora_alpha,
                            seed=train_cfg.seed)
        params.set_requires_grad(False)
        trainable = adapter.named()
    else:
        params.set_requires_grad(True)
        trainable = params.named()

    opt = init_optimizer(trainable)
    losses: list[float] = []
    log_path = None
    log_file = None
    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.csv")
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["step", "loss", "lr", "seconds"])

    k = aug_cfg.k_negatives
    step = 0
    try:
        for epoch in range(train_cfg.epochs):
            for batch in build_batches(store, vocab, negatives, aug_cfg,
                                       train_cfg.batch_size, epoch=epoch):
                t0 = time.perf_counter()
                with T.Tape() as tape:
                    effective = apply_lora(params, adapter) if adapter else params
                    a = _embed_stack([p.anchor for p in batch],
                                     effective, run_cfg, forward_mode, drop_rng)
                    pos = _embed_stack([p.positive for p in batch],
                                       effective, run_cfg, forward_mode, drop_rng)
                    neg = None
                    if k > 0:
                        flat = [seq for p in batch for seq in p.negatives]
                        neg = _embed_stack(flat, effective, run_cfg, forward_mode, drop_rng)
                    loss = info_nce_loss(
                        ContrastiveBatch(anchors=a, positives=pos, negatives=neg,
                                         k_per_anchor=k),
                        train_cfg.tau, train_cfg.negatives_scope)
                    tape.backward(loss)

                grads = collect_grads(trainable)
                if train_cfg.grad_clip is not None:
                    clip_grad_norm(grads, train_cfg.grad_clip)
                lr = train_cfg.lr
                if train_cfg.warmup_steps > 0:
                    lr *= min(1.0, (step + 1) / train_cfg.warmup_steps)
                adamw_step(trainable, grads, opt, train_cfg, lr=lr)

                step += 1
                loss_val = loss.item()
                losses.append(loss_val)
                if writer is not None and step % log_every == 0:
                    writer.writerow([step, f"{loss_val:.6f}", f"{lr:.6g}",
                                     f"{time.perf_counter() - t0:.3f}"])
    finally:
        if log_file is not None:
            log_file.close()

    final = merge_lora(params, adapter) if adapter else params
    checkpoint_path = None
    if out_dir is not None:
        checkpoint_path = os.path.join(out_dir, "model.ckpt")
        save_checkpoint(checkpoint_path, final, model_cfg)
    return TrainResult(params=final, adapter=adapter, losses=losses,
                       log_path=log_path, checkpoint_path=checkpoint_path)
