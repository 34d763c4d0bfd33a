"""Central finite-difference verification of analytic gradients, plus the
standard probe suite covering every primitive and the composed
model-to-loss pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    checked: int = 0
    max_err: float = 0.0
    failures: list[tuple[str, tuple[int, int], float, float, float]] = field(
        default_factory=list
    )

    @property
    def ok(self) -> bool:
        return not self.failures


def check_gradients(
    build_loss: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-5,
    max_entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of build_loss() against central differences.

    build_loss must be a pure function of the tensors in params (re-seed any
    internal randomness). The error measure is |analytic - numeric| divided
    by max(|analytic|, |numeric|, 1), i.e. relative with a unit floor so that
    near-zero entries are judged on absolute error.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    report = GradCheckReport()
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            entries = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            entries = np.arange(n)
        for j in entries:
            orig = flat[j]
            flat[j] = orig + h
            up = build_loss().item()
            flat[j] = orig - h
            down = build_loss().item()
            flat[j] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic[name].reshape(-1)[j]
            if np.isfinite(a) and np.isfinite(numeric):
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            else:
                # NaN/inf would sail through the >= comparison below
                err = float("inf")
            report.checked += 1
            report.max_err = max(report.max_err, err)
            if err >= tol:
                idx = (int(j) // p.shape[1], int(j) % p.shape[1])
                report.failures.append((name, idx, float(a), float(numeric), float(err)))
    return report


# ---------------------------------------------------------------------------
# probe suite
# ---------------------------------------------------------------------------

Probe = tuple[str, dict[str, Tensor], Callable[[], Tensor]]


def _weighted(x: Tensor, seed: int) -> Tensor:
    """Reduce to a scalar through a fixed random weighting; a plain sum has
    uniform gradients and would hide index-mapping mistakes. The weights are
    re-derived from the seed on every call so the loss stays a pure function
    of its tensor inputs, which finite differencing requires."""
    w = T.constant(np.random.default_rng(seed).normal(size=x.shape))
    return T.sum_all(T.mul(x, w))


def primitive_probes(seed: int = 0) -> list[Probe]:
    """One finite-difference probe per tensor primitive, all float64."""
    rng = np.random.default_rng(seed)
    probes: list[Probe] = []

    def param(r, c, positive=False):
        data = rng.normal(size=(r, c))
        if positive:
            data = np.abs(data) + 0.5
        return Tensor(data, requires_grad=True)

    def add_probe(name, params, build):
        probes.append((name, params, build))

    wr = seed + 1

    a, b = param(3, 4), param(4, 5)
    add_probe("matmul", {"a": a, "b": b}, lambda a=a, b=b: _weighted(T.matmul(a, b), wr))

    a, b = param(3, 4), param(3, 4)
    add_probe("add", {"a": a, "b": b}, lambda a=a, b=b: _weighted(T.add(a, b), wr))
    a, b = param(3, 4), param(1, 4)
    add_probe("add_row_broadcast", {"a": a, "b": b}, lambda a=a, b=b: _weighted(T.add(a, b), wr))
    a, b = param(3, 4), param(1, 1)
    add_probe("add_scalar_broadcast", {"a": a, "b": b}, lambda a=a, b=b: _weighted(T.add(a, b), wr))
    a, b = param(3, 4), param(3, 4)
    add_probe("sub", {"a": a, "b": b}, lambda a=a, b=b: _weighted(T.sub(a, b), wr))
    a, b = param(3, 4), param(3, 4)
    add_probe("mul", {"a": a, "b": b}, lambda a=a, b=b: _weighted(T.mul(a, b), wr))
    a, b = param(3, 4), param(1, 4)
    add_probe("mul_row_broadcast", {"a": a, "b": b}, lambda a=a, b=b: _weighted(T.mul(a, b), wr))

    a = param(3, 4)
    add_probe("scale", {"a": a}, lambda a=a: _weighted(T.scale(a, -1.7), wr))
    a = param(3, 4)
    add_probe("exp", {"a": a}, lambda a=a: _weighted(T.exp(a), wr))
    a = param(3, 4, positive=True)
    add_probe("log", {"a": a}, lambda a=a: _weighted(T.log(a), wr))
    a = param(3, 4)
    add_probe("transpose", {"a": a}, lambda a=a: _weighted(T.transpose(a), wr))

    a, b = param(2, 4), param(3, 4)
    add_probe("concat_rows", {"a": a, "b": b},
              lambda a=a, b=b: _weighted(T.concat([a, b], axis=0), wr))
    a, b = param(3, 2), param(3, 4)
    add_probe("concat_cols", {"a": a, "b": b},
              lambda a=a, b=b: _weighted(T.concat([a, b], axis=1), wr))
    a = param(4, 5)
    add_probe("slice2d", {"a": a},
              lambda a=a: _weighted(T.slice2d(a, slice(1, 3), slice(0, 4)), wr))

    table = param(7, 4)
    ids = [3, 1, 3, 0, 6]  # the repeat exercises gradient accumulation
    add_probe("embedding_lookup", {"table": table},
              lambda table=table: _weighted(T.embedding_lookup(table, ids), wr))

    x, gain = param(3, 5), param(1, 5)
    add_probe("rms_norm", {"x": x, "gain": gain},
              lambda x=x, gain=gain: _weighted(T.rms_norm(x, gain), wr))

    a = param(3, 4)
    add_probe("sum_all", {"a": a}, lambda a=a: T.sum_all(a))
    a = param(3, 4)
    add_probe("mean_all", {"a": a}, lambda a=a: T.mean_all(a))
    a = param(3, 4)
    add_probe("sum_rows", {"a": a}, lambda a=a: _weighted(T.sum_rows(a), wr))

    x = param(4, 6)
    add_probe("dropout", {"x": x},
              lambda x=x: _weighted(T.dropout(x, 0.35, np.random.default_rng(42)), wr))

    x = param(3, 5)
    add_probe("softmax_rows", {"x": x}, lambda x=x: _weighted(T.softmax_rows(x), wr))
    x = param(2, 4)
    mask = np.zeros((2, 4))
    mask[0, 2] = T.NEG_INF
    mask[1, 0] = T.NEG_INF
    add_probe("softmax_rows_masked", {"x": x},
              lambda x=x, mask=mask: _weighted(T.softmax_rows(T.add(x, T.constant(mask))), wr))

    x = param(3, 4)
    add_probe("gelu", {"x": x}, lambda x=x: _weighted(T.gelu(x), wr))
    x = param(3, 4)
    add_probe("unit_rows", {"x": x}, lambda x=x: _weighted(T.unit_rows(x), wr))
    a, b = param(3, 4), param(3, 4)
    add_probe("cosine_rows", {"a": a, "b": b},
              lambda a=a, b=b: _weighted(T.cosine_rows(a, b), wr))
    x = param(3, 6)
    add_probe("rotate_pairs", {"x": x}, lambda x=x: _weighted(T.rotate_pairs(x), wr))

    logits = param(3, 5)
    add_probe("cross_entropy_rows", {"logits": logits},
              lambda logits=logits: T.cross_entropy_rows(logits, [1, 0, 4]))
    logits = param(2, 4)
    ce_mask = np.zeros((2, 4))
    ce_mask[0, 3] = T.NEG_INF
    ce_mask[1, 2] = T.NEG_INF
    add_probe("cross_entropy_rows_masked", {"logits": logits},
              lambda logits=logits, ce_mask=ce_mask: T.cross_entropy_rows(T.add(logits, T.constant(ce_mask)), [0, 1]))
    return probes


def pipeline_probe(seed: int = 0, tau: float = 0.05) -> Probe:
    """The composed check: token ids -> transformer -> EOS embedding ->
    contrastive loss on a 2-pair batch with one mined negative per anchor."""
    from .corpus import EOS
    from .model import ModelConfig, embed_eos, init_params
    from .training import ContrastiveBatch, info_nce_loss

    cfg = ModelConfig(vocab_size=19, d_model=8, n_heads=2, n_layers=2, d_ff=16,
                      max_context=12)
    params = init_params(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 5])

    def seq(n):
        return [int(t) for t in rng.integers(4, cfg.vocab_size, size=n)] + [EOS]

    anchors = [seq(5), seq(7)]
    positives = [seq(9), seq(6)]
    negatives = [seq(8), seq(10)]

    def build():
        def stack(seqs):
            return T.concat([embed_eos(s, params, cfg) for s in seqs], axis=0)

        batch = ContrastiveBatch(anchors=stack(anchors), positives=stack(positives),
                                 negatives=stack(negatives), k_per_anchor=1)
        return info_nce_loss(batch, tau)

    return "model_pipeline", params.named(), build


def run_standard_suite(tol: float = 1e-5, h: float = 1e-5, seed: int = 0,
                       pipeline_entries: int | None = 25) -> list[tuple[str, GradCheckReport]]:
    """Every primitive probe exhaustively, then the composed pipeline with a
    per-parameter entry sample (it has ~1200 parameters)."""
    results = []
    for name, params, build in primitive_probes(seed):
        results.append((name, check_gradients(build, params, h=h, tol=tol)))
    name, params, build = pipeline_probe(seed)
    results.append((name, check_gradients(build, params, h=h, tol=tol,
                                          max_entries_per_param=pipeline_entries,
                                          rng=np.random.default_rng(seed))))
    return results
