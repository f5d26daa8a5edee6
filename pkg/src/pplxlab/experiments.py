"""End-to-end pipelines: copy training and the alpha/beta length sweep, the
gradient-norm sweep on beta sequences, and the parity checkpoint study.

Everything here is deterministic given the seeds; results come back in input
order.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .isoppl import misranked_fraction
from .metrics import (DegenerateInputError, Regime, avg_entropy, classify_regime, confidence_profile,
                      dist_linf_gap, micro_f1, pearson_r, trace_log_perplexity)
from .model import STOP, ModelConfig, TransformerParams, forward_tensors, greedy_copy_decode, init_params
from .numerics import EPS_FLOOR, Tensor
from .tasks import ParityInstance, make_alpha, make_beta, sample_dataset

log = logging.getLogger(__name__)

DEFAULT_N_LIST = (16, 32, 64, 128, 256, 512)


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _values(params: TransformerParams) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def grad_norm(grads) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


# -- copy ------------------------------------------------------------------------

@dataclass
class CopyTrainConfig:
    batch_size: int = 64
    length_range: tuple[int, int] = (1, 16)
    # "proportional": P(n) ~ n, so every copied position is equally likely; "uniform": P(n) flat
    length_sampling: str = "proportional"
    # one length per batch cuts padding, but long strings then show up too rarely
    bucket_lengths: bool = False
    learning_rate: float = 1e-3
    # cosine decay to min_learning_rate over decay_steps, then flat; 0 keeps the rate constant
    decay_steps: int = 4000
    min_learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_div: float = 1e-8
    target_confidence: float = 0.99
    max_steps: int = 20000
    eval_every: int = 250
    held_out_count: int = 32
    held_out_length: int = 16
    epsilon_floor: float = EPS_FLOOR

    def learning_rate_at(self, step: int) -> float:
        if self.decay_steps <= 0:
            return self.learning_rate
        frac = min(step, self.decay_steps) / self.decay_steps
        return self.min_learning_rate + 0.5 * (self.learning_rate - self.min_learning_rate) * (1 + math.cos(math.pi * frac))

    def length_probs(self) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.length_range
        ns = np.arange(lo, hi + 1)
        if self.length_sampling == "proportional":
            w = ns.astype(np.float64)
        elif self.length_sampling == "uniform":
            w = np.ones(len(ns))
        else:
            raise ValueError(f"unknown length_sampling {self.length_sampling!r}")
        return ns, w / w.sum()


def copy_sequences(bits_list: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forced batch for ``bits|bits``: inputs, targets, and weights that
    select only the copied half.  Shorter rows are right-padded."""
    width = 2 * max(len(b) for b in bits_list)
    inp = np.zeros((len(bits_list), width), dtype=np.int64)
    tgt = np.zeros_like(inp)
    w = np.zeros(inp.shape)
    for i, b in enumerate(bits_list):
        n = len(b)
        seq = np.concatenate([b, [STOP], b])
        inp[i, :2 * n] = seq[:-1]
        tgt[i, :2 * n] = seq[1:]
        w[i, n:2 * n] = 1.0
    return inp, tgt, w


def copy_loss_fn(config: ModelConfig, bits_list, floor: float = EPS_FLOOR) -> Callable:
    inp, tgt, w = copy_sequences(bits_list)
    return lambda p: nx.cross_entropy(forward_tensors(p, config, inp), tgt, w, floor)


@dataclass
class HeldOutCheck:
    exact_match: float
    min_confidence: float


def held_out_check(params, config, held_out) -> HeldOutCheck:
    ok, lowest = 0, 1.0
    # a tight fixed width; the full context is only needed for long sweeps
    width = 2 * max(len(b) for b in held_out) + 1
    for b in held_out:
        tr = greedy_copy_decode(params, config, b, width=width)
        ok += tr.correct
        lowest = min(lowest, float(tr.target_probs.min()))
    return HeldOutCheck(ok / len(held_out), lowest)


@dataclass
class CopyTrainResult:
    params: TransformerParams
    config: ModelConfig
    steps: int
    losses: list[float]
    converged: bool
    held_out: HeldOutCheck
    train: CopyTrainConfig
    seed: int

    def meta(self) -> dict:
        return {"task": "copy", "seed": self.seed, "steps": self.steps, "converged": self.converged,
                "held_out_exact_match": self.held_out.exact_match,
                "held_out_min_confidence": self.held_out.min_confidence, "train": asdict(self.train)}


def run_copy_training(config: ModelConfig, seed: int, train: CopyTrainConfig | None = None) -> CopyTrainResult:
    """Train on copy targets until held-out length-16 strings are all copied with
    every per-step target probability above ``target_confidence``, or the step cap."""
    train = train or CopyTrainConfig()
    lo, hi = train.length_range
    if 2 * hi + 1 > config.max_context:
        raise ValueError("max_context too small for the training lengths")
    init_rng, data_rng, held_rng = _streams(seed, 3)
    params = init_params(config, int(init_rng.integers(2 ** 63)))
    held_out = sample_dataset("copy", (train.held_out_length, train.held_out_length), train.held_out_count, held_rng)
    state = nx.AdamState.zeros_like(params, learning_rate=train.learning_rate, beta1=train.beta1,
                                    beta2=train.beta2, epsilon_div=train.epsilon_div)
    ns, probs = train.length_probs()
    losses: list[float] = []
    check = HeldOutCheck(0.0, 0.0)
    converged = False
    step = 0
    while step < train.max_steps:
        if train.bucket_lengths:
            lens = np.full(train.batch_size, data_rng.choice(ns, p=probs))
        else:
            lens = data_rng.choice(ns, size=train.batch_size, p=probs)
        batch = [data_rng.integers(0, 2, n) for n in lens]
        step += 1
        state = replace(state, learning_rate=train.learning_rate_at(step))
        loss, grads = nx.grad_of(copy_loss_fn(config, batch, train.epsilon_floor), params)
        params, state = nx.adam_step(params, grads, state)
        losses.append(loss)
        if step % train.eval_every == 0:
            check = held_out_check(params, config, held_out)
            log.info("copy step %d loss %.5f exact %.3f min-conf %.5f", step, loss,
                     check.exact_match, check.min_confidence)
            if check.exact_match == 1.0 and check.min_confidence > train.target_confidence:
                converged = True
                break
    if not converged:
        check = held_out_check(params, config, held_out)
        log.warning("copy training hit the %d-step cap without converging", train.max_steps)
    return CopyTrainResult(params, config, step, losses, converged, check, train, seed)


@dataclass
class CopySweepRow:
    N: int
    linf_gap: float
    min_prob_alpha: float
    flip_prob_beta: float
    max_prob_beta: float
    pplx_alpha: float
    pplx_beta: float
    alpha_correct: bool
    beta_correct: bool
    regime: str

    @property
    def pplx_gap(self) -> float:
        return abs(self.pplx_alpha - self.pplx_beta)


COPY_SWEEP_COLUMNS = ["N", "linf_gap", "min_prob_alpha", "flip_prob_beta", "max_prob_beta",
                      "pplx_alpha", "pplx_beta", "pplx_gap", "alpha_correct", "beta_correct", "regime"]


def sweep_row_values(r: CopySweepRow) -> list:
    return [r.N, r.linf_gap, r.min_prob_alpha, r.flip_prob_beta, r.max_prob_beta, r.pplx_alpha,
            r.pplx_beta, r.pplx_gap, r.alpha_correct, r.beta_correct, r.regime]


@dataclass
class CopySweep:
    rows: list[CopySweepRow]
    traces: dict = field(default_factory=dict)  # (N, "alpha"|"beta") -> DecodeTrace


def run_copy_sweep(params, config: ModelConfig, n_list: Sequence[int] = DEFAULT_N_LIST, pattern="0",
                   flip_pos: int | None = None, floor: float = EPS_FLOOR,
                   regime_threshold: float = 0.1) -> CopySweep:
    """Decode alpha_N and its one-bit flip beta_N for every N and compare them.

    ``flip_pos`` counts from the start; ``None`` flips the last bit.  The
    regime column plugs ``1 - min_prob_alpha`` in for gamma and the L-inf gap
    in for eps_N.
    """
    if not n_list:
        raise ValueError("N list is empty")
    if 2 * max(n_list) + 1 > config.max_context:
        raise ValueError(f"N={max(n_list)} exceeds max_context {config.max_context}")
    rows, traces = [], {}
    for n in n_list:
        alpha = make_alpha(n, pattern)
        pos = n - 1 if flip_pos is None else flip_pos
        beta = make_beta(alpha, pos)
        ta = greedy_copy_decode(params, config, alpha)
        tb = greedy_copy_decode(params, config, beta)
        gap = dist_linf_gap(ta, tb)
        ca = confidence_profile(ta, alpha)
        cb = confidence_profile(tb, beta, flip_pos=pos)
        ra, rb = trace_log_perplexity(ta, floor), trace_log_perplexity(tb, floor)
        gamma = 1.0 - ca.min
        regime = classify_regime(n, gamma, gap, regime_threshold)
        rows.append(CopySweepRow(n, gap, ca.min, cb.flip_pos_prob, cb.max, ra.mean_neg, rb.mean_neg,
                                 ra.correct, rb.correct, regime.value))
        traces[(n, "alpha")], traces[(n, "beta")] = ta, tb
    return CopySweep(rows, traces)


@dataclass
class GradSweepRow:
    N: int
    grad_norm_alpha: float
    loss_alpha: float
    grad_norm_beta: float
    loss_beta: float


GRAD_SWEEP_COLUMNS = ["N", "grad_norm_alpha", "loss_alpha", "grad_norm_beta", "loss_beta"]


def run_grad_norm_sweep(params, config: ModelConfig, n_list: Sequence[int] = DEFAULT_N_LIST,
                        pattern="0", flip_pos: int | None = None,
                        floor: float = EPS_FLOOR) -> list[GradSweepRow]:
    """Full-parameter gradient 2-norm of the teacher-forced copy loss on alpha_N and beta_N."""
    if not n_list:
        raise ValueError("N list is empty")
    if 2 * max(n_list) + 1 > config.max_context:
        raise ValueError(f"N={max(n_list)} exceeds max_context {config.max_context}")
    rows = []
    for n in n_list:
        alpha = make_alpha(n, pattern)
        beta = make_beta(alpha, n - 1 if flip_pos is None else flip_pos)
        la, ga = nx.grad_of(copy_loss_fn(config, [alpha], floor), params)
        lb, gb = nx.grad_of(copy_loss_fn(config, [beta], floor), params)
        rows.append(GradSweepRow(n, grad_norm(ga), la, grad_norm(gb), lb))
    return rows


# -- parity ----------------------------------------------------------------------

@dataclass
class ParityTrainConfig:
    steps: int = 5000
    checkpoint_every: int = 100
    batch_size: int = 128
    length_range: tuple[int, int] = (1, 16)
    bucket_lengths: bool = False
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_div: float = 1e-8
    epsilon_floor: float = EPS_FLOOR


def parity_config(**overrides) -> ModelConfig:
    base = {"vocab_size": 2, "max_context": 128}
    base.update(overrides)
    return ModelConfig(**base)


def parity_batch(instances: Sequence[ParityInstance]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    width = max(len(x.bits) for x in instances)
    inp = np.zeros((len(instances), width), dtype=np.int64)
    tgt = np.zeros_like(inp)
    w = np.zeros(inp.shape)
    for i, x in enumerate(instances):
        n = len(x.bits)
        inp[i, :n] = x.bits
        tgt[i, :n] = x.running_parity
        w[i, :n] = 1.0
    return inp, tgt, w


@dataclass
class ParityCheckpoint:
    step: int
    params: TransformerParams


def run_parity_training(config: ModelConfig, seed: int, train: ParityTrainConfig | None = None,
                        on_checkpoint: Callable[[ParityCheckpoint], None] | None = None
                        ) -> tuple[list[ParityCheckpoint], list[float]]:
    """Train on per-position running parity; snapshot every ``checkpoint_every`` steps."""
    train = train or ParityTrainConfig()
    lo, hi = train.length_range
    init_rng, data_rng = _streams(seed, 2)
    params = init_params(config, int(init_rng.integers(2 ** 63)))
    state = nx.AdamState.zeros_like(params, learning_rate=train.learning_rate, beta1=train.beta1,
                                    beta2=train.beta2, epsilon_div=train.epsilon_div)
    ckpts, losses = [], []
    for step in range(1, train.steps + 1):
        if train.bucket_lengths:
            n = int(data_rng.integers(lo, hi + 1))
            batch = sample_dataset("parity", (n, n), train.batch_size, data_rng)
        else:
            batch = sample_dataset("parity", (lo, hi), train.batch_size, data_rng)
        inp, tgt, w = parity_batch(batch)
        loss, grads = nx.grad_of(
            lambda p: nx.cross_entropy(forward_tensors(p, config, inp), tgt, w, train.epsilon_floor), params)
        params, state = nx.adam_step(params, grads, state)
        losses.append(loss)
        if step % train.checkpoint_every == 0:
            ck = ParityCheckpoint(step, params)
            ckpts.append(ck)
            log.info("parity step %d loss %.5f", step, loss)
            if on_checkpoint:
                on_checkpoint(ck)
    return ckpts, losses


@dataclass
class CheckpointEval:
    step: int
    split: str
    L: float
    f1: float
    entropy: float


@dataclass
class SplitPredictions:
    """Per-instance argmax predictions and targets for one checkpoint and split."""
    step: int
    split: str
    preds: list[np.ndarray]
    targets: list[np.ndarray]


def evaluate_parity(params, config: ModelConfig, instances: Sequence[ParityInstance],
                    scoring: str = "all_positions", floor: float = EPS_FLOOR, chunk: int = 128):
    """(L, micro-F1, mean entropy, per-instance predictions) over the scored positions."""
    if scoring not in ("all_positions", "final_only"):
        raise ValueError(f"unknown scoring {scoring!r}")
    logps, ents, preds_all, tg_all = [], [], [], []
    order = sorted(range(len(instances)), key=lambda i: len(instances[i].bits))
    per_inst = [None] * len(instances)
    values = _values(params)
    for s in range(0, len(order), chunk):
        idx = order[s:s + chunk]
        sub = [instances[i] for i in idx]
        inp, tgt, w = parity_batch(sub)
        probs = forward_tensors(values, config, inp).data
        for row, i in enumerate(idx):
            n = len(instances[i].bits)
            pr = probs[row, :n]
            t = tgt[row, :n]
            pred = (pr[:, 1] > pr[:, 0]).astype(np.int64)
            per_inst[i] = pred
            sel = slice(n - 1, n) if scoring == "final_only" else slice(0, n)
            logps.append(np.log(np.maximum(pr[np.arange(n), t][sel], floor)))
            with np.errstate(divide="ignore", invalid="ignore"):
                ents.append(-np.where(pr[sel] > 0, pr[sel] * np.log(pr[sel]), 0.0).sum(axis=1))
            preds_all.append(pred[sel])
            tg_all.append(t[sel])
    L = float(-np.concatenate(logps).mean())
    f1 = micro_f1(np.concatenate(preds_all), np.concatenate(tg_all))
    H = float(np.concatenate(ents).mean())
    return L, f1, H, per_inst


@dataclass
class SplitSummary:
    r: float | None
    degenerate: bool
    best_f1_step: int
    best_L_step: int
    best_f1_entropy_quantile: float
    misranked_fraction: float | None


def _summarise(evals: list[CheckpointEval]) -> SplitSummary:
    L = np.array([e.L for e in evals])
    f1 = np.array([e.f1 for e in evals])
    H = np.array([e.entropy for e in evals])
    try:
        r, degenerate = pearson_r(L, f1), False
    except DegenerateInputError:
        r, degenerate = None, True
    bi = int(np.argmax(f1))
    # fraction of checkpoints with entropy at or below the best-F1 one
    q = float(np.mean(H <= H[bi]))
    frac = misranked_fraction(list(zip(L, f1))) if len(evals) > 1 else None
    return SplitSummary(r, degenerate, evals[bi].step, evals[int(np.argmin(L))].step, q, frac)


def eval_checkpoints(checkpoints: Sequence[ParityCheckpoint], config: ModelConfig,
                     iid_set: Sequence[ParityInstance], ood_set: Sequence[ParityInstance],
                     scoring: str = "all_positions", floor: float = EPS_FLOOR):
    """Evaluate every checkpoint on both splits.

    Returns ``(evals, summary, predictions)`` with ``summary`` keyed by split.
    """
    if not checkpoints or not iid_set or not ood_set:
        raise ValueError("need checkpoints and both evaluation sets")
    evals: list[CheckpointEval] = []
    preds: list[SplitPredictions] = []
    for ck in checkpoints:
        for split, data in (("IID", iid_set), ("OOD", ood_set)):
            L, f1, H, per = evaluate_parity(ck.params, config, data, scoring, floor)
            evals.append(CheckpointEval(ck.step, split, L, f1, H))
            preds.append(SplitPredictions(ck.step, split, per, [x.running_parity for x in data]))
    summary = {s: _summarise([e for e in evals if e.split == s]) for s in ("IID", "OOD")}
    return evals, summary, preds


@dataclass
class ParityDatasets:
    iid: list[ParityInstance]
    ood: list[ParityInstance]


def parity_eval_sets(seed: int, iid_count: int = 512, ood_count: int = 128,
                     iid_range=(1, 16), ood_length: int = 128) -> ParityDatasets:
    """Held-out splits from streams separate from training's (seeded off ``seed + 1``)."""
    iid_rng, ood_rng = _streams(seed + 1, 2)
    return ParityDatasets(sample_dataset("parity", iid_range, iid_count, iid_rng),
                          sample_dataset("parity", (ood_length, ood_length), ood_count, ood_rng))


def rank_trend(ns: Sequence[float], values: Sequence[float]) -> float:
    from .metrics import spearman_rho

    return spearman_rho(ns, values)


__all__ = [
    "CopyTrainConfig", "run_copy_training", "run_copy_sweep", "run_grad_norm_sweep",
    "ParityTrainConfig", "run_parity_training", "eval_checkpoints", "CheckpointEval",
    "CopySweepRow", "GradSweepRow", "Regime",
]
