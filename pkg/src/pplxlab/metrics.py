"""Measured quantities: self-conditioned copy log-perplexity, continuity gaps,
confidence profiles, temperature folding, Boole bounds, entropy, micro-F1,
Pearson correlation and the n' length diagnostic.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import DecodeTrace, ModelConfig, TransformerParams, greedy_copy_decode
from .numerics import EPS_FLOOR
from .tasks import as_bits


class DegenerateInputError(ValueError):
    pass


@dataclass
class PplxReport:
    per_step_logprob_of_target: np.ndarray
    mean_neg: float
    emitted: np.ndarray
    correct: bool

    @property
    def L(self) -> float:
        return self.mean_neg


def report_from_probs(target_probs, emitted, target, floor: float = EPS_FLOOR) -> PplxReport:
    """Build a report from per-step probabilities of the target symbols."""
    p = np.asarray(target_probs, dtype=np.float64)
    if p.size == 0:
        raise ValueError("need at least one step")
    logp = np.log(np.maximum(p, floor))
    return report_from_logprobs(logp, emitted, target, floor)


def report_from_logprobs(logprobs, emitted, target, floor: float = EPS_FLOOR) -> PplxReport:
    lp = np.maximum(np.asarray(logprobs, dtype=np.float64), math.log(floor))
    emitted = np.asarray(emitted)
    target = np.asarray(target)
    return PplxReport(lp, float(-lp.mean()), emitted, bool(np.array_equal(emitted, target)))


def trace_log_perplexity(trace: DecodeTrace, floor: float = EPS_FLOOR) -> PplxReport:
    return report_from_probs(trace.target_probs, trace.emitted, trace.bits, floor)


def copy_log_perplexity(params: TransformerParams, config: ModelConfig, bits: Sequence[int],
                        floor: float = EPS_FLOOR) -> PplxReport:
    """Score the true bits while conditioning on the model's own greedy outputs."""
    b = as_bits(bits)
    if b.size == 0:
        raise ValueError("bits must be non-empty")
    return trace_log_perplexity(greedy_copy_decode(params, config, b), floor)


def _dists(x) -> np.ndarray:
    return x.distributions if isinstance(x, DecodeTrace) else np.asarray(x, dtype=np.float64)


def dist_linf_gap(a, b) -> float:
    """Largest absolute difference between two traces' probability rows."""
    da, db = _dists(a), _dists(b)
    if da.shape != db.shape:
        raise ValueError(f"trace shapes differ: {da.shape} vs {db.shape}")
    if da.size == 0:
        return 0.0
    return float(np.abs(da - db).max())


@dataclass
class ConfidenceProfile:
    probs: np.ndarray
    min: float
    max: float
    flip_pos_prob: float | None = None


def confidence_profile(trace, target: Sequence[int], flip_pos: int | None = None) -> ConfidenceProfile:
    """Per-position probability of ``target``; ``min`` estimates the confidence 1 - gamma.

    For a beta sequence pass ``flip_pos`` to also get the probability of the
    flipped bit, which bounds the chance of copying it.
    """
    d = _dists(trace)
    t = as_bits(target)
    if len(t) != d.shape[0]:
        raise ValueError(f"target length {len(t)} vs trace length {d.shape[0]}")
    probs = d[np.arange(len(t)), t]
    flip = None if flip_pos is None else float(probs[flip_pos])
    return ConfidenceProfile(probs, float(probs.min()), float(probs.max()), flip)


def boole_failure_bound(n: int, gamma: float) -> float:
    """Union bound ``N * gamma`` on the chance of any flip in N stochastic steps."""
    if n < 1:
        raise ValueError("N must be at least 1")
    if not 0 <= gamma < 0.5:
        raise ValueError("gamma must lie in [0, 1/2)")
    return n * gamma


def fold_temperature(gamma: float, theta: float) -> float:
    """Error rate at temperature 1 equivalent to sampling at ``theta``."""
    if not theta > 0:
        raise ValueError("temperature must be positive")
    if not 0 <= gamma <= 1:
        raise ValueError("gamma must lie in [0, 1]")
    if gamma in (0.0, 1.0):
        return float(gamma)
    # log-space keeps 1/theta large from underflowing both terms
    lg, lc = math.log(gamma) / theta, math.log1p(-gamma) / theta
    m = max(lg, lc)
    return math.exp(lg - m) / (math.exp(lg - m) + math.exp(lc - m))


class Regime(enum.Enum):
    COLLAPSE = "COLLAPSE"
    TOO_SHORT = "TOO_SHORT"
    UNCONFIDENT = "UNCONFIDENT"


def classify_regime(n: int, gamma: float, eps_n: float, threshold: float = 0.1) -> Regime:
    """Which stochastic-sampling outcome applies; "much less than 1" means ``< threshold``."""
    if n * gamma >= threshold:
        return Regime.UNCONFIDENT
    if n * eps_n >= threshold:
        return Regime.TOO_SHORT
    return Regime.COLLAPSE


def avg_entropy(dists, weights=None) -> float:
    """Mean Shannon entropy (nats) of the distributions along the last axis.

    Accepts an array ``[..., V]``, a :class:`DecodeTrace`, or a list of either.
    ``weights`` (same leading shape) selects/weights positions.
    """
    if isinstance(dists, (list, tuple)) and dists and not np.isscalar(dists[0]):
        rows = np.concatenate([_dists(d).reshape(-1, _dists(d).shape[-1]) for d in dists])
    else:
        rows = _dists(dists)
        rows = rows.reshape(-1, rows.shape[-1])
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(rows > 0, rows * np.log(rows), 0.0).sum(axis=-1)
    if weights is None:
        return float(h.mean())
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    return float((h * w).sum() / w.sum())


def micro_f1(preds: Sequence[int], targets: Sequence[int]) -> float:
    """Micro-averaged F1 over the classes present; equals accuracy for single-label data."""
    p = np.asarray(preds).reshape(-1)
    t = np.asarray(targets).reshape(-1)
    if p.shape != t.shape:
        raise ValueError("preds and targets differ in length")
    if p.size == 0:
        raise ValueError("empty input")
    tp = fp = fn = 0
    for c in np.union1d(p, t):
        tp += np.count_nonzero((p == c) & (t == c))
        fp += np.count_nonzero((p == c) & (t != c))
        fn += np.count_nonzero((p != c) & (t == c))
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return float(2 * precision * recall / (precision + recall))


def pearson_r(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise DegenerateInputError("need two equal-length series of at least 2 points")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt((dx * dx).sum()), math.sqrt((dy * dy).sum())
    if sx == 0 or sy == 0:
        raise DegenerateInputError("constant series has no correlation")
    return float(np.clip((dx * dy).sum() / (sx * sy), -1.0, 1.0))


def spearman_rho(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson correlation of average ranks."""
    from scipy.stats import rankdata

    return pearson_r(rankdata(xs), rankdata(ys))


@dataclass(frozen=True)
class MarginConfig:
    epsilon_margin: float
    xi: float
    delta_cont: float
    epsilon_floor: float = EPS_FLOOR

    def __post_init__(self):
        for name in ("epsilon_margin", "xi", "delta_cont", "epsilon_floor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.epsilon_margin < 0.5:
            raise ValueError("epsilon_margin must be below 1/2")


@dataclass(frozen=True)
class NPrime:
    n_continuity: int
    n_oversmoothing: float
    n_prime: int

    @property
    def oversmoothing_negative(self) -> bool:
        return self.n_oversmoothing < 0


def compute_nprime(m: MarginConfig) -> NPrime:
    """Length past which continuity and perplexity smoothing both apply.

    The oversmoothing term is evaluated exactly as printed in the source
    bound, sign included; negative values are reported, not corrected.
    """
    n_cont = math.ceil(1.0 / m.delta_cont)
    eps = m.epsilon_margin
    n_over = (eps - math.log(0.5 + eps) + math.log(m.epsilon_floor)) / (m.xi + eps)
    return NPrime(n_cont, n_over, max(n_cont, math.ceil(n_over), 1))
