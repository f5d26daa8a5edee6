"""Decoder-only Transformer with rotary position embeddings.

Pre-norm residual blocks (RMS norm), causal multi-head attention with RoPE on
queries and keys, and a GELU MLP.  Parameters live in an ordered ``dict`` of
float64 arrays keyed by name; :func:`param_shapes` fixes the order.

Symbols for the copy task are ``0``, ``1`` and the stop symbol ``|`` (id 2).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

STOP = 2
SYMBOLS = "01|"

TransformerParams = dict  # name -> np.ndarray, ordered as param_shapes(config)


class ConfigError(ValueError):
    pass


class ContextLengthError(ValueError):
    pass


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 3
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    max_context: int = 2 * 512 + 1
    rope_base: float = 10000.0
    init_std: float = 0.02
    # fixed architecture, recorded alongside checkpoints
    norm: str = "rms"
    mlp: str = "gelu"
    residual: str = "pre-norm"

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "n_heads", "d_model", "d_ff", "max_context"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.d_head % 2:
            raise ConfigError("head dimension must be even for rotary embeddings")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        return cls(**dict(d))


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (v, d)}
    for i in range(config.n_layers):
        p = f"layer{i}."
        shapes.update({
            p + "attn_norm": (d,), p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d),
            p + "wo": (d, d), p + "mlp_norm": (d,), p + "w1": (d, f), p + "b1": (f,),
            p + "w2": (f, d), p + "b2": (d,),
        })
    shapes["final_norm"] = (d,)
    shapes["w_out"] = (d, v)
    return shapes


def init_params(config: ModelConfig, seed: int) -> TransformerParams:
    """Normal(0, init_std) weights; residual output projections shrunk by 1/sqrt(2L)."""
    rng = np.random.default_rng(seed)
    out_scale = 1.0 / math.sqrt(2 * config.n_layers)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.split(".")[-1]
        if leaf.endswith("norm"):
            params[name] = np.ones(shape)
        elif leaf in ("b1", "b2"):
            params[name] = np.zeros(shape)
        else:
            std = config.init_std * (out_scale if leaf in ("wo", "w2") else 1.0)
            params[name] = rng.normal(0.0, std, size=shape)
    return params


def rope_rotate(x, positions: Sequence[int], rope_base: float) -> np.ndarray:
    """Value-only rotary embedding of ``x[..., T, d_head]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % 2:
        raise ConfigError(f"head dimension must be even, got {x.shape[-1]}")
    return nx.rope(Tensor(x), positions, rope_base).data


def _check_tokens(config: ModelConfig, tokens: np.ndarray) -> None:
    if tokens.shape[-1] > config.max_context:
        raise ContextLengthError(f"sequence of {tokens.shape[-1]} exceeds max_context {config.max_context}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise VocabError(f"symbol outside vocabulary of size {config.vocab_size}")


def forward_tensors(p: Mapping[str, Tensor], config: ModelConfig, tokens: np.ndarray) -> Tensor:
    """Next-symbol distributions ``[B, T, V]`` for integer ``tokens[B, T]``.

    Works on taped or value-only tensors alike.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(config, tokens)
    b, t = tokens.shape
    h_, dh = config.n_heads, config.d_head
    pos = np.arange(t)
    x = nx.gather_rows(p["tok_emb"], tokens)
    for i in range(config.n_layers):
        pre = f"layer{i}."
        h = nx.rms_norm(x, p[pre + "attn_norm"])

        def heads(w):
            return nx.transpose(nx.reshape(nx.matmul(h, p[pre + w]), (b, t, h_, dh)), (0, 2, 1, 3))

        q = nx.rope(heads("wq"), pos, config.rope_base)
        k = nx.rope(heads("wk"), pos, config.rope_base)
        v = heads("wv")
        scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        att = nx.matmul(nx.causal_softmax(scores), v)
        att = nx.reshape(nx.transpose(att, (0, 2, 1, 3)), (b, t, config.d_model))
        x = nx.add(x, nx.matmul(att, p[pre + "wo"]))
        h = nx.rms_norm(x, p[pre + "mlp_norm"])
        m = nx.gelu(nx.add(nx.matmul(h, p[pre + "w1"]), p[pre + "b1"]))
        x = nx.add(x, nx.add(nx.matmul(m, p[pre + "w2"]), p[pre + "b2"]))
    h = nx.rms_norm(x, p["final_norm"])
    return nx.row_softmax(nx.matmul(h, p["w_out"]))


def forward(params: TransformerParams, config: ModelConfig, tokens: Sequence[int],
            width: int | None = None) -> np.ndarray:
    """Distributions ``[len, V]``; row ``k`` predicts the symbol after ``tokens[:k+1]``.

    The sequence is right-padded to ``width`` (default ``max_context``) so every
    call runs the same kernels on the same shapes.  Masked positions contribute
    exact zeros, which makes row ``k`` bitwise independent of anything after it.
    """
    tok = np.asarray(tokens, dtype=np.int64).reshape(-1)
    t = tok.shape[0]
    if t == 0:
        return np.zeros((0, config.vocab_size))
    width = config.max_context if width is None else width
    if t > min(width, config.max_context):
        raise ContextLengthError(f"sequence of {t} exceeds width {min(width, config.max_context)}")
    padded = np.zeros((1, width), dtype=np.int64)
    padded[0, :t] = tok
    values = {k: Tensor(v) for k, v in params.items()}
    return forward_tensors(values, config, padded).data[0, :t]


def greedy_next(dist) -> int:
    """Argmax over ``{0, 1}`` only; ties go to 0."""
    return 0 if dist[0] >= dist[1] else 1


@dataclass
class DecodeTrace:
    bits: np.ndarray           # the copied input, also the scoring target
    distributions: np.ndarray  # [n, V], one row per emitted symbol
    emitted: np.ndarray        # greedy outputs o_1..o_n

    @property
    def target_probs(self) -> np.ndarray:
        return self.distributions[np.arange(len(self.bits)), self.bits]

    @property
    def correct(self) -> bool:
        return bool(np.array_equal(self.bits, self.emitted))

    def __len__(self) -> int:
        return len(self.bits)


def greedy_copy_decode(params: TransformerParams, config: ModelConfig, bits: Sequence[int],
                       naive: bool = False, width: int | None = None) -> DecodeTrace:
    """Greedy autoregressive copy of ``bits`` from the prompt ``bits|``.

    The default path verifies a guessed continuation with one causal forward
    pass and repairs the first disagreement, repeating until the guess is a
    fixed point; by causality the rows equal the step-by-step decode, which
    ``naive=True`` runs literally.  ``width`` is passed to :func:`forward`.
    """
    bits = np.asarray(bits, dtype=np.int64)
    n = len(bits)
    if 2 * n + 1 > config.max_context:
        raise ContextLengthError(f"copying {n} bits needs context {2 * n + 1} > {config.max_context}")
    if n == 0:
        return DecodeTrace(bits, np.zeros((0, config.vocab_size)), np.zeros(0, dtype=np.int64))
    prompt = np.concatenate([bits, [STOP]])
    if naive:
        out: list[int] = []
        rows = []
        for _ in range(n):
            dist = forward(params, config, np.concatenate([prompt, out]).astype(np.int64), width)[-1]
            rows.append(dist)
            out.append(greedy_next(dist))
        return DecodeTrace(bits, np.array(rows), np.array(out, dtype=np.int64))

    guess = bits.copy()
    while True:
        dists = forward(params, config, np.concatenate([prompt, guess[:-1]]), width)[n:]
        choice = np.where(dists[:, 0] >= dists[:, 1], 0, 1)
        bad = np.flatnonzero(choice != guess)
        if bad.size == 0:
            return DecodeTrace(bits, dists, guess)
        j = bad[0]
        guess = np.concatenate([guess[:j], choice[j:]])


def sample_with_temperature(dist, temperature: float, rng: np.random.Generator) -> int:
    """Draw from ``{0, 1}`` with weights ``p**(1/temperature)``, renormalised."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    return 1 if rng.random() < tempered_one_prob(dist, temperature) else 0


def tempered_one_prob(dist, temperature: float) -> float:
    p = np.asarray(dist[:2], dtype=np.float64)
    with np.errstate(divide="ignore"):
        z = np.log(p) / temperature
    if np.isneginf(z).all():
        return 0.0
    z = z - z.max()
    w = np.exp(z)
    return float(w[1] / w.sum())
