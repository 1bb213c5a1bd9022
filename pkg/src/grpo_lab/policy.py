"""Tiny autoregressive token policy.

A fixed-window, one-hidden-layer network over token embeddings.  Small enough
that every gradient can be checked against finite differences, but a real
autoregressive sampler all the same: contexts slide over the prompt and the
tokens generated so far.

Parameters live in one flat float64 vector, partitioned as

    embeddings  (vocab_size + 1, embed_dim)   last row is the pad embedding
    w_hidden    (hidden_dim, context_window * embed_dim)
    b_hidden    (hidden_dim,)
    w_out       (vocab_size, hidden_dim)
    b_out       (vocab_size,)
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
BOX_OPEN = "\\boxed{"
BOX_CLOSE = "}"
EOS = "<eos>"
RESERVED = (THINK_OPEN, THINK_CLOSE, BOX_OPEN, BOX_CLOSE, EOS)


class VocabularyError(ValueError):
    """Raised for token ids or text that fall outside the vocabulary."""


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self) -> None:
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        if self.tokens.count(EOS) != 1:
            raise VocabularyError("vocabulary must contain exactly one <eos>")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def default(cls) -> "Vocabulary":
        symbols = list(string.digits) + ["+", "-", "*", "="] + list(string.ascii_lowercase)
        return cls(tuple(symbols) + RESERVED)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def pad_id(self) -> int:
        # Input-only id: has an embedding row, never an output class.
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}") from None

    def encode(self, text: str) -> list[int]:
        """Greedy tokenization: reserved multi-character tokens win, then single characters."""
        ids = []
        i = 0
        multi = sorted((t for t in self.tokens if len(t) > 1), key=len, reverse=True)
        while i < len(text):
            for tok in multi:
                if text.startswith(tok, i):
                    ids.append(self._index[tok])
                    i += len(tok)
                    break
            else:
                ch = text[i]
                if ch not in self._index:
                    raise VocabularyError(f"character {ch!r} at offset {i} not in vocabulary")
                ids.append(self._index[ch])
                i += 1
        return ids

    def decode(self, ids: Iterable[int], *, keep_eos: bool = False) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < self.size:
                raise VocabularyError(f"token id {i} out of range 0..{self.size - 1}")
            if i == self.eos_id and not keep_eos:
                continue
            out.append(self.tokens[i])
        return "".join(out)

    def check_ids(self, ids: Sequence[int]) -> None:
        for i in ids:
            if not 0 <= int(i) < self.size:
                raise VocabularyError(f"token id {int(i)} out of range 0..{self.size - 1}")


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """Immutable parameter snapshot plus the architecture needed to read it."""

    vocab: Vocabulary
    context_window: int
    embed_dim: int
    hidden_dim: int
    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float64).ravel()
        expected = param_count(self.vocab.size, self.context_window, self.embed_dim, self.hidden_dim)
        if w.size != expected:
            raise ValueError(f"expected {expected} weights, got {w.size}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def param_count(self) -> int:
        return self.weights.size

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return _shapes(self.vocab.size, self.context_window, self.embed_dim, self.hidden_dim)

    def unpack(self) -> dict[str, np.ndarray]:
        return _unpack(self.weights, self.shapes)

    def replace_weights(self, weights: np.ndarray) -> "PolicyParams":
        return PolicyParams(self.vocab, self.context_window, self.embed_dim, self.hidden_dim, weights)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return (
            self.vocab == other.vocab
            and (self.context_window, self.embed_dim, self.hidden_dim)
            == (other.context_window, other.embed_dim, other.hidden_dim)
            and np.array_equal(self.weights, other.weights)
        )


def _shapes(vocab_size: int, window: int, embed_dim: int, hidden_dim: int) -> dict[str, tuple[int, ...]]:
    return {
        "embeddings": (vocab_size + 1, embed_dim),
        "w_hidden": (hidden_dim, window * embed_dim),
        "b_hidden": (hidden_dim,),
        "w_out": (vocab_size, hidden_dim),
        "b_out": (vocab_size,),
    }


def param_count(vocab_size: int, window: int, embed_dim: int, hidden_dim: int) -> int:
    return sum(int(np.prod(s)) for s in _shapes(vocab_size, window, embed_dim, hidden_dim).values())


def _unpack(flat: np.ndarray, shapes: dict[str, tuple[int, ...]]) -> dict[str, np.ndarray]:
    out = {}
    offset = 0
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        out[name] = flat[offset:offset + n].reshape(shape)
        offset += n
    return out


def init_params(
    vocab: Vocabulary,
    *,
    context_window: int = 8,
    embed_dim: int = 16,
    hidden_dim: int = 64,
    seed: int = 0,
    scale: float = 1.0,
) -> PolicyParams:
    """Random initialization; ``scale=0`` yields the all-zero (uniform) policy."""
    rng = np.random.default_rng(seed)
    shapes = _shapes(vocab.size, context_window, embed_dim, hidden_dim)
    parts = []
    for name, shape in shapes.items():
        if name.startswith("w_"):
            std = scale / np.sqrt(shape[-1])
        elif name == "embeddings":
            std = scale * 0.5
        else:
            std = 0.0
        parts.append(rng.normal(0.0, 1.0, size=shape).ravel() * std)
    return PolicyParams(vocab, context_window, embed_dim, hidden_dim, np.concatenate(parts))


# ---------------------------------------------------------------------------
# Forward / backward over batches of contexts
# ---------------------------------------------------------------------------

def _forward(params: PolicyParams, contexts: np.ndarray, temperature: float) -> dict:
    """contexts: (N, window) int array including pad ids.  Returns activations cache."""
    p = params.unpack()
    x = p["embeddings"][contexts].reshape(len(contexts), -1)
    h = np.tanh(x @ p["w_hidden"].T + p["b_hidden"])
    z = (h @ p["w_out"].T + p["b_out"]) / temperature
    z_max = z.max(axis=1, keepdims=True)
    logsumexp = z_max + np.log(np.exp(z - z_max).sum(axis=1, keepdims=True))
    return {"contexts": contexts, "x": x, "h": h, "logp": z - logsumexp, "p": p, "T": temperature}


def _backward(params: PolicyParams, cache: dict, targets: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Gradient of sum_n weights[n] * logp[n, targets[n]] with respect to the flat parameters."""
    p = cache["p"]
    T = cache["T"]
    n = len(targets)
    probs = np.exp(cache["logp"])
    dz = -probs * weights[:, None]
    dz[np.arange(n), targets] += weights
    dz /= T
    grads = {
        "w_out": dz.T @ cache["h"],
        "b_out": dz.sum(axis=0),
    }
    da = (dz @ p["w_out"]) * (1.0 - cache["h"] ** 2)
    grads["w_hidden"] = da.T @ cache["x"]
    grads["b_hidden"] = da.sum(axis=0)
    dx = (da @ p["w_hidden"]).reshape(n, params.context_window, params.embed_dim)
    d_emb = np.zeros(p["embeddings"].shape)
    np.add.at(d_emb, cache["contexts"], dx)
    grads["embeddings"] = d_emb
    return np.concatenate([grads[name].ravel() for name in params.shapes])


def _sequence_contexts(params: PolicyParams, prompt_ids: Sequence[int], completion_ids: Sequence[int]) -> np.ndarray:
    W = params.context_window
    seq = np.array([params.vocab.pad_id] * W + list(prompt_ids) + list(completion_ids), dtype=np.int64)
    start = len(prompt_ids)
    windows = sliding_window_view(seq, W)
    # Token t sits at index W + start + t; its context is the W ids just before it.
    return windows[start:start + len(completion_ids)]


def _context_array(params: PolicyParams, context: Sequence[int]) -> np.ndarray:
    W = params.context_window
    tail = list(context)[-W:] if W else []
    return np.array([[params.vocab.pad_id] * (W - len(tail)) + tail], dtype=np.int64)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Prompt:
    token_ids: tuple[int, ...]
    text: str

    @classmethod
    def from_text(cls, vocab: Vocabulary, text: str, max_length: int = 32) -> "Prompt":
        ids = tuple(vocab.encode(text))
        if len(ids) > max_length:
            raise ValueError(f"prompt has {len(ids)} tokens, limit is {max_length}")
        return cls(ids, text)

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass(frozen=True)
class Completion:
    token_ids: tuple[int, ...]
    per_token_logprob: tuple[float, ...]
    terminated_by_eos: bool

    @property
    def length(self) -> int:
        return len(self.token_ids)


def forward_logits(params: PolicyParams, context: Sequence[int]) -> np.ndarray:
    """Raw (temperature 1) logits for the next token after ``context``."""
    params.vocab.check_ids(context)
    p = params.unpack()
    ctx = _context_array(params, context)
    x = p["embeddings"][ctx].reshape(1, -1)
    h = np.tanh(x @ p["w_hidden"].T + p["b_hidden"])
    return (h @ p["w_out"].T + p["b_out"])[0]


def sample_batch(
    params: PolicyParams,
    prompts: Sequence[Prompt],
    seeds: Sequence[int],
    *,
    max_len: int,
    temperature: float,
) -> list[Completion]:
    """Sample one completion per (prompt, seed) row, all rows stepped together.

    Each row owns its own generator seeded from ``seeds[row]``, so a row's
    result does not depend on which other rows share the batch.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    if len(prompts) != len(seeds):
        raise ValueError("need one seed per prompt")
    vocab = params.vocab
    for pr in prompts:
        vocab.check_ids(pr.token_ids)
    n = len(prompts)
    if n == 0:
        return []
    W = params.context_window
    eos = vocab.eos_id
    width = W + max(len(pr) for pr in prompts) + max_len
    buf = np.full((n, width), vocab.pad_id, dtype=np.int64)
    pos = np.empty(n, dtype=np.int64)
    for r, pr in enumerate(prompts):
        buf[r, W:W + len(pr)] = pr.token_ids
        pos[r] = W + len(pr)
    rngs = [np.random.Generator(np.random.PCG64(int(s))) for s in seeds]
    tokens = [[] for _ in range(n)]
    logps = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    offsets = np.arange(-W, 0)
    for _ in range(max_len):
        active = np.flatnonzero(~done)
        if active.size == 0:
            break
        ctx = buf[active[:, None], pos[active, None] + offsets]
        logp = _forward(params, ctx, temperature)["logp"]
        cdf = np.cumsum(np.exp(logp), axis=1)
        u = np.array([rngs[r].random() for r in active]) * cdf[:, -1]
        choice = np.minimum((cdf <= u[:, None]).sum(axis=1), vocab.size - 1)
        for k, r in enumerate(active):
            tok = int(choice[k])
            tokens[r].append(tok)
            logps[r].append(float(logp[k, tok]))
            buf[r, pos[r]] = tok
            pos[r] += 1
            if tok == eos:
                done[r] = True
    return [
        Completion(tuple(tokens[r]), tuple(logps[r]), bool(tokens[r] and tokens[r][-1] == eos))
        for r in range(n)
    ]


def sample_completion(
    params: PolicyParams, prompt: Prompt, max_len: int, temperature: float, seed: int
) -> Completion:
    return sample_batch(params, [prompt], [seed], max_len=max_len, temperature=temperature)[0]


def token_logprobs(
    params: PolicyParams, prompt: Prompt | Sequence[int], completion: Completion | Sequence[int], temperature: float = 1.0
) -> np.ndarray:
    prompt_ids = prompt.token_ids if isinstance(prompt, Prompt) else tuple(prompt)
    comp_ids = completion.token_ids if isinstance(completion, Completion) else tuple(completion)
    params.vocab.check_ids(prompt_ids)
    params.vocab.check_ids(comp_ids)
    if not comp_ids:
        return np.zeros(0)
    ctx = _sequence_contexts(params, prompt_ids, comp_ids)
    logp = _forward(params, ctx, temperature)["logp"]
    return logp[np.arange(len(comp_ids)), np.asarray(comp_ids)]


def sequence_logprob(
    params: PolicyParams, prompt: Prompt, completion: Completion, temperature: float = 1.0
) -> tuple[float, np.ndarray]:
    per_token = token_logprobs(params, prompt, completion, temperature)
    return float(per_token.sum()), per_token


def weighted_logprob_gradient(
    params: PolicyParams,
    prompt: Prompt | Sequence[int],
    completion: Completion | Sequence[int],
    weights: np.ndarray,
    temperature: float = 1.0,
) -> np.ndarray:
    """Gradient of sum_t weights[t] * log pi(token_t | context_t)."""
    prompt_ids = prompt.token_ids if isinstance(prompt, Prompt) else tuple(prompt)
    comp_ids = completion.token_ids if isinstance(completion, Completion) else tuple(completion)
    if not comp_ids:
        return np.zeros(params.param_count)
    ctx = _sequence_contexts(params, prompt_ids, comp_ids)
    cache = _forward(params, ctx, temperature)
    return _backward(params, cache, np.asarray(comp_ids), np.asarray(weights, dtype=np.float64))


def batch_logprobs_and_grad(
    params: PolicyParams,
    contexts: np.ndarray,
    targets: np.ndarray,
    weight_fn,
    temperature: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Score many (context, target) rows at once, then backprop ``weight_fn(logp)``.

    ``weight_fn`` receives the per-row log-probabilities and returns per-row
    weights; this lets callers build weights (ratios, clip masks) from the very
    forward pass they differentiate.
    """
    cache = _forward(params, contexts, temperature)
    logp = cache["logp"][np.arange(len(targets)), targets]
    weights = weight_fn(logp)
    return logp, _backward(params, cache, targets, np.asarray(weights, dtype=np.float64))


def sequence_contexts(params: PolicyParams, prompt_ids: Sequence[int], completion_ids: Sequence[int]) -> np.ndarray:
    return _sequence_contexts(params, prompt_ids, completion_ids)


def logprob_gradient(
    params: PolicyParams, prompt: Prompt, completion: Completion, temperature: float = 1.0
) -> np.ndarray:
    """Analytic gradient of ``sequence_logprob(...)[0]`` with respect to every weight."""
    params.vocab.check_ids(completion.token_ids)
    return weighted_logprob_gradient(params, prompt, completion, np.ones(completion.length), temperature)
