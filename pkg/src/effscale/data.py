"""Token streams: raw u32 files and a synthetic order-2 Markov corpus."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

VAL_FRACTION = 0.05


@dataclass
class TokenStream:
    tokens: np.ndarray
    vocab_size: int
    n_train: int
    source: "MarkovSource | None" = None

    def __post_init__(self):
        if self.tokens.size and int(self.tokens.max()) >= self.vocab_size:
            raise ValueError("token id exceeds vocab size")
        if not 0 <= self.n_train <= self.tokens.size:
            raise ValueError("bad train/validation split")

    def __len__(self) -> int:
        return int(self.tokens.size)

    @property
    def train(self) -> np.ndarray:
        return self.tokens[: self.n_train]

    @property
    def validation(self) -> np.ndarray:
        return self.tokens[self.n_train:]


def _split(n: int, val_fraction: float) -> int:
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must be in [0, 1)")
    return n - int(round(n * val_fraction))


def load_tokens(path, vocab_size: int, val_fraction: float = VAL_FRACTION) -> TokenStream:
    """Read raw little-endian u32 ids; the last ``val_fraction`` is validation."""
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise ValueError(f"{path}: truncated token file ({len(raw)} bytes)")
    tokens = np.frombuffer(raw, dtype="<u4").astype(np.uint32)
    if tokens.size and int(tokens.max()) >= vocab_size:
        raise ValueError(f"{path}: token id {int(tokens.max())} >= vocab size {vocab_size}")
    return TokenStream(tokens, vocab_size, _split(tokens.size, val_fraction))


def save_tokens(path, tokens: np.ndarray) -> None:
    np.asarray(tokens).astype("<u4").tofile(path)


@dataclass
class MarkovSource:
    """Sparse order-2 transition table ``p(next | prev2, prev1)``.

    Each context row mixes a shared per-``prev1`` distribution with a
    context-specific one, so a small model learns the bigram part early and
    larger models keep improving by memorizing the pair-specific part.
    """

    vocab_size: int
    support: np.ndarray  # [V*V, K] token ids
    probs: np.ndarray  # [V*V, K], rows sum to 1

    @classmethod
    def build(cls, vocab_size: int, seed: int, bigram_support: int = 16,
              pair_support: int = 4, pair_weight: float = 0.5) -> "MarkovSource":
        if vocab_size < 8:
            raise ValueError("vocab_size must be at least 8")
        v = vocab_size
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x5EED])))
        k1 = min(bigram_support, v)
        k2 = min(pair_support, v)
        big_ids = np.argsort(rng.random((v, v)), axis=1)[:, :k1]
        big_p = rng.dirichlet(np.full(k1, 0.5), size=v)
        pair_ids = rng.integers(0, v, size=(v * v, k2))
        pair_p = rng.dirichlet(np.full(k2, 1.0), size=v * v)
        prev1 = np.arange(v * v) % v
        support = np.concatenate([big_ids[prev1], pair_ids], axis=1)
        probs = np.concatenate([(1 - pair_weight) * big_p[prev1], pair_weight * pair_p], axis=1)
        return cls(v, support, probs)

    def conditional(self, context: int) -> np.ndarray:
        """Dense next-token distribution for context index ``prev2 * V + prev1``."""
        return np.bincount(self.support[context], weights=self.probs[context], minlength=self.vocab_size)

    def stationary(self, iters: int = 500, tol: float = 1e-12) -> np.ndarray:
        """Stationary distribution over contexts by power iteration."""
        v = self.vocab_size
        n = v * v
        nxt = (np.arange(n)[:, None] % v) * v + self.support
        pi = np.full(n, 1.0 / n)
        for _ in range(iters):
            new = np.bincount(nxt.ravel(), weights=(pi[:, None] * self.probs).ravel(), minlength=n)
            if np.abs(new - pi).sum() < tol:
                pi = new
                break
            pi = new
        return pi / pi.sum()

    def entropy_rate(self) -> float:
        """Per-token conditional entropy in nats: the irreducible loss floor."""
        v = self.vocab_size
        n = v * v
        flat_ids = (np.arange(n)[:, None] * v + self.support).ravel()
        dense = np.bincount(flat_ids, weights=self.probs.ravel(), minlength=n * v).reshape(n, v)
        with np.errstate(divide="ignore", invalid="ignore"):
            h = -np.where(dense > 0, dense * np.log(dense), 0.0).sum(axis=1)
        return float(self.stationary() @ h)

    def sample(self, length: int, seed: int, chains: int = 1024) -> np.ndarray:
        """Sample ``length`` tokens as concatenated independent chains."""
        v = self.vocab_size
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xC0A1])))
        chains = max(1, min(chains, length // 64 or 1))
        steps = -(-length // chains)
        out = np.empty((chains, steps), dtype=np.uint32)
        cum = np.cumsum(self.probs, axis=1)
        cum[:, -1] = 1.0
        a = rng.integers(0, v, size=chains)
        b = rng.integers(0, v, size=chains)
        for t in range(steps):
            ctx = a * v + b
            u = rng.random(chains)
            k = (cum[ctx] < u[:, None]).sum(axis=1)
            c = self.support[ctx, k]
            out[:, t] = c
            a, b = b, c
        return out.reshape(-1)[:length]


def synth_corpus(vocab_size: int, length: int, seed: int,
                 val_fraction: float = VAL_FRACTION) -> TokenStream:
    """Deterministic order-2 Markov token stream; the source is attached."""
    source = MarkovSource.build(vocab_size, seed)
    tokens = source.sample(length, seed)
    return TokenStream(tokens, vocab_size, _split(tokens.size, val_fraction), source)


def window_starts(n_tokens: int, seq_len: int) -> np.ndarray:
    """Starts of [start, start + seq_len] windows lying inside ``n_tokens``."""
    return np.arange(0, max(n_tokens - seq_len, 0), seq_len)


def batches(stream: TokenStream, batch: int, seq_len: int, seed: int) -> Iterator[np.ndarray]:
    """Endless ``[batch, seq_len + 1]`` blocks of shuffled training windows.

    Windows tile the training slice (adjacent windows share one token) and are
    reshuffled every epoch.
    """
    starts = window_starts(stream.n_train, seq_len)
    if starts.size < batch:
        raise ValueError(f"training slice too short for a batch of {batch}x{seq_len + 1}")
    offsets = np.arange(seq_len + 1)
    train = stream.train
    epoch = 0
    while True:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch])))
        order = rng.permutation(starts)
        for i in range(0, order.size - batch + 1, batch):
            yield train[order[i:i + batch, None] + offsets].astype(np.int64)
        epoch += 1


def validation_blocks(stream: TokenStream, batch: int, seq_len: int, n_tokens: int) -> Iterator[np.ndarray]:
    """Sequential validation windows covering about ``n_tokens`` predicted tokens."""
    starts = window_starts(stream.validation.size, seq_len)
    need = max(1, -(-n_tokens // seq_len))
    if starts.size < need:
        raise ValueError(f"validation slice holds {starts.size} windows, {need} needed")
    starts = starts[:need]
    offsets = np.arange(seq_len + 1)
    val = stream.validation
    for i in range(0, starts.size, batch):
        yield val[starts[i:i + batch, None] + offsets].astype(np.int64)
