"""Entropy rate, reversed processes and time-reversal divergence.

Exact quantities come from finite Markov chains; plug-in estimates come from
n-gram counts of tokenized text. All logarithms are natural (nats).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

from .seqcore import Corpus
from .tokenizer import BpeTokenizer, encode_corpus

LN2 = math.log(2.0)
ROW_TOL = 1e-12
STATIONARY_TOL = 1e-10
ENUMERATION_LIMIT = 10**7


class ChainError(ValueError):
    pass


def _xlogy(x, y):
    """x * ln(y) with the 0 * ln(0) := 0 convention."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.zeros(np.broadcast(x, y).shape)
    nz = x != 0
    np.log(y, out=out, where=nz)
    return x * out


def is_irreducible(transition: np.ndarray) -> bool:
    n_comp, _ = connected_components(transition > 0, directed=True, connection="strong")
    return n_comp == 1


def stationary_distribution(transition: np.ndarray, tol: float = 1e-14, max_iter: int = 1_000_000) -> np.ndarray:
    """Power iteration on the lazy chain ``(I + P) / 2`` from the uniform vector.

    The lazy chain shares the stationary vector of ``P`` and is aperiodic, so
    the iteration also converges for periodic chains. Iteration stops once
    ``max |sigma P - sigma| <= tol``.
    """
    p = np.asarray(transition, dtype=np.float64)
    n = p.shape[0]
    if not is_irreducible(p):
        raise ChainError("no unique stationary distribution (chain is reducible)")
    sigma = np.full(n, 1.0 / n)
    lazy = 0.5 * (np.eye(n) + p)
    # the first iterations square the operator, so step t applies lazy^(2^t)
    op = lazy
    for it in range(max_iter):
        if np.max(np.abs(sigma @ p - sigma)) <= tol:
            return sigma
        sigma = sigma @ op
        sigma /= sigma.sum()
        if it < 40:
            op = op @ op
            op /= op.sum(axis=1, keepdims=True)
        elif it == 40:
            op = lazy
    residual = np.max(np.abs(sigma @ p - sigma))
    if residual > STATIONARY_TOL:
        raise ChainError(f"stationary iteration did not converge (residual {residual:.3e})")
    return sigma


@dataclass
class MarkovChain:
    transition: np.ndarray
    states: list[str] | None = None
    stationary: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        p = np.array(self.transition, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] != p.shape[1] or p.shape[0] == 0:
            raise ChainError(f"transition matrix must be square and non-empty, got shape {p.shape}")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ChainError("transition entries must be finite and non-negative")
        rows = p.sum(axis=1)
        if np.max(np.abs(rows - 1.0)) > ROW_TOL:
            raise ChainError(f"rows must sum to 1 (max deviation {np.max(np.abs(rows - 1.0)):.3e})")
        self.transition = p
        if self.states is None:
            self.states = [str(i) for i in range(p.shape[0])]
        elif len(self.states) != p.shape[0]:
            raise ChainError("number of state labels does not match the transition matrix")
        if self.stationary is None:
            self.stationary = stationary_distribution(p)
        else:
            s = np.asarray(self.stationary, dtype=np.float64)
            if abs(s.sum() - 1.0) > STATIONARY_TOL or np.max(np.abs(s @ p - s)) > STATIONARY_TOL:
                raise ChainError("supplied stationary vector is not stationary")
            self.stationary = s

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    def to_dict(self) -> dict:
        return {"states": list(self.states), "transition": self.transition.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "MarkovChain":
        if "transition" not in data:
            raise ChainError("chain file needs a 'transition' field")
        states = data.get("states")
        return cls(np.asarray(data["transition"], dtype=np.float64), list(states) if states is not None else None)

    @classmethod
    def load(cls, path: str | Path) -> "MarkovChain":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    def sample(self, n_docs: int, length: int, rng: np.random.Generator) -> np.ndarray:
        """Draw ``n_docs`` independent stationary runs of ``length`` states."""
        cum = np.cumsum(self.transition, axis=1)
        cum[:, -1] = 1.0
        start_cum = np.cumsum(self.stationary)
        start_cum[-1] = 1.0
        out = np.empty((n_docs, length), dtype=np.int64)
        if length == 0:
            return out
        out[:, 0] = np.searchsorted(start_cum, rng.random(n_docs), side="right")
        for t in range(1, length):
            u = rng.random(n_docs)
            rows = cum[out[:, t - 1]]
            out[:, t] = (u[:, None] >= rows).sum(axis=1)
        return out


def entropy_rate(mc: MarkovChain) -> float:
    p = mc.transition
    row_h = -_xlogy(p, p).sum(axis=1)
    return float(mc.stationary @ row_h)


def perplexity_floor(h: float) -> float:
    if h < 0:
        raise ValueError(f"entropy rate must be non-negative, got {h}")
    return math.exp(h)


def reverse_chain(mc: MarkovChain) -> MarkovChain:
    """Time reversal: ``Q[i, j] = sigma[j] P[j, i] / sigma[i]``; sigma is kept."""
    s = mc.stationary
    q = (mc.transition.T * s[None, :]) / s[:, None]
    # renormalize away rounding so rows pass the stochasticity check
    q = q / q.sum(axis=1, keepdims=True)
    return MarkovChain(q, list(mc.states), stationary=s.copy())


def detailed_balance_gap(mc: MarkovChain) -> float:
    flow = mc.stationary[:, None] * mc.transition
    return float(np.max(np.abs(flow - flow.T)))


def time_reversal_divergence(mc: MarkovChain) -> float:
    """KL rate between the forward and reversed path measures.

    Returns ``math.inf`` when some transition is possible in one direction
    only.
    """
    p = mc.transition
    if np.any((p > 0) != (p.T > 0)):
        return math.inf
    s = mc.stationary
    flow = s[:, None] * p
    mask = flow > 0
    a = float(np.sum(flow[mask] * np.log(flow[mask] / flow.T[mask])))
    return max(a, 0.0)


def per_state_divergence(mc: MarkovChain) -> np.ndarray:
    """Contribution of each source state to ``time_reversal_divergence``."""
    p = mc.transition
    s = mc.stationary
    flow = s[:, None] * p
    out = np.zeros(mc.n_states)
    for i in range(mc.n_states):
        for j in range(mc.n_states):
            if flow[i, j] > 0:
                out[i] += flow[i, j] * (math.log(flow[i, j] / flow[j, i]) if flow[j, i] > 0 else math.inf)
    return out


def _path_logprobs(mc: MarkovChain, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Log-probabilities of all n-paths under P and under the reversed measure.

    Entry ``x_1 * k^(n-1) + ... + x_n`` of each array corresponds to the path
    ``(x_1, ..., x_n)``; ``logP^R(x_1..x_n) = logP(x_n..x_1)``.
    """
    k = mc.n_states
    with np.errstate(divide="ignore"):
        log_s = np.log(mc.stationary)
        log_p = np.log(mc.transition)
    fwd = log_s.copy()
    for _ in range(n - 1):
        fwd = (fwd.reshape(-1, k)[:, :, None] + log_p[None, :, :]).reshape(-1)
    rev = fwd.reshape((k,) * n).transpose(tuple(range(n - 1, -1, -1))).reshape(-1)
    return fwd, rev


def path_kl_bruteforce(mc: MarkovChain, n: int) -> float:
    """Exact ``KL(P(X_1..X_n) || P^R(X_1..X_n)) / n`` by enumerating every path."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if mc.n_states ** n > ENUMERATION_LIMIT:
        raise ValueError(f"{mc.n_states}^{n} paths exceed the enumeration limit of {ENUMERATION_LIMIT}")
    fwd, rev = _path_logprobs(mc, n)
    live = np.isfinite(fwd)
    if np.any(~np.isfinite(rev[live])):
        return math.inf
    w = np.exp(fwd[live])
    return float(np.sum(w * (fwd[live] - rev[live]))) / n


def block_entropy_bruteforce(mc: MarkovChain, n: int) -> float:
    """``H(X_1..X_n) / n`` by path enumeration."""
    if mc.n_states ** n > ENUMERATION_LIMIT:
        raise ValueError(f"{mc.n_states}^{n} paths exceed the enumeration limit of {ENUMERATION_LIMIT}")
    fwd, _ = _path_logprobs(mc, n)
    live = np.isfinite(fwd)
    return float(-np.sum(np.exp(fwd[live]) * fwd[live])) / n


# --------------------------------------------------------------------------
# plug-in estimation from text
# --------------------------------------------------------------------------


@dataclass
class NGramCounts:
    """Counts of (context, next) pairs; contexts hold ``order - 1`` ids."""

    order: int
    counts: dict[tuple[tuple[int, ...], int], int]

    def __post_init__(self):
        if self.order < 2:
            raise ValueError("n-gram order must be at least 2")

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @classmethod
    def from_sequences(cls, seqs, order: int) -> "NGramCounts":
        raw: dict[tuple[int, ...], int] = {}
        for z in seqs:
            z = tuple(z)
            for i in range(len(z) - order + 1):
                gram = z[i : i + order]
                raw[gram] = raw.get(gram, 0) + 1
        counts = {(g[:-1], g[-1]): c for g, c in sorted(raw.items())}
        return cls(order, counts)

    def grams(self) -> dict[tuple[int, ...], int]:
        return {ctx + (nxt,): c for (ctx, nxt), c in self.counts.items()}

    def reversed(self) -> "NGramCounts":
        """Counts the reversed text would produce, obtained by reversing keys."""
        rev = {}
        for gram, c in self.grams().items():
            r = gram[::-1]
            rev[(r[:-1], r[-1])] = c
        return NGramCounts(self.order, dict(sorted(rev.items())))


def plugin_chain(counts: NGramCounts, symbols: list[int], lam: float) -> tuple[MarkovChain, list[tuple[int, ...]]]:
    """Add-lambda smoothed Markov chain on all ``order - 1`` tuples over ``symbols``.

    State ``c`` moves to ``c[1:] + (y,)`` with probability
    ``(count(c, y) + lam) / (count(c) + lam * |symbols|)``.
    """
    k = counts.order - 1
    contexts = list(product(symbols, repeat=k))
    index = {c: i for i, c in enumerate(contexts)}
    sym_index = {s: i for i, s in enumerate(symbols)}
    v = len(symbols)
    table = np.zeros((len(contexts), v))
    for (ctx, nxt), c in counts.counts.items():
        table[index[ctx], sym_index[nxt]] += c
    probs = (table + lam) / (table.sum(axis=1, keepdims=True) + lam * v)
    n = len(contexts)
    p = np.zeros((n, n))
    for i, ctx in enumerate(contexts):
        for y_i, y in enumerate(symbols):
            p[i, index[ctx[1:] + (y,)]] += probs[i, y_i]
    labels = [" ".join(map(str, c)) for c in contexts]
    return MarkovChain(p, labels), contexts


def block_divergence(mc: MarkovChain, contexts: list[tuple[int, ...]]) -> tuple[float, np.ndarray]:
    """Symbol-level reversal divergence of a higher-order chain on tuple states.

    With ``mu_k`` the stationary k-block law and ``mu_{k+1}`` the (k+1)-block
    law, the KL rate is ``KL(mu_{k+1} || mu_{k+1} o rev) - KL(mu_k || mu_k o rev)``.
    Returns the rate and its split over contexts.
    """
    s = mc.stationary
    index = {c: i for i, c in enumerate(contexts)}
    k = len(contexts[0])
    mu_k = {c: s[i] for i, c in enumerate(contexts)}
    mu_k1: dict[tuple[int, ...], float] = {}
    p = mc.transition
    for i, c in enumerate(contexts):
        for j in np.nonzero(p[i])[0]:
            y = contexts[j][-1]
            mu_k1[c + (y,)] = s[i] * p[i, j]
    contrib = np.zeros(len(contexts))
    for w, m in mu_k1.items():
        if m <= 0:
            continue
        mr = mu_k1.get(w[::-1], 0.0)
        contrib[index[w[:k]]] += m * (math.log(m / mr) if mr > 0 else math.inf)
    for c, m in mu_k.items():
        if m <= 0:
            continue
        mr = mu_k[c[::-1]]
        contrib[index[c]] -= m * (math.log(m / mr) if mr > 0 else math.inf)
    return float(contrib.sum()), contrib


@dataclass
class DivergenceEstimate:
    h_nats: float
    A_nats: float
    order: int
    lam: float
    token_count: int
    n_contexts: int
    h_reversed_nats: float
    warnings: list[str]
    contexts: list[str] = field(repr=False)
    contributions: np.ndarray = field(repr=False)

    @property
    def h_bits(self) -> float:
        return self.h_nats / LN2

    @property
    def A_bits(self) -> float:
        return self.A_nats / LN2

    def to_dict(self) -> dict:
        return {
            "h_nats": self.h_nats,
            "h_bits": self.h_bits,
            "A_nats": self.A_nats,
            "A_bits": self.A_bits,
            "h_reversed_nats": self.h_reversed_nats,
            "order": self.order,
            "lambda": self.lam,
            "token_count": self.token_count,
            "n_contexts": self.n_contexts,
            "warnings": list(self.warnings),
        }

    def contributions_csv(self) -> str:
        lines = ["context,A_contribution_nats"]
        for ctx, c in zip(self.contexts, self.contributions):
            lines.append(f"{json.dumps(ctx, ensure_ascii=False)},{c!r}")
        return "\n".join(lines) + "\n"


def estimate_from_sequences(seqs, order: int = 2, lam: float = 0.5, symbols=None, labels=None) -> DivergenceEstimate:
    if order < 2:
        raise ValueError("order must be at least 2")
    if order > 5:
        raise ValueError("orders above 5 are not supported")
    if lam <= 0:
        raise ValueError("smoothing lambda must be positive")
    seqs = [tuple(z) for z in seqs]
    counts = NGramCounts.from_sequences(seqs, order)
    if symbols is None:
        symbols = sorted({t for z in seqs for t in z})
    if not symbols:
        raise ValueError("corpus has no tokens")
    n_contexts = len(symbols) ** (order - 1)
    if n_contexts > 20000:
        raise ValueError(f"{n_contexts} contexts is too many for the plug-in chain")
    token_count = sum(len(z) for z in seqs)
    warnings = []
    if token_count < 10 * n_contexts:
        warnings.append(f"only {token_count} tokens for {n_contexts} contexts (< 10 per context)")
    if counts.total == 0:
        warnings.append(f"no document is long enough to hold an {order}-gram")

    chain, contexts = plugin_chain(counts, list(symbols), lam)
    rev_chain, _ = plugin_chain(counts.reversed(), list(symbols), lam)
    h = entropy_rate(chain)
    if order == 2:
        a = time_reversal_divergence(chain)
        contrib = per_state_divergence(chain)
    else:
        a, contrib = block_divergence(chain, contexts)
        a = max(a, 0.0)
    if labels is None:
        names = [" ".join(map(str, c)) for c in contexts]
    else:
        names = ["".join(labels[t] for t in c) for c in contexts]
    return DivergenceEstimate(
        h_nats=h,
        A_nats=a,
        order=order,
        lam=lam,
        token_count=token_count,
        n_contexts=n_contexts,
        h_reversed_nats=entropy_rate(rev_chain),
        warnings=warnings,
        contexts=names,
        contributions=contrib,
    )


def estimate_from_corpus(t: BpeTokenizer, d: Corpus, order: int = 2, lam: float = 0.5) -> DivergenceEstimate:
    """Plug-in entropy rate and reversal divergence of tokenized text.

    Context labels in the contribution table are token strings; the chain is
    built over the tokens that actually occur.
    """
    seqs = encode_corpus(t, d)
    return estimate_from_sequences(seqs, order=order, lam=lam, labels=t.tokens())


def chain_corpus(mc: MarkovChain, n_docs: int, length: int, seed: int, alphabet=None) -> Corpus:
    """Text sampled from a chain; state ``i`` is written as ``alphabet[i]``."""
    alphabet = alphabet if alphabet is not None else mc.states
    if any(len(a) != 1 for a in alphabet):
        raise ValueError("each state needs a single-character label")
    rng = np.random.default_rng(seed)
    paths = mc.sample(n_docs, length, rng)
    lut = np.array(list(alphabet))
    return Corpus(tuple("".join(row) for row in lut[paths]))


def cycle_chain(forward: float = 0.7, backward: float = 0.2, stay: float = 0.1, n: int = 3) -> MarkovChain:
    p = np.zeros((n, n))
    for i in range(n):
        p[i, (i + 1) % n] += forward
        p[i, (i - 1) % n] += backward
        p[i, i] += stay
    return MarkovChain(p, [chr(ord("a") + i) for i in range(n)])
