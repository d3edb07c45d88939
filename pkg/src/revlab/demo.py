"""The bundled demo corpus: text sampled from a fixed, irreversible Markov chain."""

from __future__ import annotations

from importlib import resources

import numpy as np

from .infotheory import MarkovChain
from .seqcore import Corpus, parse_corpus

DEMO_SEED = 20240611
DEMO_DOCS = 48
DEMO_MIN_LEN = 16
DEMO_MAX_LEN = 40
DEMO_RESOURCE = "demo_corpus.txt"


def demo_chain() -> MarkovChain:
    # rows: a e n r s t; the cyclic drift a->n->t->e->r->s->a makes it irreversible
    p = np.array(
        [
            [0.05, 0.10, 0.50, 0.15, 0.10, 0.10],
            [0.10, 0.05, 0.10, 0.55, 0.10, 0.10],
            [0.10, 0.10, 0.05, 0.10, 0.10, 0.55],
            [0.10, 0.10, 0.10, 0.05, 0.55, 0.10],
            [0.55, 0.10, 0.10, 0.10, 0.05, 0.10],
            [0.10, 0.55, 0.10, 0.10, 0.10, 0.05],
        ]
    )
    return MarkovChain(p, list("aenrst"))


def generate_demo_corpus(seed: int = DEMO_SEED) -> Corpus:
    mc = demo_chain()
    rng = np.random.default_rng(seed)
    lengths = rng.integers(DEMO_MIN_LEN, DEMO_MAX_LEN + 1, size=DEMO_DOCS)
    cum = np.cumsum(mc.transition, axis=1)
    start = np.cumsum(mc.stationary)
    docs = []
    for n in lengths:
        state = int(np.searchsorted(start, rng.random(), side="right"))
        path = [state]
        for _ in range(n - 1):
            state = min(int(np.searchsorted(cum[state], rng.random(), side="right")), mc.n_states - 1)
            path.append(state)
        docs.append("".join(mc.states[i] for i in path))
    return Corpus(tuple(docs))


def demo_corpus() -> Corpus:
    text = resources.files("revlab.data").joinpath(DEMO_RESOURCE).read_text(encoding="utf-8")
    return parse_corpus(text)


def demo_corpus_text() -> bytes:
    return resources.files("revlab.data").joinpath(DEMO_RESOURCE).read_bytes()
