from __future__ import annotations

import numpy as np
import pytest

from fewshot_slu.corpus import Dataset, Utterance, parse_tags
from fewshot_slu.encoder import EmbeddingProvider


def make_utt(uid: str, intent: str, words: str, tags: str | None = None) -> Utterance:
    tokens = tuple(words.split())
    tags = tags.split() if tags else ["O"] * len(tokens)
    return Utterance(uid, tokens, intent, parse_tags(tags))


def toy_dataset(intents=("a", "b", "c"), per_intent=25, seed=0) -> Dataset:
    """Small corpus: each intent has its own words and slot type, plus a shared 'city'."""
    rng = np.random.default_rng(seed)
    utts = []
    for intent in intents:
        for j in range(per_intent):
            n = int(rng.integers(2, 5))
            words = [f"{intent}{int(rng.integers(5))}" for _ in range(n)]
            tags = ["O"] * n
            pos = int(rng.integers(n))
            kind = f"{intent}slot" if j % 3 else "city"
            tags[pos] = f"B-{kind}"
            words[pos] = f"{kind}{int(rng.integers(3))}"
            utts.append(make_utt(f"{intent}-{j}", intent, " ".join(words), " ".join(tags)))
    return Dataset(tuple(utts))


def toy_provider(dataset: Dataset, dim: int = 4, seed: int = 0) -> EmbeddingProvider:
    vocab = sorted({t for u in dataset for t in u.tokens})
    rng = np.random.default_rng(seed)
    return EmbeddingProvider(vocab, rng.normal(size=(len(vocab), dim)))


@pytest.fixture
def toy():
    data = toy_dataset()
    return data, toy_provider(data)


# filled by test_acceptance.py, one line per criterion
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
