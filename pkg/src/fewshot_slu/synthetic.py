"""Synthetic separable IC/SL benchmark.

Each intent owns a private vocabulary split into carrier words and slot
values for its own slot types; a small shared vocabulary of filler words adds
overlap between intents. Embeddings are Gaussian draws around random intent
centres, with slot values pulled toward per-type offsets and a shared entity
direction, so that related words sit near each other as in trained tables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import OTHER_TAG, Dataset, SplitManifest, Utterance, begin, inside, save_dataset
from .encoder import EmbeddingProvider, save_embeddings


@dataclass
class Benchmark:
    dataset: Dataset
    manifest: SplitManifest
    provider: EmbeddingProvider
    pretrain: Dataset
    validation: Dataset
    test: Dataset

    def write(self, directory: str | Path) -> dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "dataset": directory / "synthetic.jsonl",
            "manifest": directory / "manifest.json",
            "embeddings": directory / "embeddings.txt",
        }
        save_dataset(self.dataset, paths["dataset"])
        paths["manifest"].write_text(json.dumps(self.manifest.to_json(), indent=2) + "\n")
        save_embeddings(self.provider, paths["embeddings"])
        return paths


def _utterance(rng, intent, carriers, values, shared, uid, shared_rate):
    n_carrier = int(rng.integers(3, 7))
    words = [
        shared[rng.integers(len(shared))] if shared and rng.random() < shared_rate
        else carriers[rng.integers(len(carriers))]
        for _ in range(n_carrier)
    ]
    tags = [OTHER_TAG] * n_carrier
    n_slots = int(rng.integers(1, len(values) + 1))
    slot_types = rng.choice(len(values), size=n_slots, replace=False)
    # slot spans go after distinct carrier positions, so two spans never touch
    anchors = sorted(rng.choice(n_carrier, size=n_slots, replace=False).tolist(), reverse=True)
    for anchor, k in zip(anchors, slot_types.tolist()):
        slot_type, pool = values[k]
        span = [pool[i] for i in rng.integers(len(pool), size=int(rng.integers(1, 3)))]
        span_tags = [begin(slot_type)] + [inside(slot_type)] * (len(span) - 1)
        words[anchor + 1 : anchor + 1] = span
        tags[anchor + 1 : anchor + 1] = span_tags
    return Utterance(uid, tuple(words), intent, tuple(tags))


def _clustered_embeddings(rng, intents, words_of, values_of, shared, dim, scales):
    """Random vectors with intent, slot-type and entity structure.

    carrier of intent i:     centre_i + noise
    value of slot type k:    centre_i + offset_ik + entity + noise
    shared filler:           noise only
    """
    def draw(scale, size=()):
        return rng.normal(0.0, scale / np.sqrt(dim), size=size + (dim,))

    entity = draw(scales["entity"])
    vecs = {w: draw(scales["noise"]) for w in shared}
    for intent in intents:
        centre = draw(scales["centre"])
        slot_words = set()
        for _, pool in values_of[intent]:
            offset = draw(scales["slot"])
            for w in pool:
                vecs[w] = centre + offset + entity + draw(scales["noise"])
                slot_words.add(w)
        for w in words_of[intent]:
            if w not in slot_words:
                vecs[w] = centre + draw(scales["noise"])
    return vecs


def generate(
    seed: int = 0,
    n_pretrain: int = 5,
    n_validation: int = 3,
    n_test: int = 5,
    per_intent: int = 200,
    vocab_per_intent: int = 30,
    slot_types_per_intent: int = 2,
    values_per_slot: int = 4,
    shared_vocab: int = 10,
    shared_rate: float = 0.3,
    dim: int = 16,
    centre_scale: float = 1.0,
    slot_scale: float = 0.7,
    entity_scale: float = 1.5,
    noise_scale: float = 0.5,
) -> Benchmark:
    """Build the benchmark; intents are split pretrain / validation / test in order."""
    rng = np.random.default_rng(seed)
    n_intents = n_pretrain + n_validation + n_test
    n_values = slot_types_per_intent * values_per_slot
    if n_values >= vocab_per_intent:
        raise ValueError("slot values must leave room for carrier words")
    shared = [f"w_shared{j}" for j in range(shared_vocab)]
    intents = [f"intent{i:02d}" for i in range(n_intents)]
    words_of, values_of = {}, {}
    utterances = []
    for intent in intents:
        words = [f"{intent}_w{j}" for j in range(vocab_per_intent)]
        values = [
            (f"{intent}_s{k}", words[k * values_per_slot : (k + 1) * values_per_slot])
            for k in range(slot_types_per_intent)
        ]
        words_of[intent], values_of[intent] = words, values
        carriers = words[n_values:]
        for j in range(per_intent):
            utterances.append(
                _utterance(rng, intent, carriers, values, shared, f"{intent}-{j:04d}", shared_rate)
            )
    scales = {
        "centre": centre_scale,
        "slot": slot_scale,
        "entity": entity_scale,
        "noise": noise_scale,
    }
    vecs = _clustered_embeddings(rng, intents, words_of, values_of, shared, dim, scales)
    vocab = shared + [w for i in intents for w in words_of[i]]
    provider = EmbeddingProvider(vocab, np.array([vecs[w] for w in vocab]))
    manifest = SplitManifest(
        frozenset(intents[:n_pretrain]),
        frozenset(intents[n_pretrain : n_pretrain + n_validation]),
        frozenset(intents[n_pretrain + n_validation :]),
    )
    dataset = Dataset(tuple(utterances))

    def part(names):
        return Dataset(tuple(u for u in utterances if u.intent in names))

    return Benchmark(
        dataset,
        manifest,
        provider,
        part(manifest.pretrain),
        part(manifest.validation),
        part(manifest.test),
    )
