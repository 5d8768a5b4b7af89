"""Seeded N-way K-shot episode sampling with query-only slot masking."""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from .corpus import OTHER_TAG, CorpusError, Dataset, Utterance, slot_inventory

PHASES = ("pretrain", "validation", "test")


class Stream(IntEnum):
    """Purpose keys; each gets an independent stream per episode."""

    SAMPLE = 0
    PERTURB = 1
    HEADS = 2
    SHUFFLE = 3


@dataclass(frozen=True, order=True)
class EpisodeSeed:
    run_seed: int
    episode_index: int

    def rng(self, stream: Stream = Stream.SAMPLE) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=self.run_seed & 0xFFFFFFFFFFFFFFFF,
            spawn_key=(self.episode_index, int(stream)),
        )
        return np.random.Generator(np.random.PCG64(ss))


class EpisodeError(ValueError):
    pass


@dataclass(frozen=True)
class Episode:
    """One adaptation task.

    ``query`` holds the Other-masked query utterances; ``raw_query`` keeps the
    unmasked originals so the mask can be recomputed after the support set
    changes.
    """

    seed: EpisodeSeed
    intents: tuple[str, ...]
    support: dict[str, tuple[Utterance, ...]]
    query: dict[str, tuple[Utterance, ...]]
    k_s: int
    k_q: int
    raw_query: dict[str, tuple[Utterance, ...]] = field(repr=False, default=None)
    support_slot_inventory: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.raw_query is None:
            object.__setattr__(self, "raw_query", self.query)

    def support_utterances(self) -> list[Utterance]:
        return [u for l in self.intents for u in self.support[l]]

    def query_utterances(self) -> list[Utterance]:
        return [u for l in self.intents for u in self.query[l]]

    def query_ids(self) -> list[str]:
        return [u.id for u in self.query_utterances()]

    def to_json(self) -> dict:
        def dump(groups):
            return {l: [u.to_json() for u in groups[l]] for l in self.intents}

        return {
            "run_seed": self.seed.run_seed,
            "episode_index": self.seed.episode_index,
            "intents": list(self.intents),
            "k_s": self.k_s,
            "k_q": self.k_q,
            "support": dump(self.support),
            "query": dump(self.raw_query),
        }

    @classmethod
    def from_json(cls, obj: dict) -> Episode:
        def load(groups):
            return {l: tuple(Utterance.from_json(u) for u in us) for l, us in groups.items()}

        ep = cls(
            seed=EpisodeSeed(int(obj["run_seed"]), int(obj["episode_index"])),
            intents=tuple(obj["intents"]),
            support=load(obj["support"]),
            query=load(obj["query"]),
            k_s=int(obj["k_s"]),
            k_q=int(obj["k_q"]),
        )
        return map_query_only_slots(ep)


def _draw_n(rng: np.random.Generator, phase: str, n_labels: int) -> int:
    if phase not in PHASES:
        raise EpisodeError(f"unknown phase {phase!r}")
    if phase == "pretrain":
        if n_labels < 3:
            raise EpisodeError(f"pretrain episodes need at least 3 intents, got {n_labels}")
        return int(rng.integers(3, n_labels + 1))
    return n_labels


def sample_n_way(seed: EpisodeSeed, phase: str, labels: Iterable[str]) -> int:
    """Number of intents for the episode: uniform on [3, |labels|] when pretraining."""
    return _draw_n(seed.rng(Stream.SAMPLE), phase, len(set(labels)))


def _mask_other(utt: Utterance, inventory: frozenset[str]) -> Utterance:
    if all(t.is_other or t.slot_type in inventory for t in utt.slots):
        return utt
    slots = tuple(t if t.is_other or t.slot_type in inventory else OTHER_TAG for t in utt.slots)
    return Utterance(utt.id, utt.tokens, utt.intent, slots)


def map_query_only_slots(episode: Episode) -> Episode:
    """Recompute the support inventory and mask unseen query slot types as Other."""
    inventory = frozenset(slot_inventory(episode.support_utterances()))
    query = {
        l: tuple(_mask_other(u, inventory) for u in episode.raw_query[l]) for l in episode.intents
    }
    return replace(episode, query=query, support_slot_inventory=inventory)


def sample_episode(
    seed: EpisodeSeed,
    data: Dataset,
    phase: str,
    k_s: int,
    k_q: int,
    labels: Sequence[str] | None = None,
) -> Episode:
    """Draw one episode; deterministic in ``seed`` alone.

    Intents are drawn without replacement and kept in draw order. Per intent,
    ``k_s + k_q`` distinct utterances are drawn; the first ``k_s`` form the
    support set.
    """
    labels = sorted(labels) if labels is not None else data.intents
    rng = seed.rng(Stream.SAMPLE)
    n = _draw_n(rng, phase, len(labels))
    picked = [labels[i] for i in rng.choice(len(labels), size=n, replace=False)]
    need = k_s + k_q
    support, query = {}, {}
    for intent in picked:
        pool = data.by_intent.get(intent, ())
        if len(pool) < need:
            raise EpisodeError(
                f"intent {intent!r} has {len(pool)} utterances, needs {need} (k_s={k_s}, k_q={k_q})"
            )
        idx = rng.choice(len(pool), size=need, replace=False)
        chosen = tuple(data[pool[i]] for i in idx)
        support[intent] = chosen[:k_s]
        query[intent] = chosen[k_s:]
    ep = Episode(seed=seed, intents=tuple(picked), support=support, query=query, k_s=k_s, k_q=k_q)
    return map_query_only_slots(ep)


def check_pool_sizes(data: Dataset, need: int) -> dict[str, int]:
    """Intents with fewer than ``need`` utterances, mapped to their shortfall."""
    return {l: need - len(ids) for l, ids in sorted(data.by_intent.items()) if len(ids) < need}


def save_episodes(episodes: Iterable[Episode], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_json(), sort_keys=True) + "\n")


def load_episodes(path: str | Path) -> list[Episode]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    out.append(Episode.from_json(json.loads(line)))
                except (KeyError, json.JSONDecodeError, CorpusError) as exc:
                    raise EpisodeError(f"{path}:{lineno}: bad episode record ({exc})") from None
    return out
