"""Noise injection: support-set removal/replacement and ASR modality mismatch.

Slot labels are carried from reference text to a recognizer hypothesis with a
token-level Levenshtein alignment.
"""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

from .corpus import OTHER_TAG, Dataset, SlotTag, Utterance, inside, repair_bio
from .episode import Episode, EpisodeSeed, Stream, map_query_only_slots


class PerturbError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbationSpec:
    mode: str
    c: int

    def __post_init__(self):
        if self.mode not in ("remove", "replace"):
            raise PerturbError(f"unknown perturbation mode {self.mode!r}")
        if self.c < 0:
            raise PerturbError("c must be non-negative")

    @classmethod
    def parse(cls, text: str) -> PerturbationSpec:
        """Parse ``"remove:2"`` or ``"replace:1"``."""
        mode, _, c = text.strip().partition(":")
        try:
            return cls(mode.strip(), int(c))
        except ValueError:
            raise PerturbError(f"bad perturbation {text!r}, expected MODE:C") from None

    @property
    def name(self) -> str:
        return f"{self.mode}{self.c}"


def remove_examples(episode: Episode, c: int, seed: EpisodeSeed | None = None) -> Episode:
    """Drop ``c`` uniformly chosen support utterances per intent."""
    if c < 0:
        raise PerturbError("c must be non-negative")
    if c == 0:
        return episode
    rng = (seed or episode.seed).rng(Stream.PERTURB)
    support = {}
    for intent in episode.intents:
        current = episode.support[intent]
        if c >= len(current):
            raise PerturbError(
                f"cannot remove {c} of {len(current)} support utterances for {intent!r}"
            )
        drop = set(rng.choice(len(current), size=c, replace=False).tolist())
        support[intent] = tuple(u for i, u in enumerate(current) if i not in drop)
    return map_query_only_slots(replace(episode, support=support))


def replace_examples(
    episode: Episode, c: int, seed: EpisodeSeed | None, pool: Dataset
) -> Episode:
    """Swap ``c`` support utterances per intent for unused pool utterances of that intent."""
    if c < 0:
        raise PerturbError("c must be non-negative")
    if c == 0:
        return episode
    rng = (seed or episode.seed).rng(Stream.PERTURB)
    support = {}
    for intent in episode.intents:
        current = episode.support[intent]
        if c > len(current):
            raise PerturbError(
                f"cannot replace {c} of {len(current)} support utterances for {intent!r}"
            )
        used = {u.id for u in current} | {u.id for u in episode.raw_query[intent]}
        spare = [i for i in pool.by_intent.get(intent, ()) if i not in used]
        if len(spare) < c:
            raise PerturbError(
                f"replacement pool for {intent!r} has {len(spare)} spare utterances, needs {c}"
            )
        slots = rng.choice(len(current), size=c, replace=False)
        fresh = rng.choice(len(spare), size=c, replace=False)
        new = list(current)
        for pos, j in zip(slots.tolist(), fresh.tolist()):
            new[pos] = pool[spare[j]]
        support[intent] = tuple(new)
    return map_query_only_slots(replace(episode, support=support))


def apply_perturbation(episode: Episode, spec: PerturbationSpec, pool: Dataset) -> Episode:
    if spec.mode == "remove":
        return remove_examples(episode, spec.c)
    return replace_examples(episode, spec.c, None, pool)


class Op(NamedTuple):
    """One alignment step; ``ref``/``hyp`` are indices or ``None``."""

    kind: str  # "match" | "sub" | "del" | "ins"
    ref: int | None
    hyp: int | None


def alignment_cost(ops: Sequence[Op]) -> int:
    return sum(op.kind != "match" for op in ops)


def align_tokens(ref: Sequence[str], hyp: Sequence[str]) -> list[Op]:
    """Minimum-edit token alignment with unit costs.

    Ties are broken left to right, preferring match, then substitute, then
    delete, then insert.
    """
    n, m = len(ref), len(hyp)
    # suffix table: cost[i][j] = distance(ref[i:], hyp[j:])
    cost = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n, -1, -1):
        for j in range(m, -1, -1):
            if i == n:
                cost[i][j] = m - j
            elif j == m:
                cost[i][j] = n - i
            else:
                diag = cost[i + 1][j + 1] + (ref[i] != hyp[j])
                cost[i][j] = min(diag, cost[i + 1][j] + 1, cost[i][j + 1] + 1)

    ops: list[Op] = []
    i = j = 0
    while i < n or j < m:
        here = cost[i][j]
        if i < n and j < m:
            same = ref[i] == hyp[j]
            if cost[i + 1][j + 1] + (not same) == here:
                ops.append(Op("match" if same else "sub", i, j))
                i += 1
                j += 1
                continue
        if i < n and cost[i + 1][j] + 1 == here:
            ops.append(Op("del", i, None))
            i += 1
        else:
            ops.append(Op("ins", None, j))
            j += 1
    return ops


def project_slots(ref_slots: Sequence[SlotTag], ops: Sequence[Op]) -> tuple[SlotTag, ...]:
    """Carry reference tags onto the hypothesis side of an alignment.

    Inserted tokens become Inside of a chunk when their nearest aligned
    neighbours on both sides belong to that same chunk, otherwise Other.
    """
    n_ref = sum(op.ref is not None for op in ops)
    if n_ref != len(ref_slots):
        raise PerturbError(f"alignment covers {n_ref} reference tokens, got {len(ref_slots)} tags")
    hyp: list[SlotTag | None] = []
    for op in ops:
        if op.kind in ("match", "sub"):
            hyp.append(ref_slots[op.ref])
        elif op.kind == "ins":
            hyp.append(None)

    out = list(hyp)
    for k, tag in enumerate(hyp):
        if tag is not None:
            continue
        left = next((t for t in reversed(hyp[:k]) if t is not None), None)
        right = next((t for t in hyp[k + 1 :] if t is not None), None)
        bridged = (
            left is not None
            and right is not None
            and not left.is_other
            and right.kind == "I"
            and right.slot_type == left.slot_type
        )
        out[k] = inside(left.slot_type) if bridged else OTHER_TAG
    repaired, _ = repair_bio(out)
    return repaired


def project_utterance(utt: Utterance, hyp_tokens: Sequence[str]) -> Utterance:
    ops = align_tokens(utt.tokens, hyp_tokens)
    return Utterance(utt.id, tuple(hyp_tokens), utt.intent, project_slots(utt.slots, ops))


def apply_modality_mismatch(episode: Episode, hyps: Mapping[str, Sequence[str]]) -> Episode:
    """Replace query utterances by their recognizer hypotheses; support stays as is."""
    missing = [u.id for l in episode.intents for u in episode.raw_query[l] if u.id not in hyps]
    if missing:
        raise PerturbError(f"no hypothesis for query ids: {missing}")
    raw_query = {
        l: tuple(project_utterance(u, hyps[u.id]) for u in episode.raw_query[l])
        for l in episode.intents
    }
    return map_query_only_slots(replace(episode, raw_query=raw_query))


def load_hypotheses(path: str | Path) -> dict[str, tuple[str, ...]]:
    out: dict[str, tuple[str, ...]] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                utt_id, tokens = str(obj["id"]), tuple(obj["hyp_tokens"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise PerturbError(f"{path}:{lineno}: bad hypothesis record ({exc})") from None
            if not tokens or any(not t for t in tokens):
                raise PerturbError(f"{path}:{lineno}: empty hypothesis for {utt_id!r}")
            if utt_id in out:
                raise PerturbError(f"{path}:{lineno}: duplicate hypothesis id {utt_id!r}")
            out[utt_id] = tokens
    return out


def save_hypotheses(hyps: Mapping[str, Sequence[str]], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for utt_id, tokens in hyps.items():
            fh.write(json.dumps({"id": utt_id, "hyp_tokens": list(tokens)}) + "\n")


def word_error_rate(
    dataset: Dataset, hyps: Mapping[str, Sequence[str]]
) -> tuple[float, list[str]]:
    """Corpus WER over utterances with a hypothesis, plus the ids lacking one."""
    errors = words = 0
    missing = []
    for utt in dataset:
        hyp = hyps.get(utt.id)
        if hyp is None:
            missing.append(utt.id)
            continue
        errors += alignment_cost(align_tokens(utt.tokens, hyp))
        words += len(utt.tokens)
    return (errors / words if words else 0.0), missing
