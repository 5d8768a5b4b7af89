"""Tagged-utterance data model, JSON Lines ingestion and intent-based splits."""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

OTHER = "O"


class CorpusError(ValueError):
    """Raised for malformed dataset or manifest input."""


@dataclass(frozen=True, slots=True)
class SlotTag:
    """One BIO tag: ``kind`` is ``"O"``, ``"B"`` or ``"I"``."""

    kind: str
    slot_type: str | None = None

    def __post_init__(self):
        if self.kind == OTHER:
            if self.slot_type is not None:
                raise CorpusError("Other tag carries no slot type")
        elif self.kind in ("B", "I"):
            if not self.slot_type:
                raise CorpusError(f"{self.kind} tag needs a non-empty slot type")
        else:
            raise CorpusError(f"unknown tag kind {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> SlotTag:
        if text == OTHER:
            return OTHER_TAG
        kind, sep, slot_type = text.partition("-")
        if not sep or kind not in ("B", "I"):
            raise CorpusError(f"tag {text!r} is not O, B-<type> or I-<type>")
        return cls(kind, slot_type)

    @property
    def is_other(self) -> bool:
        return self.kind == OTHER

    def __str__(self) -> str:
        return OTHER if self.kind == OTHER else f"{self.kind}-{self.slot_type}"


OTHER_TAG = SlotTag(OTHER)


def begin(slot_type: str) -> SlotTag:
    return SlotTag("B", slot_type)


def inside(slot_type: str) -> SlotTag:
    return SlotTag("I", slot_type)


def parse_tags(texts: Iterable[str]) -> tuple[SlotTag, ...]:
    return tuple(SlotTag.parse(t) for t in texts)


def is_bio_valid(tags: Sequence[SlotTag]) -> bool:
    prev = OTHER_TAG
    for tag in tags:
        if tag.kind == "I" and (prev.is_other or prev.slot_type != tag.slot_type):
            return False
        prev = tag
    return True


def repair_bio(tags: Sequence[SlotTag]) -> tuple[tuple[SlotTag, ...], int]:
    """Turn every orphan Inside tag into a Begin of the same type.

    Returns the repaired tags and the number of repairs made.
    """
    out: list[SlotTag] = []
    repairs = 0
    prev = OTHER_TAG
    for tag in tags:
        if tag.kind == "I" and (prev.is_other or prev.slot_type != tag.slot_type):
            tag = begin(tag.slot_type)
            repairs += 1
        out.append(tag)
        prev = tag
    return tuple(out), repairs


@dataclass(frozen=True, slots=True)
class Utterance:
    id: str
    tokens: tuple[str, ...]
    intent: str
    slots: tuple[SlotTag, ...]

    def __post_init__(self):
        if not self.tokens:
            raise CorpusError(f"utterance {self.id!r} has no tokens")
        if len(self.tokens) != len(self.slots):
            raise CorpusError(
                f"utterance {self.id!r}: {len(self.tokens)} tokens but {len(self.slots)} slots"
            )
        if any(not t for t in self.tokens):
            raise CorpusError(f"utterance {self.id!r} has an empty token")

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "tokens": list(self.tokens),
            "intent": self.intent,
            "slots": [str(t) for t in self.slots],
        }

    @classmethod
    def from_json(cls, obj: dict) -> Utterance:
        return cls(
            id=str(obj["id"]),
            tokens=tuple(obj["tokens"]),
            intent=str(obj["intent"]),
            slots=parse_tags(obj["slots"]),
        )


@dataclass(frozen=True)
class Dataset:
    """Immutable utterance collection indexed by intent.

    Utterance order is the file order; ``by_intent`` keeps that order too.
    """

    utterances: tuple[Utterance, ...]
    by_intent: dict[str, tuple[str, ...]] = field(init=False, repr=False)
    _by_id: dict[str, Utterance] = field(init=False, repr=False)

    def __post_init__(self):
        by_id: dict[str, Utterance] = {}
        groups: dict[str, list[str]] = {}
        for utt in self.utterances:
            if utt.id in by_id:
                raise CorpusError(f"duplicate utterance id {utt.id!r}")
            by_id[utt.id] = utt
            groups.setdefault(utt.intent, []).append(utt.id)
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "by_intent", {k: tuple(v) for k, v in groups.items()})

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, utt_id: str) -> Utterance:
        return self._by_id[utt_id]

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self._by_id

    @property
    def intents(self) -> list[str]:
        return sorted(self.by_intent)

    def of_intent(self, intent: str) -> list[Utterance]:
        return [self._by_id[i] for i in self.by_intent.get(intent, ())]


@dataclass
class LoadReport:
    path: str
    n_utterances: int = 0
    bio_repairs: int = 0


def load_dataset(path: str | Path, report: LoadReport | None = None) -> Dataset:
    """Read a JSON Lines dataset, repairing orphan Inside tags.

    Errors name the offending line. When ``report`` is passed it receives the
    utterance count and the number of BIO repairs.
    """
    path = Path(path)
    report = report if report is not None else LoadReport(str(path))
    utterances: list[Utterance] = []
    seen: dict[str, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            try:
                utt = Utterance.from_json(obj)
            except KeyError as exc:
                raise CorpusError(f"{path}:{lineno}: missing field {exc}") from None
            except CorpusError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
            if utt.id in seen:
                raise CorpusError(
                    f"{path}:{lineno}: duplicate id {utt.id!r} (first on line {seen[utt.id]})"
                )
            seen[utt.id] = lineno
            slots, repairs = repair_bio(utt.slots)
            if repairs:
                utt = Utterance(utt.id, utt.tokens, utt.intent, slots)
                report.bio_repairs += repairs
            utterances.append(utt)
    report.n_utterances = len(utterances)
    if report.bio_repairs:
        log.warning("%s: repaired %d orphan Inside tags", path, report.bio_repairs)
    return Dataset(tuple(utterances))


def save_dataset(dataset: Iterable[Utterance], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for utt in dataset:
            fh.write(json.dumps(utt.to_json()) + "\n")


@dataclass(frozen=True)
class SplitManifest:
    pretrain: frozenset[str]
    validation: frozenset[str]
    test: frozenset[str]

    def __post_init__(self):
        names = ("pretrain", "validation", "test")
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                both = getattr(self, a) & getattr(self, b)
                if both:
                    raise CorpusError(f"manifest splits {a} and {b} overlap: {sorted(both)}")

    @classmethod
    def load(cls, path: str | Path) -> SplitManifest:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(*(frozenset(obj.get(k, ())) for k in ("pretrain", "validation", "test")))

    def to_json(self) -> dict:
        return {k: sorted(getattr(self, k)) for k in ("pretrain", "validation", "test")}


@dataclass
class SplitReport:
    dropped: int = 0
    dropped_intents: set[str] = field(default_factory=set)


def build_splits(
    datasets: Sequence[Dataset], manifest: SplitManifest, report: SplitReport | None = None
) -> tuple[Dataset, Dataset, Dataset]:
    """Partition the union of ``datasets`` into pretrain/validation/test by intent."""
    report = report if report is not None else SplitReport()
    known = set().union(*(d.by_intent for d in datasets)) if datasets else set()
    wanted = manifest.pretrain | manifest.validation | manifest.test
    missing = wanted - known
    if missing:
        raise CorpusError(f"manifest names intents absent from all datasets: {sorted(missing)}")

    parts: tuple[list[Utterance], ...] = ([], [], [])
    for ds in datasets:
        for utt in ds:
            if utt.intent in manifest.pretrain:
                parts[0].append(utt)
            elif utt.intent in manifest.validation:
                parts[1].append(utt)
            elif utt.intent in manifest.test:
                parts[2].append(utt)
            else:
                report.dropped += 1
                report.dropped_intents.add(utt.intent)
    if report.dropped:
        log.warning(
            "dropped %d utterances with intents outside the manifest: %s",
            report.dropped,
            sorted(report.dropped_intents),
        )
    return tuple(Dataset(tuple(p)) for p in parts)  # type: ignore[return-value]


def slot_inventory(utterances: Iterable[Utterance]) -> set[str]:
    return {t.slot_type for u in utterances for t in u.slots if not t.is_other}
