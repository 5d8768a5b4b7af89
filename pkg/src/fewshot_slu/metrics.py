"""IC accuracy, chunk-level SL F1, paired robustness differences and seed aggregation."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .corpus import SlotTag
from .episode import EpisodeSeed


class MetricError(ValueError):
    pass


def ic_accuracy(preds: Sequence[str], golds: Sequence[str]) -> float:
    if len(preds) != len(golds):
        raise MetricError(f"{len(preds)} predictions for {len(golds)} gold labels")
    if not golds:
        raise MetricError("accuracy of an empty query set is undefined")
    return sum(p == g for p, g in zip(preds, golds)) / len(golds)


def chunks(tags: Sequence[SlotTag]) -> set[tuple[int, int, str]]:
    """Maximal typed spans ``(start, end_exclusive, type)`` of a BIO sequence."""
    out = set()
    start = None
    kind = None
    for i, tag in enumerate(tags):
        if tag.kind == "I":
            if start is None or tag.slot_type != kind:
                raise MetricError(f"invalid BIO: orphan {tag} at position {i}")
            continue
        if start is not None:
            out.add((start, i, kind))
            start = kind = None
        if tag.kind == "B":
            start, kind = i, tag.slot_type
    if start is not None:
        out.add((start, len(tags), kind))
    return out


@dataclass(frozen=True)
class SlotScore:
    f1: float | None
    tp: int
    fp: int
    fn: int


def sl_f1(
    pred_tags: Sequence[Sequence[SlotTag]], gold_tags: Sequence[Sequence[SlotTag]]
) -> SlotScore:
    """Micro-averaged exact-span F1; ``f1`` is None when neither side has a chunk."""
    if len(pred_tags) != len(gold_tags):
        raise MetricError(f"{len(pred_tags)} predicted sequences for {len(gold_tags)} gold")
    tp = fp = fn = 0
    for pred, gold in zip(pred_tags, gold_tags):
        if len(pred) != len(gold):
            raise MetricError(f"tag sequence lengths differ: {len(pred)} vs {len(gold)}")
        p, g = chunks(pred), chunks(gold)
        tp += len(p & g)
        fp += len(p - g)
        fn += len(g - p)
    if tp + fp + fn == 0:
        return SlotScore(None, 0, 0, 0)
    # 2PR/(P+R) reduces to 2tp/(2tp+fp+fn), which stays defined when P or R is 0/0
    return SlotScore(2 * tp / (2 * tp + fp + fn), tp, fp, fn)


@dataclass(frozen=True)
class EpisodeMetrics:
    seed: EpisodeSeed | None
    ic_accuracy: float
    sl_f1: float | None
    tp: int
    fp: int
    fn: int
    n_query: int

    @property
    def counts(self) -> tuple[int, int, int, int]:
        return self.tp, self.fp, self.fn, self.n_query


def score_episode(
    pred_intents: Sequence[str],
    gold_intents: Sequence[str],
    pred_tags: Sequence[Sequence[SlotTag]],
    gold_tags: Sequence[Sequence[SlotTag]],
    seed: EpisodeSeed | None = None,
) -> EpisodeMetrics:
    sl = sl_f1(pred_tags, gold_tags)
    return EpisodeMetrics(
        seed,
        ic_accuracy(pred_intents, gold_intents),
        sl.f1,
        sl.tp,
        sl.fp,
        sl.fn,
        len(gold_intents),
    )


def paired_diff(clean: EpisodeMetrics, perturbed: EpisodeMetrics) -> tuple[float, float | None]:
    """Absolute per-episode IC and F1 differences; F1 is None if either side is undefined."""
    if clean.seed != perturbed.seed:
        raise MetricError(f"cannot pair episode {clean.seed} with {perturbed.seed}")
    d_ic = abs(clean.ic_accuracy - perturbed.ic_accuracy)
    if clean.sl_f1 is None or perturbed.sl_f1 is None:
        return d_ic, None
    return d_ic, abs(clean.sl_f1 - perturbed.sl_f1)


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    n: int
    n_undefined: int = 0
    seed_means: tuple[float, ...] = ()

    def to_json(self) -> dict:
        def num(x):
            return None if math.isnan(x) else x

        return {
            "mean": num(self.mean),
            "std": num(self.std),
            "n": self.n,
            "n_undefined": self.n_undefined,
            "seed_means": list(self.seed_means),
        }

    def cell(self, scale: float = 100.0) -> str:
        if math.isnan(self.mean):
            return "n/a"
        return f"{scale * self.mean:.1f}±{scale * self.std:.1f}"


def aggregate(runs: Sequence[Sequence[float | None]]) -> Summary:
    """Mean over episodes within each seed, then mean ± population std over seeds.

    ``None`` entries (undefined F1) are excluded and counted. A seed whose
    values are all undefined contributes no seed mean.
    """
    if not runs or any(len(r) == 0 for r in runs):
        raise MetricError("aggregate needs at least one seed with at least one episode")
    seed_means = []
    n = n_undef = 0
    for run in runs:
        vals = [v for v in run if v is not None]
        n += len(vals)
        n_undef += len(run) - len(vals)
        if vals:
            seed_means.append(float(np.mean(vals)))
    if not seed_means:
        return Summary(float("nan"), float("nan"), 0, n_undef)
    arr = np.array(seed_means)
    return Summary(float(arr.mean()), float(arr.std()), n, n_undef, tuple(seed_means))


def episode_stats(runs: Sequence[Sequence[float | None]]) -> Summary:
    """Mean ± population std over all episodes pooled across seeds.

    This is the form used for the parenthesised paired differences.
    """
    vals = [v for run in runs for v in run if v is not None]
    n_undef = sum(v is None for run in runs for v in run)
    seed_means = tuple(
        float(np.mean(k)) for k in ([v for v in run if v is not None] for run in runs) if k
    )
    if not vals:
        return Summary(float("nan"), float("nan"), 0, n_undef, seed_means)
    arr = np.array(vals)
    return Summary(float(arr.mean()), float(arr.std()), len(vals), n_undef, seed_means)


@dataclass(frozen=True)
class PairedRow:
    clean: EpisodeMetrics
    perturbed: EpisodeMetrics
    abs_diff_ic: float
    abs_diff_f1: float | None


@dataclass
class RobustnessReport:
    """Clean vs perturbed metrics on identical episodes, grouped by run seed."""

    condition: str
    rows: dict[int, list[PairedRow]] = field(default_factory=dict)

    def add(self, clean: EpisodeMetrics, perturbed: EpisodeMetrics) -> PairedRow:
        d_ic, d_f1 = paired_diff(clean, perturbed)
        row = PairedRow(clean, perturbed, d_ic, d_f1)
        self.rows.setdefault(clean.seed.run_seed, []).append(row)
        return row

    def _column(self, getter) -> list[list[float | None]]:
        return [[getter(r) for r in self.rows[s]] for s in sorted(self.rows)]

    def summary(self) -> dict:
        if not self.rows:
            raise MetricError("empty robustness report")
        per_seed = {}
        for s in sorted(self.rows):
            rows = self.rows[s]
            per_seed[str(s)] = {
                "abs_diff_ic": episode_stats([[r.abs_diff_ic for r in rows]]).to_json(),
                "abs_diff_f1": episode_stats([[r.abs_diff_f1 for r in rows]]).to_json(),
            }
        return {
            "condition": self.condition,
            "clean_ic": aggregate(self._column(lambda r: r.clean.ic_accuracy)).to_json(),
            "clean_f1": aggregate(self._column(lambda r: r.clean.sl_f1)).to_json(),
            "ic": aggregate(self._column(lambda r: r.perturbed.ic_accuracy)).to_json(),
            "f1": aggregate(self._column(lambda r: r.perturbed.sl_f1)).to_json(),
            "abs_diff_ic": episode_stats(self._column(lambda r: r.abs_diff_ic)).to_json(),
            "abs_diff_f1": episode_stats(self._column(lambda r: r.abs_diff_f1)).to_json(),
            "f1_diff_skipped": sum(r.abs_diff_f1 is None for rs in self.rows.values() for r in rs),
            "per_seed": per_seed,
        }
