"""Experiment orchestration behind the command line: validation, pretraining,
paired clean/noisy evaluation, perturbation sweeps and table rendering.

Output layout under ``output_dir``::

    checkpoints/<learner>-seed<N>.ckpt
    logs/<learner>-seed<N>.csv          epoch, loss, val_ic_acc, val_sl_f1
    episodes/test-seed<N>.jsonl         cached clean test episodes
    metrics/<learner>-<condition>.csv   one row per episode and condition
    metrics/<learner>-<condition>.json  summary
    sweeps/<learner>-<mode>.csv|.json
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

from . import checkpoint
from .config import ExperimentConfig
from .corpus import CorpusError, Dataset, LoadReport, SplitManifest, build_splits, load_dataset
from .encoder import EmbeddingProvider, load_embeddings
from .episode import Episode, EpisodeSeed, check_pool_sizes, load_episodes, sample_episode, save_episodes
from .learners import TrainState, adapt_and_evaluate, pretrain
from .metrics import EpisodeMetrics, RobustnessReport, aggregate
from .perturb import (
    PerturbationSpec,
    apply_modality_mismatch,
    apply_perturbation,
    load_hypotheses,
)

log = logging.getLogger(__name__)

CSV_FIELDS = ("run_seed", "episode_index", "condition", "ic_acc", "sl_f1", "tp", "fp", "fn")


class ValidationFailure(Exception):
    """Config or data problems; ``problems`` lists every one found."""

    def __init__(self, problems: Sequence[str]):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


def condition_name(condition: str, c: int = 0) -> str:
    return condition if condition in ("clean", "asr") else f"{condition}{c}"


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def metrics_rows(condition: str, metrics: Sequence[EpisodeMetrics]) -> list[dict]:
    return [
        {
            "run_seed": m.seed.run_seed,
            "episode_index": m.seed.episode_index,
            "condition": condition,
            "ic_acc": _fmt(m.ic_accuracy),
            "sl_f1": _fmt(m.sl_f1),
            "tp": m.tp,
            "fp": m.fp,
            "fn": m.fn,
        }
        for m in metrics
    ]


def write_csv(path: Path, rows: Sequence[dict], fieldnames: Sequence[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# evaluation workers share the parameters through a process-global
_WORKER: dict = {}


def _init_worker(params, learner, adapt_steps, lr):
    _WORKER.update(params=params, learner=learner, adapt_steps=adapt_steps, lr=lr)


def _eval_one(episode: Episode) -> EpisodeMetrics:
    w = _WORKER
    return adapt_and_evaluate(w["params"], episode, w["learner"], w["adapt_steps"], w["lr"])


def evaluate_episodes(
    params, episodes: Sequence[Episode], learner: str, adapt_steps: int, lr: float, workers: int = 1
) -> list[EpisodeMetrics]:
    """Evaluate in episode order; the result does not depend on ``workers``."""
    args = (params, learner, adapt_steps, lr)
    if workers <= 1:
        _init_worker(*args)
        return [_eval_one(ep) for ep in episodes]
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=args) as pool:
        chunk = max(1, len(episodes) // (4 * workers))
        return list(pool.map(_eval_one, episodes, chunksize=chunk))


@dataclass
class Experiment:
    config: ExperimentConfig
    load_reports: list[LoadReport] = field(default_factory=list)

    @property
    def out(self) -> Path:
        return self.config.output_dir

    # -- inputs --------------------------------------------------------------

    @cached_property
    def provider(self) -> EmbeddingProvider:
        return load_embeddings(self.config.embeddings, self.config.oov_policy)

    @cached_property
    def splits(self) -> tuple[Dataset, Dataset, Dataset]:
        datasets = []
        for p in self.config.datasets:
            report = LoadReport(str(p))
            datasets.append(load_dataset(p, report))
            self.load_reports.append(report)
        return build_splits(datasets, SplitManifest.load(self.config.manifest))

    @property
    def pretrain_data(self) -> Dataset:
        return self.splits[0]

    @property
    def validation_data(self) -> Dataset:
        return self.splits[1]

    @property
    def test_data(self) -> Dataset:
        return self.splits[2]

    @cached_property
    def hypotheses(self) -> dict[str, tuple[str, ...]]:
        if self.config.hypotheses is None:
            raise ValidationFailure(["condition asr needs a hypotheses file in the config"])
        return load_hypotheses(self.config.hypotheses)

    # -- validate ------------------------------------------------------------

    def validate(self) -> dict:
        cfg = self.config
        problems = cfg.check()
        if problems:
            raise ValidationFailure(problems)
        try:
            pre, val, test = self.splits
            self.provider
        except (CorpusError, ValueError, OSError) as exc:
            raise ValidationFailure([str(exc)]) from None
        need = cfg.k_s + cfg.k_q
        summary = {}
        for name, data, extra in (("pretrain", pre, 0), ("validation", val, 0), ("test", test, cfg.max_c())):
            summary[name] = {
                "intents": len(data.by_intent),
                "utterances": len(data),
                "per_intent": {l: len(ids) for l, ids in sorted(data.by_intent.items())},
            }
            for intent, short in check_pool_sizes(data, need + extra).items():
                problems.append(
                    f"{name} intent {intent!r} has {len(data.by_intent[intent])} utterances,"
                    f" needs {need + extra} (short by {short})"
                )
        if len(pre.by_intent) < 3:
            problems.append(f"pretrain split has {len(pre.by_intent)} intents, needs >= 3")
        if not len(test):
            problems.append("test split is empty")
        if cfg.hypotheses is not None:
            missing = sorted(u.id for u in test if u.id not in self.hypotheses)
            if missing:
                problems.append(f"hypotheses missing for {len(missing)} test ids: {missing}")
            summary["hypotheses_missing"] = len(missing)
        summary["bio_repairs"] = sum(r.bio_repairs for r in self.load_reports)
        if problems:
            raise ValidationFailure(problems)
        return summary

    # -- pretrain ------------------------------------------------------------

    def checkpoint_path(self, seed: int, override: str | None = None) -> Path:
        if override:
            return Path(override.format(seed=seed, learner=self.config.learner))
        return self.out / "checkpoints" / f"{self.config.learner}-seed{seed}.ckpt"

    def log_path(self, seed: int) -> Path:
        return self.out / "logs" / f"{self.config.learner}-seed{seed}.csv"

    def pretrain(self, seed: int, resume: bool = False, max_epochs: int | None = None) -> Path:
        """Train one seed, checkpointing after every epoch.

        ``resume`` continues from the existing checkpoint; ``max_epochs`` stops
        early (the checkpoint then resumes to the configured epoch count).
        """
        cfg = self.config
        path = self.checkpoint_path(seed)
        state = None
        if resume and path.exists():
            state, header = checkpoint.load(path, self.provider)
            if header["learner"] != cfg.learner:
                raise ValidationFailure([f"{path} holds a {header['learner']} model"])
            log.info("resuming %s from epoch %d", path, state.epoch)
        train = cfg.train
        if max_epochs is not None:
            train = type(train)(**{**train.__dict__, "epochs": min(max_epochs, train.epochs)})

        def on_epoch(st: TrainState):
            checkpoint.save(path, st, cfg.train, seed)
            write_csv(
                self.log_path(seed),
                [{k: _fmt(v) if isinstance(v, float) else v for k, v in row.items()} for row in st.log],
                ("epoch", "loss", "val_ic_acc", "val_sl_f1"),
            )

        enc_cfg = cfg.encoder_config(self.provider.dim)
        state = pretrain(
            self.pretrain_data,
            train,
            seed,
            enc_cfg,
            self.provider,
            validation=self.validation_data if len(self.validation_data) else None,
            resume=state,
            on_epoch=on_epoch,
        )
        if not path.exists():
            on_epoch(state)
        return path

    def load_params(self, seed: int, override: str | None = None):
        path = self.checkpoint_path(seed, override)
        if not path.exists():
            raise ValidationFailure([f"checkpoint not found: {path}"])
        state, header = checkpoint.load(path, self.provider)
        if header["learner"] != self.config.learner:
            raise ValidationFailure(
                [f"{path} holds a {header['learner']} model, config says {self.config.learner}"]
            )
        return state.params

    # -- episodes --------------------------------------------------------------

    def episode_path(self, seed: int) -> Path:
        return self.out / "episodes" / f"test-seed{seed}.jsonl"

    def episodes(self, seed: int) -> list[Episode]:
        """Clean test episodes, sampled once and then read back from the cache."""
        cfg = self.config
        path = self.episode_path(seed)
        if path.exists():
            eps = load_episodes(path)
            if (
                len(eps) == cfg.episodes
                and all(e.k_s == cfg.k_s and e.k_q == cfg.k_q for e in eps)
                and all(e.seed == EpisodeSeed(seed, i) for i, e in enumerate(eps))
            ):
                return eps
            log.warning("episode cache %s does not match the config; resampling", path)
        eps = [
            sample_episode(EpisodeSeed(seed, i), self.test_data, "test", cfg.k_s, cfg.k_q)
            for i in range(cfg.episodes)
        ]
        path.parent.mkdir(parents=True, exist_ok=True)
        save_episodes(eps, path)
        return eps

    def perturb(self, episodes: Sequence[Episode], condition: str, c: int) -> list[Episode]:
        if condition == "asr":
            hyps = self.hypotheses
            return [apply_modality_mismatch(ep, hyps) for ep in episodes]
        spec = PerturbationSpec(condition, c)
        return [apply_perturbation(ep, spec, self.test_data) for ep in episodes]

    # -- evaluate --------------------------------------------------------------

    def _run(self, params, episodes: Sequence[Episode], workers: int) -> list[EpisodeMetrics]:
        t = self.config.train
        return evaluate_episodes(params, episodes, t.learner, t.adapt_steps, t.lr_adapt, workers)

    def evaluate(
        self,
        condition: str = "clean",
        c: int = 0,
        seeds: Sequence[int] | None = None,
        workers: int | None = None,
        checkpoint_override: str | None = None,
    ) -> dict:
        cfg = self.config
        seeds = list(seeds or cfg.seeds)
        workers = workers or cfg.workers
        name = condition_name(condition, c)
        rows: list[dict] = []
        clean_runs, report = [], RobustnessReport(name)
        for seed in seeds:
            params = self.load_params(seed, checkpoint_override)
            clean_eps = self.episodes(seed)
            clean = self._run(params, clean_eps, workers)
            rows += metrics_rows("clean", clean)
            clean_runs.append(clean)
            if condition == "clean":
                continue
            noisy_eps = self.perturb(clean_eps, condition, c)
            for a, b in zip(clean_eps, noisy_eps):
                if a.query_ids() != b.query_ids():
                    raise RuntimeError(f"episode {a.seed}: perturbed query set differs from clean")
            noisy = self._run(params, noisy_eps, workers)
            rows += metrics_rows(name, noisy)
            for a, b in zip(clean, noisy):
                report.add(a, b)

        summary = {
            "learner": cfg.learner,
            "dataset": cfg.dataset_name,
            "condition": name,
            "seeds": seeds,
            "episodes": cfg.episodes,
        }
        if condition == "clean":
            summary["ic"] = aggregate([[m.ic_accuracy for m in r] for r in clean_runs]).to_json()
            summary["f1"] = aggregate([[m.sl_f1 for m in r] for r in clean_runs]).to_json()
        else:
            summary.update(report.summary())
            summary["paired_query_ids_identical"] = True
        stem = self.out / "metrics" / f"{cfg.learner}-{name}"
        write_csv(stem.with_suffix(".csv"), rows, CSV_FIELDS)
        write_json(stem.with_suffix(".json"), summary)
        return summary

    # -- sweep -----------------------------------------------------------------

    def sweep(
        self,
        mode: str,
        c_values: Sequence[int],
        seeds: Sequence[int] | None = None,
        workers: int | None = None,
        checkpoint_override: str | None = None,
    ) -> dict:
        cfg = self.config
        seeds = list(seeds or cfg.seeds)
        workers = workers or cfg.workers
        if mode == "remove" and any(c < 0 or c >= cfg.k_s for c in c_values):
            raise ValidationFailure([f"remove sweep needs 0 <= c < k_s={cfg.k_s}"])
        reports = {c: RobustnessReport(f"{mode}{c}") for c in c_values}
        for seed in seeds:
            params = self.load_params(seed, checkpoint_override)
            clean_eps = self.episodes(seed)
            clean = self._run(params, clean_eps, workers)
            for c in c_values:
                noisy = self._run(params, self.perturb(clean_eps, mode, c), workers)
                for a, b in zip(clean, noisy):
                    reports[c].add(a, b)
        rows = []
        for c in c_values:
            s = reports[c].summary()
            rows.append(
                {
                    "learner": cfg.learner,
                    "mode": mode,
                    "c": c,
                    "mean_abs_diff_ic": s["abs_diff_ic"]["mean"],
                    "std_abs_diff_ic": s["abs_diff_ic"]["std"],
                    "mean_abs_diff_f1": s["abs_diff_f1"]["mean"],
                    "std_abs_diff_f1": s["abs_diff_f1"]["std"],
                }
            )
        means = [r["mean_abs_diff_ic"] for r in rows]
        result = {
            "learner": cfg.learner,
            "dataset": cfg.dataset_name,
            "mode": mode,
            "seeds": seeds,
            "rows": rows,
            "monotone_non_decreasing": all(a <= b for a, b in zip(means, means[1:])),
        }
        stem = self.out / "sweeps" / f"{cfg.learner}-{mode}"
        write_csv(
            stem.with_suffix(".csv"),
            [{k: _fmt(v) if isinstance(v, float) else v for k, v in r.items()} for r in rows],
            list(rows[0]) if rows else ["learner", "mode", "c"],
        )
        write_json(stem.with_suffix(".json"), result)
        return result


# -- report ------------------------------------------------------------------


def _cell(summary: dict, key: str) -> str:
    s = summary[key]
    if s["mean"] is None or (isinstance(s["mean"], float) and math.isnan(s["mean"])):
        return "n/a"
    return f"{100 * s['mean']:.1f}±{100 * s['std']:.1f}"


def render_report(out_dir: str | Path, expected_seeds: Sequence[int] | None = None) -> tuple[str, list[str]]:
    """Markdown tables from every metrics summary under ``out_dir``.

    Returns the markdown and a list of warnings.
    """
    out_dir = Path(out_dir)
    files = sorted(out_dir.rglob("metrics/*.json"))
    if not files:
        raise ValidationFailure([f"no metrics summaries under {out_dir}"])
    summaries = [json.loads(f.read_text(encoding="utf-8")) for f in files]
    warnings = []
    if expected_seeds is not None:
        for f, s in zip(files, summaries):
            if sorted(s["seeds"]) != sorted(expected_seeds):
                warnings.append(f"{f}: seeds {s['seeds']} differ from config seeds {list(expected_seeds)}")

    datasets = sorted({s["dataset"] for s in summaries})
    by_key = {(s["learner"], s["dataset"], s["condition"]): s for s in summaries}
    conditions = sorted(
        {s["condition"] for s in summaries if s["condition"] != "asr"},
        key=lambda c: (c != "clean", c),
    )
    learners = sorted({s["learner"] for s in summaries})

    lines = []
    for title, key, diff in (("IC accuracy", "ic", "abs_diff_ic"), ("SL F1", "f1", "abs_diff_f1")):
        lines += [f"### {title} (absolute difference)", ""]
        lines.append("| condition | learner | " + " | ".join(datasets) + " |")
        lines.append("|---|---|" + "---|" * len(datasets))
        for cond in conditions:
            for learner in learners:
                cells = []
                for ds in datasets:
                    s = by_key.get((learner, ds, cond))
                    if s is None:
                        cells.append("")
                    elif cond == "clean":
                        cells.append(_cell(s, key))
                    else:
                        cells.append(f"{_cell(s, key)} ({_cell(s, diff)})")
                if any(cells):
                    lines.append(f"| {cond} | {learner} | " + " | ".join(cells) + " |")
        lines.append("")

    asr = [s for s in summaries if s["condition"] == "asr"]
    if asr:
        lines += ["### Evaluated on recognizer hypotheses", ""]
        lines.append("| metric | learner | " + " | ".join(datasets) + " |")
        lines.append("|---|---|" + "---|" * len(datasets))
        for title, key in (("IC acc.", "ic"), ("SL F1", "f1")):
            for learner in learners:
                cells = [
                    _cell(by_key[(learner, ds, "asr")], key) if (learner, ds, "asr") in by_key else ""
                    for ds in datasets
                ]
                lines.append(f"| {title} | {learner} | " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines), warnings
