"""Experiment configuration file.

An INI file with a single ``[experiment]`` section. Any key left out takes the
default below, which follows the reference protocol (k_s = k_q = 10, 100 test
episodes, three seeds, 30 pretraining epochs, ...). Relative paths are resolved
against the directory holding the config file. Example::

    [experiment]
    datasets = data/synthetic.jsonl
    manifest = data/manifest.json
    embeddings = data/embeddings.txt
    dataset_name = synthetic
    learner = proto
    context = windowed-affine
    window = 3
    hidden_dim = 32
    seeds = 0, 1, 2
    perturbations = remove:1, replace:1
    output_dir = runs/proto
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .encoder import MEAN_POOL, EncoderConfig
from .learners import TrainConfig
from .perturb import PerturbationSpec

SECTION = "experiment"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    datasets: list[Path]
    manifest: Path
    embeddings: Path
    dataset_name: str = "dataset"
    oov_policy: str = "hashed"
    context: str = "windowed-affine"
    window: int = 3
    hidden_dim: int = 32
    train: TrainConfig = field(default_factory=TrainConfig)
    episodes: int = 100
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    perturbations: list[PerturbationSpec] = field(default_factory=list)
    hypotheses: Path | None = None
    output_dir: Path = Path("runs")
    workers: int = 1

    @property
    def k_s(self) -> int:
        return self.train.k_s

    @property
    def k_q(self) -> int:
        return self.train.k_q

    @property
    def learner(self) -> str:
        return self.train.learner

    def encoder_config(self, embedding_dim: int) -> EncoderConfig:
        if self.context == MEAN_POOL:
            return EncoderConfig.mean_pool(embedding_dim)
        return EncoderConfig(embedding_dim, self.hidden_dim, self.context, self.window)

    def max_c(self) -> int:
        return max((p.c for p in self.perturbations), default=0)

    def check(self) -> list[str]:
        """Problems that make the config unusable (missing files, bad ranges)."""
        problems = []
        for p in [*self.datasets, self.manifest, self.embeddings]:
            if not p.is_file():
                problems.append(f"file not found: {p}")
        if self.hypotheses is not None and not self.hypotheses.is_file():
            problems.append(f"file not found: {self.hypotheses}")
        if not self.seeds:
            problems.append("no seeds configured")
        removes = [p.c for p in self.perturbations if p.mode == "remove"]
        if removes and max(removes) >= self.k_s:
            problems.append(f"remove c={max(removes)} must be below k_s={self.k_s}")
        if self.episodes < 1:
            problems.append("episodes must be >= 1")
        return problems


_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(typ: str, raw: str):
    if typ.startswith("float"):
        return float(raw)
    if typ == "int":
        return int(raw)
    return raw


def _split_list(text: str) -> list[str]:
    return [p.strip() for p in text.replace("\n", ",").split(",") if p.strip()]


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    if not parser.read(path, encoding="utf-8"):
        raise ConfigError(f"cannot read config {path}")
    if SECTION not in parser:
        raise ConfigError(f"{path}: missing [{SECTION}] section")
    sec = dict(parser[SECTION])
    base = path.parent

    def rel(value: str) -> Path:
        p = Path(value).expanduser()
        return p if p.is_absolute() else base / p

    try:
        train_kwargs = {}
        for key, typ in _TRAIN_KEYS.items():
            if key in sec and sec[key].strip():
                train_kwargs[key] = _coerce(str(typ), sec.pop(key).strip())
            else:
                sec.pop(key, None)
        for required in ("datasets", "manifest", "embeddings"):
            if required not in sec:
                raise ConfigError(f"{path}: missing required key {required!r}")
        cfg = ExperimentConfig(
            datasets=[rel(p) for p in _split_list(sec.pop("datasets"))],
            manifest=rel(sec.pop("manifest")),
            embeddings=rel(sec.pop("embeddings")),
            train=TrainConfig(**train_kwargs),
        )
        if "hypotheses" in sec:
            value = sec.pop("hypotheses").strip()
            cfg.hypotheses = rel(value) if value else None
        if "output_dir" in sec:
            cfg.output_dir = rel(sec.pop("output_dir"))
        if "seeds" in sec:
            cfg.seeds = [int(s) for s in _split_list(sec.pop("seeds"))]
        if "perturbations" in sec:
            cfg.perturbations = [PerturbationSpec.parse(p) for p in _split_list(sec.pop("perturbations"))]
        for key in ("dataset_name", "oov_policy", "context"):
            if key in sec:
                setattr(cfg, key, sec.pop(key).strip())
        for key in ("window", "hidden_dim", "episodes", "workers"):
            if key in sec:
                setattr(cfg, key, int(sec.pop(key)))
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from None
    if sec:
        raise ConfigError(f"{path}: unknown keys {sorted(sec)}")
    return cfg
