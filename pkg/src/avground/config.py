"""Run configuration read from a TOML file.

Every knob without a published value lives here so one file captures a run::

    [rewards]
    tau = 0.5
    tolerance = 0.5
    embeddings = "vectors.txt"    # word2vec text format, relative to this file
    fallback = "jaccard"          # or "error"; unset = error for score, jaccard for evaluate
    stopwords = ["a", "an", "the", "of", "group"]

    [rewards.weights.spatial]
    format = 1.0
    temporal = 0.0
    object = 1.0
    spatial = 1.0

    [grpo]
    epsilon = 0.2
    beta = 0.04
    group_size = 6

    [filter]
    min_et_ratio = 0.08

    [qc]
    cutoff = 2.5
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from avground.embeddings import DEFAULT_STOPWORDS, EmbeddingTable
from avground.grammar import TaskKind
from avground.grpo import GrpoConfig
from avground.pipeline import FilterConfig
from avground.rewards import WEIGHT_PRESETS, RewardConfig, RewardWeights


class ConfigError(ValueError):
    pass


@dataclass
class RewardSettings:
    tau: float = 0.5
    tolerance: float = 0.5
    embeddings: Path | None = None
    fallback: str | None = None
    stopwords: frozenset = DEFAULT_STOPWORDS
    weights: dict = field(default_factory=lambda: dict(WEIGHT_PRESETS))


@dataclass
class AppConfig:
    rewards: RewardSettings = field(default_factory=RewardSettings)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    qc_cutoff: float = 2.5

    def reward_config(self, mode: str = "train") -> RewardConfig:
        """Reward settings with the embedding table loaded.

        Without an explicit fallback, ``train`` mode raises on unknown gold
        names and ``eval`` mode falls back to trigram Jaccard.
        """
        r = self.rewards
        fallback = r.fallback or ("jaccard" if mode == "eval" else "error")
        table = EmbeddingTable.load(r.embeddings) if r.embeddings else None
        return RewardConfig(
            weights=dict(r.weights),
            tau=r.tau,
            table=table,
            fallback=fallback,
            tolerance=r.tolerance,
            stopwords=r.stopwords,
        )


def _check_keys(section: dict, allowed, where: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")


def _dataclass_from(cls, section: dict, where: str):
    names = [f.name for f in dataclasses.fields(cls)]
    _check_keys(section, names, where)
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def parse_config(data: dict, base_dir: Path | None = None) -> AppConfig:
    _check_keys(data, ("rewards", "grpo", "filter", "qc"), "top level")
    cfg = AppConfig()

    rewards = dict(data.get("rewards", {}))
    _check_keys(rewards, ("tau", "tolerance", "embeddings", "fallback", "stopwords", "weights"), "rewards")
    weights = dict(WEIGHT_PRESETS)
    for task_name, section in rewards.pop("weights", {}).items():
        try:
            task = TaskKind.parse(task_name)
        except ValueError as exc:
            raise ConfigError(f"[rewards.weights]: {exc}") from None
        weights[task] = _dataclass_from(RewardWeights, section, f"rewards.weights.{task_name}")
    settings = RewardSettings(weights=weights)
    if "tau" in rewards:
        settings.tau = float(rewards["tau"])
    if "tolerance" in rewards:
        settings.tolerance = float(rewards["tolerance"])
    if "fallback" in rewards:
        if rewards["fallback"] not in ("error", "jaccard"):
            raise ConfigError(f"[rewards]: fallback must be 'error' or 'jaccard', got {rewards['fallback']!r}")
        settings.fallback = rewards["fallback"]
    if "stopwords" in rewards:
        settings.stopwords = frozenset(str(w).lower() for w in rewards["stopwords"])
    if "embeddings" in rewards:
        path = Path(rewards["embeddings"])
        settings.embeddings = path if path.is_absolute() or base_dir is None else base_dir / path
    if not 0 < settings.tau <= 1:
        raise ConfigError("[rewards]: tau must lie in (0, 1]")
    cfg.rewards = settings

    cfg.grpo = _dataclass_from(GrpoConfig, data.get("grpo", {}), "grpo")
    cfg.filter = _dataclass_from(FilterConfig, data.get("filter", {}), "filter")
    qc = data.get("qc", {})
    _check_keys(qc, ("cutoff",), "qc")
    cfg.qc_cutoff = float(qc.get("cutoff", cfg.qc_cutoff))
    return cfg


def load_config(path: str | Path | None) -> AppConfig:
    if path is None:
        return AppConfig()
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data, path.parent)
