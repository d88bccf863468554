"""Experiment configuration loaded from a JSON document.

Every section is optional; missing keys take the library defaults.  A
minimal config is ``{}``.  Example::

    {
      "env": {"H": 16, "W": 16, "D": 16, "pool_size": 20, "seed": 42},
      "anchors": {"scales": [0.25, 0.5, 0.75, 1.0], "stride": 2},
      "train": {"steps": 2000, "learning_rate": 0.05,
                "weights": [0.25, 0.25, 0.25, 0.25], "eta": 1.0},
      "baselines": ["full", "center", "random"],
      "ablation_masks": ["mrr", "full"],
      "n_eval": 500
    }
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .env import EnvConfig
from .metrics import COND_KS, RECALL_KS
from .policy import DEFAULT_SCALES, DEFAULT_STRIDE
from .reward import ABLATION_MASKS, RewardWeights
from .rgrpo import TrainConfig

BASELINES = ("full", "center", "random")
_U64 = (1 << 64) - 1


def _known(cls, section: Mapping[str, Any], name: str) -> dict:
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ValueError(f"config section {name!r}: unknown keys {unknown}")
    return dict(section)


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scales: tuple[float, ...] = DEFAULT_SCALES
    stride: int = DEFAULT_STRIDE
    eval_ks: tuple[int, ...] = RECALL_KS
    cond_ks: tuple[int, ...] = COND_KS
    baselines: tuple[str, ...] = BASELINES
    center_fraction: float = 0.5
    random_draws: int = 5
    area_file: str | None = None
    ablation_masks: tuple[str, ...] = tuple(ABLATION_MASKS)
    n_eval: int = 500
    n_valid: int = 200
    output_dir: str = "runs"
    dataset: str | None = None
    train_dataset: str | None = None

    def __post_init__(self):
        if max(self.eval_ks) > self.env.pool_size or min(self.eval_ks) < 1:
            raise ValueError(f"eval Ks must lie in 1..pool_size={self.env.pool_size}")
        if any(k < 1 for k in self.cond_ks):
            raise ValueError("conditional-recall Ks must be positive")
        bad = [b for b in self.baselines if b not in BASELINES]
        if bad:
            raise ValueError(f"unknown baselines {bad}; expected a subset of {BASELINES}")
        bad = [m for m in self.ablation_masks if m not in ABLATION_MASKS]
        if bad:
            raise ValueError(f"unknown ablation masks {bad}")
        if not 0 < self.center_fraction <= 1:
            raise ValueError("center_fraction must lie in (0, 1]")
        if self.random_draws < 1 or self.n_eval < 1 or self.n_valid < 0:
            raise ValueError("random_draws and n_eval must be >= 1, n_valid >= 0")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        if not 0 <= seed <= _U64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        return dataclasses.replace(
            self,
            env=dataclasses.replace(self.env, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )

    def missing_paths(self) -> list[str]:
        """Configured input files that do not exist (checked at run time)."""
        paths = [self.area_file, self.dataset, self.train_dataset]
        return [p for p in paths if p is not None and not Path(p).exists()]

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        env = EnvConfig(**_known(EnvConfig, d.pop("env", {}), "env"))
        train_d = _known(TrainConfig, d.pop("train", {}), "train")
        if "weights" in train_d:
            train_d["weights"] = RewardWeights(*train_d["weights"])
        train = TrainConfig(**train_d)
        anchors = d.pop("anchors", {})
        if set(anchors) - {"scales", "stride"}:
            raise ValueError("config section 'anchors' takes only 'scales' and 'stride'")
        kw: dict[str, Any] = {"env": env, "train": train}
        if "scales" in anchors:
            kw["scales"] = tuple(float(s) for s in anchors["scales"])
        if "stride" in anchors:
            kw["stride"] = int(anchors["stride"])
        top = {f.name for f in dataclasses.fields(cls)} - {"env", "train", "scales", "stride"}
        unknown = sorted(set(d) - top)
        if unknown:
            raise ValueError(f"unknown config keys {unknown}")
        for k, v in d.items():
            kw[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        train = dataclasses.asdict(self.train)
        train["weights"] = list(self.train.weights.as_tuple())
        out = {
            "env": dataclasses.asdict(self.env),
            "train": train,
            "anchors": {"scales": list(self.scales), "stride": self.stride},
        }
        for f in dataclasses.fields(self):
            if f.name in ("env", "train", "scales", "stride"):
                continue
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out
