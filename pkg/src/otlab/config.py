"""Experiment configuration: one JSON document drives every CLI stage.

Dataset identity (synthetic spec seed, split seed) is separate from the
run seed passed via ``--seed``/``"seed"``: stages of one experiment share
the same dataset while varying training randomness.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .data import Dataset, SyntheticSpec, generate_synthetic, load_directory, split
from .engine.model import default_architecture
from .engine.train import Schedule
from .errors import ConfigError, FormatError
from .metric import FinetuneSchedule, LossConfig
from .occlusion import OccluderSpec


@dataclass
class ExperimentConfig:
    raw: dict
    seed: int

    @classmethod
    def load(cls, path, seed_override: int | None = None) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        seed = seed_override if seed_override is not None else raw.get("seed")
        if seed is None:
            raise ConfigError("a seed is required (config \"seed\" or --seed)")
        return cls(raw=raw, seed=int(seed))

    # ------------------------------------------------------------ pieces

    def dataset_splits(self) -> tuple[Dataset, Dataset, Dataset]:
        """(full, train, val); deterministic from the dataset spec alone."""
        section = self.raw.get("dataset")
        if not isinstance(section, dict):
            raise ConfigError('config needs a "dataset" object '
                              '({"synthetic": {...}} or {"path": "..."})')
        val_fraction = float(self.raw.get("val_fraction", 0.1))
        if "synthetic" in section:
            try:
                spec = SyntheticSpec.from_config(section["synthetic"])
                full = generate_synthetic(spec)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"invalid synthetic dataset spec: {exc}") from exc
            split_seed = int(section.get("split_seed", spec.seed))
        elif "path" in section:
            root = Path(section["path"])
            if not root.is_dir():
                raise ConfigError(f"dataset path {root} is not a directory")
            try:
                full = load_directory(root)
            except FormatError as exc:
                raise ConfigError(str(exc)) from exc
            split_seed = int(section.get("split_seed", 0))
        else:
            raise ConfigError('dataset must contain "synthetic" or "path"')
        try:
            train, val = split(full, val_fraction, split_seed)
        except ValueError as exc:
            raise ConfigError(f"cannot split dataset: {exc}") from exc
        return full, train, val

    def model_config(self, dataset: Dataset) -> dict:
        if "model" in self.raw and self.raw["model"] is not None:
            cfg = self.raw["model"]
            if not isinstance(cfg, dict) or "input" not in cfg or "layers" not in cfg:
                raise ConfigError('"model" must contain "input" and "layers"')
            return cfg
        h, w = dataset.image_shape()
        if h != w:
            raise ConfigError("default architecture expects square images; "
                              'provide an explicit "model" section')
        return default_architecture(h, dataset.class_count,
                                    bottleneck=int(self.raw.get("bottleneck", 32)))

    def schedule(self) -> Schedule:
        section = self.raw.get("schedule", {})
        try:
            return Schedule(steps=int(section.get("steps", 600)),
                            lr=float(section.get("lr", 0.05)),
                            momentum=float(section.get("momentum", 0.9)),
                            batch_size=int(section.get("batch_size", 32)))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid schedule: {exc}") from exc

    def occluder(self) -> OccluderSpec:
        section = self.raw.get("occluder")
        if section is None:
            raise ConfigError('config needs an "occluder" object for this command')
        try:
            return OccluderSpec.from_config(section)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid occluder spec: {exc}") from exc

    def temperature(self) -> float:
        t = float(self.raw.get("temperature", 0.4))
        if t <= 0:
            raise ConfigError("temperature must be positive")
        return t

    def stride(self) -> int:
        s = int(self.raw.get("stride", 1))
        if s < 1:
            raise ConfigError("stride must be at least 1")
        return s

    def map_images(self) -> int:
        n = int(self.raw.get("map_images", 1000))
        if n < 1:
            raise ConfigError("map_images must be at least 1")
        return n

    def placement_mode(self) -> str:
        mode = self.raw.get("placement_mode", "P")
        if mode not in ("P", "R"):
            raise ConfigError('placement_mode must be "P" (map-guided) or "R" (random)')
        return mode

    def occluded_fraction(self) -> float:
        f = float(self.raw.get("occluded_fraction", 0.5))
        if not 0.0 < f <= 1.0:
            raise ConfigError("occluded_fraction must lie in (0, 1]")
        return f

    def loss(self) -> LossConfig:
        section = self.raw.get("loss", {})
        try:
            return LossConfig(
                mode=section.get("mode", "batch"),
                alpha=float(section.get("alpha", 0.5)),
                beta=float(section.get("beta", 0.7)),
                online=bool(section.get("online", True)),
                max_triplets=section.get("max_triplets"),
            )
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid loss config: {exc}") from exc

    def finetune_schedule(self) -> FinetuneSchedule:
        section = self.raw.get("finetune", {})
        try:
            return FinetuneSchedule(
                steps=int(section.get("steps", 200)),
                lr=float(section.get("lr", 0.01)),
                momentum=float(section.get("momentum", 0.9)),
                pool_classes=int(section.get("pool_classes", 8)),
                pool_per_class=int(section.get("pool_per_class", 8)),
            )
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid finetune schedule: {exc}") from exc

    def eval_k(self) -> int:
        section = self.raw.get("eval", {})
        k = int(section.get("k", 10))
        if k < 2:
            raise ConfigError("eval.k must be at least 2")
        return k

    def eval_pairs_path(self, override=None) -> Path:
        if override is not None:
            return Path(override)
        section = self.raw.get("eval", {})
        if "pairs" not in section:
            raise ConfigError('config needs "eval.pairs" (or pass --pairs)')
        return Path(section["pairs"])
