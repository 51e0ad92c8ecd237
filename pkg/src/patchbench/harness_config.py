"""Experiment configuration: artifact references, grid, seeds."""
from __future__ import annotations

import json
from dataclasses import dataclass, field


@dataclass
class ExperimentConfig:
    model_path: str
    patch_paths: list[str]
    data_path: str
    holdout_path: str
    adv_set_size: int = 500
    grid_p: tuple[float, ...] = (25.0, 50.0, 75.0, 100.0)
    grid_k: tuple[int, ...] = (1, 2, 3)
    master_seed: int = 0
    placement_seed: int = 1
    backend_id: str = "diffusion-baseline"

    def __post_init__(self):
        if not self.patch_paths:
            raise ValueError("at least one patch is required")
        if self.adv_set_size < 1:
            raise ValueError("adv_set_size must be >= 1")
        self.grid_p = tuple(float(p) for p in self.grid_p)
        self.grid_k = tuple(int(k) for k in self.grid_k)

    def to_dict(self) -> dict:
        return {
            "model_path": self.model_path,
            "patch_paths": list(self.patch_paths),
            "data_path": self.data_path,
            "holdout_path": self.holdout_path,
            "adv_set_size": self.adv_set_size,
            "grid_p": list(self.grid_p),
            "grid_k": list(self.grid_k),
            "master_seed": self.master_seed,
            "placement_seed": self.placement_seed,
            "backend_id": self.backend_id,
        }

    @staticmethod
    def from_json(path: str) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        return ExperimentConfig(**raw)
