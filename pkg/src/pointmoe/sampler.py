"""Batch assembly for joint training over several datasets.

Mixed mode reserves one slot per dataset in every batch (so every update
step sees every domain) and fills the rest by weighted draw; homogeneous
mode draws the whole batch from one weighted-sampled dataset. Batches are
a pure function of (plan, registry, step).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PlanError
from .syndata import PointCloud, Registry


@dataclass(frozen=True)
class BatchPlan:
    datasets: tuple[str, ...]
    mode: str = "mixed"              # "mixed" | "homogeneous"
    batch_size: int = 4
    weights: tuple[float, ...] | None = None
    seed: int = 0
    coverage_floor: bool = True      # mixed mode: guarantee one sample per dataset

    def __post_init__(self):
        if self.mode not in ("mixed", "homogeneous"):
            raise PlanError(f"unknown batch mode {self.mode!r}")
        if not self.datasets:
            raise PlanError("plan needs at least one dataset")
        if self.weights is not None:
            if len(self.weights) != len(self.datasets):
                raise PlanError("weights must align with datasets")
            if any(w <= 0 for w in self.weights):
                raise PlanError("weights must be positive")
        if (self.mode == "mixed" and self.coverage_floor
                and self.batch_size < len(self.datasets)):
            raise PlanError(f"mixed batches of size {self.batch_size} cannot cover "
                            f"{len(self.datasets)} datasets")

    def probs(self) -> np.ndarray:
        w = np.ones(len(self.datasets)) if self.weights is None \
            else np.asarray(self.weights, dtype=np.float64)
        return w / w.sum()


@dataclass
class Batch:
    samples: list[PointCloud]
    scene_refs: list[tuple[str, int]]   # (dataset name, scene seed)

    @property
    def tags(self) -> list[str]:
        return [name for name, _ in self.scene_refs]


def _draw_scene(rng, registry: Registry, name: str, used: set) -> int:
    pool = [s for s in registry.train_seeds(name) if (name, s) not in used]
    if not pool:
        pool = registry.train_seeds(name)   # pool exhausted: allow repeats
    seed = int(pool[rng.integers(0, len(pool))])
    used.add((name, seed))
    return seed


def next_batch(plan: BatchPlan, registry: Registry, step: int) -> Batch:
    """Deterministic batch for a step; see module docstring for the modes."""
    for name in plan.datasets:
        if name not in registry.specs:
            raise PlanError(f"plan dataset {name!r} not in registry {registry.names}")
    rng = np.random.default_rng([plan.seed, step, 0xBA7C4])
    probs = plan.probs()
    used: set[tuple[str, int]] = set()
    refs: list[tuple[str, int]] = []

    if plan.mode == "homogeneous" or len(plan.datasets) == 1:
        name = plan.datasets[rng.choice(len(plan.datasets), p=probs)]
        refs = [(name, _draw_scene(rng, registry, name, used))
                for _ in range(plan.batch_size)]
    else:
        if plan.coverage_floor:
            for name in plan.datasets:
                refs.append((name, _draw_scene(rng, registry, name, used)))
        while len(refs) < plan.batch_size:
            name = plan.datasets[rng.choice(len(plan.datasets), p=probs)]
            refs.append((name, _draw_scene(rng, registry, name, used)))

    return Batch(samples=[registry.scene(n, s) for n, s in refs], scene_refs=refs)
