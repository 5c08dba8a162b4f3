"""Routing-behaviour analysis.

Everything here consumes the routing log (per-layer expert selections with
dataset tags) written during evaluation passes. Distributions and their
weighted Jensen-Shannon divergence quantify how differently datasets use
the expert pool at each layer; pathway tables follow each embed-level
token's top-1 expert through every expert layer (pooled stages resolved
through the recorded parent lineage); the co-occurrence matrix pairs each
token's top-1 expert with its predicted class.

All entropies are natural-log (nats), with 0*ln 0 = 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .blocks import PointMoEModel, network_forward
from .errors import AnalyticsError
from .moe import RoutingLog
from .syndata import Registry


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


@dataclass
class ExpertDistribution:
    layer_id: int
    datasets: tuple[str, ...]
    probs: np.ndarray        # [n_datasets, n_experts], each row sums to 1
    weights: np.ndarray      # token share per dataset at this layer, sums to 1


def collect_distributions(log: RoutingLog, num_experts: int | None = None,
                          gate_weighted: bool = False
                          ) -> dict[int, ExpertDistribution]:
    """Per-layer dataset-conditional expert usage.

    Default: fractions of top-1 (rank 0) assignments. gate_weighted=True
    instead spreads each token's unit mass over its selected experts by
    gate weight.
    """
    if not log.entries:
        raise AnalyticsError("routing log is empty")
    if any(e.dataset_tag is None for e in log.entries):
        raise AnalyticsError("routing records need dataset tags for analytics")
    if num_experts is None:
        num_experts = 1 + max(int(e.expert_ids.max()) for e in log.entries)

    layers = sorted({e.layer_id for e in log.entries})
    datasets = tuple(sorted({e.dataset_tag for e in log.entries}))
    out: dict[int, ExpertDistribution] = {}
    for lid in layers:
        mass = np.zeros((len(datasets), num_experts))
        tokens = np.zeros(len(datasets))
        for e in log.entries:
            if e.layer_id != lid:
                continue
            d = datasets.index(e.dataset_tag)
            t = e.expert_ids.shape[0]
            tokens[d] += t
            if gate_weighted:
                for rank in range(e.expert_ids.shape[1]):
                    np.add.at(mass[d], e.expert_ids[:, rank], e.gates[:, rank])
            else:
                mass[d] += np.bincount(e.expert_ids[:, 0], minlength=num_experts)
        keep = tokens > 0
        probs = mass[keep] / mass[keep].sum(axis=1, keepdims=True)
        out[lid] = ExpertDistribution(
            layer_id=lid,
            datasets=tuple(d for d, k in zip(datasets, keep) if k),
            probs=probs, weights=tokens[keep] / tokens[keep].sum())
    return out


def jsd(dist: ExpertDistribution) -> float:
    """Weighted Jensen-Shannon divergence of the dataset-conditional
    distributions: entropy of the mixture minus mixture of entropies."""
    mixture = dist.weights @ dist.probs
    return entropy(mixture) - float(sum(w * entropy(p)
                                        for w, p in zip(dist.weights, dist.probs)))


# ---------------------------------------------------------------------------
# pathways


@dataclass
class PathwayRow:
    path: tuple[int, ...]
    count: int
    per_dataset: dict[str, int]


@dataclass
class PathwayTable:
    layer_ids: tuple[int, ...]
    datasets: tuple[str, ...]
    rows: list[PathwayRow]


def pathways(log: RoutingLog, top_m: int = 100) -> PathwayTable:
    """Most frequent top-1 expert sequences across all expert layers.

    Each embed-level token contributes one sequence; at pooled layers it
    inherits the decision of its coarse ancestor via the recorded lineage.
    """
    if not log.entries:
        raise AnalyticsError("routing log is empty")
    layers = tuple(sorted({e.layer_id for e in log.entries}))
    steps = sorted({e.step for e in log.entries})
    entry_map = {(e.step, e.layer_id): e for e in log.entries}
    datasets = tuple(sorted({e.dataset_tag for e in log.entries if e.dataset_tag}))

    counts: dict[tuple[int, ...], dict[str, int]] = {}
    for step in steps:
        missing = [lid for lid in layers if (step, lid) not in entry_map
                   or (step, lid) not in log.lineage]
        if missing:
            raise AnalyticsError(f"incomplete lineage for step {step}, "
                                 f"layers {missing}")
        tag = entry_map[(step, layers[0])].dataset_tag
        if tag is None:
            raise AnalyticsError("routing records need dataset tags for analytics")
        top1 = {lid: entry_map[(step, lid)].expert_ids[:, 0] for lid in layers}
        lineage = {lid: log.lineage[(step, lid)] for lid in layers}
        n0 = lineage[layers[0]].shape[0]
        seq = np.stack([top1[lid][lineage[lid]] for lid in layers], axis=1)
        for row in seq:
            key = tuple(int(v) for v in row)
            counts.setdefault(key, {}).setdefault(tag, 0)
            counts[key][tag] += 1
    rows = [PathwayRow(path=k, count=sum(v.values()), per_dataset=v)
            for k, v in counts.items()]
    rows.sort(key=lambda r: (-r.count, r.path))
    return PathwayTable(layer_ids=layers, datasets=datasets, rows=rows[:top_m])


def expert_class_matrix(log: RoutingLog, predictions: dict[int, np.ndarray],
                        num_experts: int | None = None,
                        num_classes: int | None = None
                        ) -> dict[int, np.ndarray]:
    """Per-layer counts of (top-1 expert, predicted class) pairs.

    predictions maps step -> embed-level predicted class ids; pooled
    layers attribute a token's class to its ancestor's expert.
    """
    if not log.entries:
        raise AnalyticsError("routing log is empty")
    layers = sorted({e.layer_id for e in log.entries})
    steps = sorted({e.step for e in log.entries})
    entry_map = {(e.step, e.layer_id): e for e in log.entries}
    if num_experts is None:
        num_experts = 1 + max(int(e.expert_ids.max()) for e in log.entries)
    if num_classes is None:
        num_classes = 1 + max(int(p.max()) for p in predictions.values())

    out = {lid: np.zeros((num_experts, num_classes), dtype=np.int64)
           for lid in layers}
    for step in steps:
        if step not in predictions:
            raise AnalyticsError(f"no predictions for step {step}")
        pred = np.asarray(predictions[step])
        for lid in layers:
            if (step, lid) not in log.lineage:
                raise AnalyticsError(f"incomplete lineage for step {step}, layer {lid}")
            lineage = log.lineage[(step, lid)]
            if lineage.shape[0] != pred.shape[0]:
                raise AnalyticsError(
                    f"predictions for step {step} have {pred.shape[0]} tokens, "
                    f"lineage has {lineage.shape[0]}")
            experts = entry_map[(step, lid)].expert_ids[:, 0][lineage]
            np.add.at(out[lid], (experts, pred), 1)
    return out


def row_normalized(mat: np.ndarray) -> np.ndarray:
    sums = mat.sum(axis=1, keepdims=True).astype(np.float64)
    return np.divide(mat, sums, out=np.zeros(mat.shape, dtype=np.float64),
                     where=sums > 0)


# ---------------------------------------------------------------------------
# feature export


def export_features(model: PointMoEModel, registry: Registry, datasets: list[str],
                    stage: str, path, split: str = "val",
                    max_scenes: int = 0) -> int:
    """Dump per-token stage features with dataset tags for offline
    projection tools. Text format: line 1 `K D`, then `tag v1 .. vD`."""
    if stage not in ("encoder_out", "decoder_out"):
        raise AnalyticsError(f"unknown export stage {stage!r}")
    rows: list[tuple[str, np.ndarray]] = []
    for name in datasets:
        spec = registry.specs[name]
        seeds = registry.val_seeds(name) if split == "val" \
            else registry.train_seeds(name)
        if max_scenes:
            seeds = seeds[:max_scenes]
        for s in seeds:
            cloud = registry.scene(name, s)
            with tc.no_grad():
                out = network_forward(cloud, model, cell_size=spec.cell_size,
                                      training=False, capture=(stage,))
            for vec in out.captured[stage]:
                rows.append((name, vec))
    if not rows:
        raise AnalyticsError("nothing to export")
    dim = rows[0][1].shape[0]
    with open(path, "w") as fh:
        fh.write(f"{len(rows)} {dim}\n")
        for tag, vec in rows:
            fh.write(tag + " " + " ".join(f"{v:.17g}" for v in vec) + "\n")
    return len(rows)


# ---------------------------------------------------------------------------
# CSV reports


def write_jsd_csv(model_layers: list[tuple[int, str]],
                  dists: dict[int, ExpertDistribution], path) -> None:
    stage_of = dict(model_layers)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer_id", "stage", "jsd_nats"])
        for lid in sorted(dists):
            w.writerow([lid, stage_of.get(lid, "unknown"), f"{jsd(dists[lid]):.9g}"])


def read_jsd_csv(path) -> list[tuple[int, str, float]]:
    with open(path, newline="") as fh:
        return [(int(r["layer_id"]), r["stage"], float(r["jsd_nats"]))
                for r in csv.DictReader(fh)]


def write_pathways_csv(table: PathwayTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "path", "count"] + [f"count_{d}" for d in table.datasets])
        for rank, row in enumerate(table.rows):
            w.writerow([rank, "-".join(map(str, row.path)), row.count]
                       + [row.per_dataset.get(d, 0) for d in table.datasets])


def write_cooccurrence_csv(mats: dict[int, np.ndarray],
                           class_names: list[str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer_id", "expert_id"] + list(class_names))
        for lid in sorted(mats):
            for e, row in enumerate(mats[lid]):
                w.writerow([lid, e] + [int(v) for v in row])
