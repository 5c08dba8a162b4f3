"""Optimization loop, evaluation, and the comparison baselines.

Training follows the joint objective: every step draws a (mixed or
homogeneous) batch, sums each sample's masked cross-entropy against its
own label space plus any auxiliary routing loss, clips the global
gradient norm, and applies a decoupled-weight-decay Adam update under a
one-cycle schedule (linear warmup to the peak rate, cosine decay to 1% of
it).

Variants:
  point_moe        -- the sparse expert network; never reads dataset tags.
  dense            -- single always-on expert per site (the no-routing twin).
  conditioned_norm -- dense network plus per-dataset normalization
                      gain/bias tables; needs a dataset identity, supplied
                      by the tag while training and by the lightweight
                      domain classifier at inference.

Metrics log: one JSON record per line with keys step, loss, lr, aux_loss
and optionally per_dataset {name: mIoU}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import tensorcore as tc
from .blocks import (NetworkConfig, PointMoEModel, network_forward,
                     network_forward_batch, save_checkpoint)
from .errors import ConfigError, SupervisionError, TrainingDiverged
from .langhead import ClassEmbeddingTable, class_logits, default_table, \
    masked_cross_entropy, predict
from .moe import RoutingLog, load_balance_loss
from .sampler import Batch, BatchPlan, next_batch
from .syndata import AugmentConfig, PointCloud, Registry, augment
from .tensorcore import Tensor


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 0.005
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    total_steps: int = 500
    warmup_frac: float = 0.1
    lr_floor_ratio: float = 0.01
    grad_clip_norm: float = 1.0
    seed: int = 0
    table_seed: int = 7
    checkpoint_every: int = 0        # 0: only the final checkpoint
    eval_every: int = 0              # 0: evaluate only at the end
    max_val_scenes: int = 0          # 0: all validation scenes
    augment: AugmentConfig = AugmentConfig()

    def __post_init__(self):
        if self.total_steps < 10:
            raise ConfigError("total_steps must be >= 10")
        if self.lr_max <= 0 or self.lr_floor_ratio <= 0:
            raise ConfigError("learning rate must stay positive over the schedule")


def one_cycle_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from the floor to lr_max, cosine decay back down."""
    floor = cfg.lr_max * cfg.lr_floor_ratio
    warm = max(1, int(round(cfg.warmup_frac * cfg.total_steps)))
    if step < warm:
        return floor + (cfg.lr_max - floor) * (step / warm)
    span = max(1, cfg.total_steps - 1 - warm)
    t = min(1.0, (step - warm) / span)
    return floor + 0.5 * (cfg.lr_max - floor) * (1.0 + np.cos(np.pi * t))


class AdamW:
    """Adam with decoupled weight decay; never mutates gradient arrays."""

    def __init__(self, params: list[tuple[str, Tensor]], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in params]
        self.v = [np.zeros_like(p.data) for _, p in params]

    def step(self, grads: dict[Tensor, np.ndarray], lr: float,
             grad_scale: float = 1.0) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for (_, p), m, v in zip(self.params, self.m, self.v):
            g = grads[p]
            m *= c.beta1
            m += (1.0 - c.beta1) * grad_scale * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (grad_scale * grad_scale) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            p.data -= lr * (update + c.weight_decay * p.data)


def global_grad_norm(params, grads) -> float:
    total = 0.0
    for _, p in params:
        g = grads[p]
        total += float(np.dot(g.ravel(), g.ravel()))
    return float(np.sqrt(total))


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    class_names: tuple[str, ...]
    confusion: np.ndarray                       # [C, C], rows = ground truth
    per_class_iou: dict[str, float] = field(init=False)
    miou: float = field(init=False)
    overall_acc: float = field(init=False)

    def __post_init__(self):
        conf = self.confusion
        inter = np.diag(conf).astype(np.float64)
        union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
        self.per_class_iou = {}
        ious = []
        for c, name in enumerate(self.class_names):
            if union[c] > 0:
                iou = float(inter[c] / union[c])
                self.per_class_iou[name] = iou
                ious.append(iou)
        # classes absent from both prediction and ground truth are excluded
        self.miou = float(np.mean(ious)) if ious else 0.0
        total = conf.sum()
        self.overall_acc = float(np.trace(conf) / total) if total else 0.0


def confusion_matrix(preds: np.ndarray, labels: np.ndarray, num_classes: int
                     ) -> np.ndarray:
    mask = labels >= 0
    if not np.any(mask):
        raise SupervisionError("all points carry the ignore label")
    flat = labels[mask] * num_classes + preds[mask]
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


# ---------------------------------------------------------------------------
# domain classifier (for the conditioned-normalization baseline)


DESCRIPTOR_DIM = 12


def scene_descriptor(cloud: PointCloud) -> np.ndarray:
    """12 global statistics of a scene, exactly invariant to point order.

    Extents (3), log10 point count, mean/std/p90 of nearest-neighbour
    distance, mean/std of height, mean/std of planar radius about the
    centroid, log10 bounding-box density.
    """
    c = cloud.coords
    lo, hi = c.min(axis=0), c.max(axis=0)
    ext = hi - lo
    nnd = cKDTree(c).query(c, k=2)[0][:, 1]
    nnd = np.sort(nnd)
    z = np.sort(c[:, 2])
    # reductions run over sorted values so the result is independent of
    # point order down to the last bit
    centroid = np.array([np.sort(c[:, 0]).mean(), np.sort(c[:, 1]).mean()])
    radial = np.sort(np.hypot(c[:, 0] - centroid[0], c[:, 1] - centroid[1]))
    volume = float(ext[0] * ext[1] * ext[2]) + 1e-9
    return np.array([
        ext[0], ext[1], ext[2],
        np.log10(cloud.num_points),
        nnd.mean(), nnd.std(), nnd[int(0.9 * (len(nnd) - 1))],
        z.mean(), z.std(),
        radial.mean(), radial.std(),
        np.log10(cloud.num_points / volume),
    ])


@dataclass
class DomainClassifier:
    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    weights: np.ndarray          # [DESCRIPTOR_DIM + 1, num_domains]

    def predict_index(self, cloud: PointCloud) -> int:
        x = (scene_descriptor(cloud) - self.mean) / self.std
        logits = np.append(x, 1.0) @ self.weights
        return int(np.argmax(logits))

    def predict(self, cloud: PointCloud) -> str:
        return self.names[self.predict_index(cloud)]


def train_dataset_classifier(registry: Registry, names: tuple[str, ...] | None = None,
                             max_iter: int = 5000, tol: float = 1e-6,
                             lr: float = 1.0) -> DomainClassifier:
    """Multinomial logistic regression on scene descriptors.

    Full-batch gradient descent until the gradient norm drops below tol or
    the iteration budget runs out; with standardized descriptors and two
    strongly separated domains this converges in a few hundred steps.
    """
    names = tuple(names if names is not None else registry.names)
    if len(names) < 2:
        raise ConfigError("domain classifier needs at least two datasets")
    xs, ys = [], []
    for d, name in enumerate(names):
        for s in registry.train_seeds(name):
            xs.append(scene_descriptor(registry.scene(name, s)))
            ys.append(d)
    x = np.stack(xs)
    y = np.array(ys)
    mean = x.mean(axis=0)
    std = np.where(x.std(axis=0) > 1e-9, x.std(axis=0), 1.0)
    xt = np.hstack([(x - mean) / std, np.ones((len(x), 1))])
    onehot = np.eye(len(names))[y]
    w = np.zeros((xt.shape[1], len(names)))
    for _ in range(max_iter):
        logits = xt @ w
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        grad = xt.T @ (p - onehot) / len(x)
        if float(np.sqrt((grad ** 2).sum())) < tol:
            break
        w -= lr * grad
    return DomainClassifier(names=names, mean=mean, std=std, weights=w)


def classifier_accuracy(clf: DomainClassifier, registry: Registry,
                        split: str = "val") -> float:
    hits = total = 0
    for d, name in enumerate(clf.names):
        seeds = registry.val_seeds(name) if split == "val" else registry.train_seeds(name)
        for s in seeds:
            hits += int(clf.predict_index(registry.scene(name, s)) == d)
            total += 1
    return hits / total if total else 0.0


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: PointMoEModel, registry: Registry, dataset: str,
             table: ClassEmbeddingTable, split: str = "val",
             classifier: DomainClassifier | None = None,
             sink: RoutingLog | None = None, max_scenes: int = 0,
             step_base: int = 0,
             predictions_out: dict[int, np.ndarray] | None = None) -> Metrics:
    """Point-level metrics over a dataset split.

    Voxel-token predictions are broadcast back to every member point
    through the embed map and accumulated in one confusion matrix. Models
    with several normalization domains resolve the domain per scene with
    the supplied classifier (no dataset identity is read from the sample).
    """
    space = registry.label_space(dataset)
    spec = registry.specs[dataset]
    num_c = space.num_classes
    conf = np.zeros((num_c, num_c), dtype=np.int64)
    seeds = registry.val_seeds(dataset) if split == "val" else registry.train_seeds(dataset)
    if max_scenes:
        seeds = seeds[:max_scenes]
    for i, s in enumerate(seeds):
        cloud = registry.scene(dataset, s)
        if len(model.norm_domains) > 1:
            if classifier is None:
                raise ConfigError("conditioned normalization needs a domain "
                                  "classifier at inference")
            domain = clamp_domain(model, classifier.predict(cloud))
        else:
            domain = 0
        with tc.no_grad():
            out = network_forward(cloud, model, cell_size=spec.cell_size,
                                  training=False, sink=sink,
                                  step=step_base + i, domain=domain)
        token_pred = predict(out.features, space, table, scale=model.cfg.head_scale)
        if predictions_out is not None:
            predictions_out[step_base + i] = token_pred
        point_pred = token_pred[out.point_map]
        conf += confusion_matrix(point_pred, cloud.labels, num_c)
    return Metrics(class_names=space.class_names, confusion=conf)


def clamp_domain(model: PointMoEModel, name: str) -> int:
    return model.norm_domains.index(name) if name in model.norm_domains else 0


def frequency_prior_miou(registry: Registry, dataset: str, split: str = "val"
                         ) -> float:
    """mIoU of the constant predictor that always answers the most
    frequent class of the split (the class-frequency-prior baseline)."""
    space = registry.label_space(dataset)
    seeds = registry.val_seeds(dataset) if split == "val" else registry.train_seeds(dataset)
    counts = np.zeros(space.num_classes, dtype=np.int64)
    for s in seeds:
        labels = registry.scene(dataset, s).labels
        counts += np.bincount(labels[labels >= 0], minlength=space.num_classes)
    top = int(np.argmax(counts))
    conf = np.zeros((space.num_classes, space.num_classes), dtype=np.int64)
    conf[:, top] = counts
    return Metrics(class_names=space.class_names, confusion=conf).miou


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: PointMoEModel
    records: list[dict]
    per_dataset: dict[str, Metrics]
    classifier: DomainClassifier | None = None


def build_variant_model(variant: str, base_cfg: NetworkConfig, seed: int,
                        datasets: tuple[str, ...]) -> PointMoEModel:
    if variant == "point_moe":
        return PointMoEModel(base_cfg, seed=seed)
    if variant == "dense":
        cfg = replace(base_cfg, moe=replace(base_cfg.moe, num_experts=1, top_k=1,
                                            aux_loss_alpha=0.0))
        return PointMoEModel(cfg, seed=seed)
    if variant == "conditioned_norm":
        cfg = replace(base_cfg, moe=replace(base_cfg.moe, num_experts=1, top_k=1,
                                            aux_loss_alpha=0.0))
        return PointMoEModel(cfg, seed=seed, norm_domains=datasets)
    raise ConfigError(f"unknown model variant {variant!r}")


def train(variant: str, plan: BatchPlan, registry: Registry, cfg: TrainConfig,
          model_cfg: NetworkConfig | None = None,
          table: ClassEmbeddingTable | None = None,
          out_dir=None) -> TrainResult:
    """Run the optimization loop; returns the model and its metrics log."""
    model_cfg = model_cfg or NetworkConfig()
    model = build_variant_model(variant, model_cfg, cfg.seed, plan.datasets)
    if table is None:
        table = default_table(dim=model.cfg.head_embed_dim, seed=cfg.table_seed)
    params = model.named_params()
    opt = AdamW(params, cfg)
    param_tensors = [p for _, p in params]
    alpha = model.cfg.moe.aux_loss_alpha
    classifier = None
    if variant == "conditioned_norm" and len(plan.datasets) > 1:
        classifier = train_dataset_classifier(registry, names=plan.datasets)

    conditioned = len(model.norm_domains) > 1
    records: list[dict] = []
    for step in range(cfg.total_steps):
        batch = next_batch(plan, registry, step)
        clouds = [augment(cloud, np.random.default_rng([cfg.seed, step, slot, 0xA06]),
                          cfg.augment)
                  for slot, cloud in enumerate(batch.samples)]
        total: Tensor | None = None
        aux_value = 0.0
        aux_sink = [] if alpha > 0 else None
        if conditioned:
            # per-sample forwards: each dataset owns its normalization
            # parameters and statistics
            outs = [network_forward(cloud, model,
                                    cell_size=registry.specs[cloud.dataset_tag].cell_size,
                                    training=True, step=step,
                                    domain=clamp_domain(model, cloud.dataset_tag))
                    for cloud in clouds]
        else:
            # one jointly normalized forward: mixed batches share statistics
            # and compete over one expert pool within the step
            outs = network_forward_batch(
                clouds, model,
                [registry.specs[c.dataset_tag].cell_size for c in clouds],
                training=True, step=step, aux_sink=aux_sink)
        for out in outs:
            space = registry.label_space(out.dataset_tag)
            logits = class_logits(out.features, space, table,
                                  scale=model.cfg.head_scale)
            loss = masked_cross_entropy(logits, out.token_labels)
            total = loss if total is None else tc.add(total, loss)
        if aux_sink:
            for probs, ids in aux_sink:
                aux = load_balance_loss(probs, ids, alpha)
                aux_value += float(aux.data)
                total = tc.add(total, aux)

        loss_value = float(total.data)
        if not np.isfinite(loss_value):
            raise TrainingDiverged(f"non-finite loss {loss_value} at step {step}")
        grads = tc.backward(total, params=param_tensors)
        gnorm = global_grad_norm(params, grads)
        scale = 1.0 if gnorm <= cfg.grad_clip_norm or gnorm == 0.0 \
            else cfg.grad_clip_norm / gnorm
        lr = one_cycle_lr(step, cfg)
        opt.step(grads, lr, grad_scale=scale)
        for p in param_tensors:
            p.grad = None

        record = {"step": step, "loss": loss_value, "lr": lr, "aux_loss": aux_value}
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0 \
                and step + 1 < cfg.total_steps:
            record["per_dataset"] = {
                name: evaluate(model, registry, name, table, classifier=classifier,
                               max_scenes=cfg.max_val_scenes).miou
                for name in plan.datasets}
        records.append(record)
        if out_dir is not None and cfg.checkpoint_every \
                and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, f"{out_dir}/model_step{step + 1:06d}.ckpt",
                            extra={"train.step": str(step + 1)})

    per_dataset = {name: evaluate(model, registry, name, table, classifier=classifier,
                                  max_scenes=cfg.max_val_scenes)
                   for name in plan.datasets}
    records.append({"step": cfg.total_steps, "loss": records[-1]["loss"],
                    "lr": one_cycle_lr(cfg.total_steps - 1, cfg), "aux_loss": aux_value,
                    "per_dataset": {n: m.miou for n, m in per_dataset.items()}})
    if out_dir is not None:
        save_checkpoint(model, f"{out_dir}/model.ckpt",
                        extra={"train.steps": str(cfg.total_steps)})
        write_metrics_log(records, f"{out_dir}/metrics.jsonl")
    return TrainResult(model=model, records=records, per_dataset=per_dataset,
                       classifier=classifier)


def write_metrics_log(records: list[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_metrics_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(ln) for ln in fh if ln.strip()]
