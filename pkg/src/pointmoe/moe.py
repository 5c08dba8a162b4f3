"""Sparse mixture-of-experts layer.

A linear router scores tokens against N experts; each token is processed
by its top-k experts only and their outputs are combined with sparse
softmax gate weights. Expert selection is recorded per token so routing
behaviour can be analysed offline. The optional load-balancing loss is the
Switch-Transformer product form with strength alpha (alpha=0 disables it
exactly, which is also the default).
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError
from .tensorcore import Tensor

_tls = threading.local()


@dataclass(frozen=True)
class MoEConfig:
    num_experts: int = 4
    top_k: int = 2
    expert_hidden_multiplier: float = 1.0
    num_shared_experts: int = 0
    activation: str = "relu"
    aux_loss_alpha: float = 0.0
    gate_mode: str = "selected"  # "selected": softmax over the k chosen logits;
                                 # "renorm": full softmax renormalized over the chosen k

    def __post_init__(self):
        if self.num_experts < 1:
            raise ConfigError(f"num_experts must be >= 1, got {self.num_experts}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k must be in [1, {self.num_experts}], got {self.top_k}")
        if self.expert_hidden_multiplier <= 0:
            raise ConfigError("expert_hidden_multiplier must be > 0")
        if self.num_shared_experts < 0:
            raise ConfigError("num_shared_experts must be >= 0")
        if self.activation not in ("relu", "silu"):
            raise ConfigError(f"activation must be relu or silu, got {self.activation!r}")
        if self.gate_mode not in ("selected", "renorm"):
            raise ConfigError(f"gate_mode must be selected or renorm, got {self.gate_mode!r}")
        if self.aux_loss_alpha < 0:
            raise ConfigError("aux_loss_alpha must be >= 0")

    def hidden_width(self, dim: int) -> int:
        return max(1, int(round(self.expert_hidden_multiplier * dim)))


@dataclass
class ExpertParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self, prefix: str):
        return [(f"{prefix}.w1", self.w1), (f"{prefix}.b1", self.b1),
                (f"{prefix}.w2", self.w2), (f"{prefix}.b2", self.b2)]


@dataclass
class MoELayerParams:
    router: Tensor                    # [D, N], no bias
    experts: list[ExpertParams]
    shared: list[ExpertParams]

    def tensors(self, prefix: str):
        out = [(f"{prefix}.router", self.router)]
        for i, e in enumerate(self.experts):
            out += e.tensors(f"{prefix}.expert{i}")
        for i, e in enumerate(self.shared):
            out += e.tensors(f"{prefix}.shared{i}")
        return out


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_expert(rng: np.random.Generator, dim: int, hidden: int) -> ExpertParams:
    return ExpertParams(
        w1=tc.tensor(_init_linear(rng, dim, hidden), requires_grad=True),
        b1=tc.tensor(np.zeros(hidden), requires_grad=True),
        w2=tc.tensor(_init_linear(rng, hidden, dim), requires_grad=True),
        b2=tc.tensor(np.zeros(dim), requires_grad=True),
    )


def init_moe_params(rng: np.random.Generator, dim: int, cfg: MoEConfig) -> MoELayerParams:
    hidden = cfg.hidden_width(dim)
    return MoELayerParams(
        router=tc.tensor(_init_linear(rng, dim, cfg.num_experts), requires_grad=True),
        experts=[init_expert(rng, dim, hidden) for _ in range(cfg.num_experts)],
        shared=[init_expert(rng, dim, hidden) for _ in range(cfg.num_shared_experts)],
    )


def expert_mlp(x: Tensor, p: ExpertParams, activation: str) -> Tensor:
    h = tc.activation(tc.add_rowvec(tc.matmul(x, p.w1), p.b1), activation)
    return tc.add_rowvec(tc.matmul(h, p.w2), p.b2)


# ---------------------------------------------------------------------------
# routing


class watch_router_margins:
    """Collect, per route() call, the gap between the k-th and (k+1)-th logit.

    Top-k selection is piecewise constant, so finite differences are only
    trustworthy when this margin stays clear of zero.
    """

    def __enter__(self):
        self.margins: list[float] = []
        _tls.margin_watch = self.margins
        return self

    def __exit__(self, *exc):
        _tls.margin_watch = None
        return False

    @property
    def min_margin(self) -> float:
        return min(self.margins) if self.margins else np.inf


def route(x: Tensor, params: MoELayerParams, cfg: MoEConfig
          ) -> tuple[np.ndarray, Tensor, Tensor]:
    """Score tokens and pick experts.

    Returns (expert_ids [T,k] ordered by descending logit with ties going
    to the lower index, gate weights [T,k] summing to 1 per token, and the
    full router softmax [T,N] used only by the auxiliary loss).
    """
    t = x.data.shape[0]
    n, k = cfg.num_experts, cfg.top_k
    logits = tc.matmul(x, params.router)
    order = np.argsort(-logits.data, axis=1, kind="stable")
    ids = order[:, :k]

    watch = getattr(_tls, "margin_watch", None)
    if watch is not None and k < n:
        ranked = -np.sort(-logits.data, axis=1)
        watch.append(float(np.min(ranked[:, k - 1] - ranked[:, k])))

    flat = (np.arange(t)[:, None] * n + ids).ravel()
    sel = tc.take_flat(logits, flat, (t, k), unique=True)
    if cfg.gate_mode == "selected":
        gates = tc.softmax(sel, axis=1)
    else:
        full = tc.softmax(logits, axis=1)
        sel_p = tc.take_flat(full, flat, (t, k), unique=True)
        gates = tc.mul(sel_p, tc.expand_cols(tc.recip(tc.row_sum(sel_p)), k))
    router_probs = tc.softmax(logits, axis=1)
    return ids, gates, router_probs


def moe_forward(x: Tensor, params: MoELayerParams, cfg: MoEConfig,
                record_sink: "RoutingLog | None" = None, layer_id: int = 0,
                dataset_tag: str | None = None, step: int = 0,
                router_probs_out: list | None = None,
                record_slices: list[tuple[int, int, str | None]] | None = None
                ) -> Tensor:
    """Mixture output: sum of gate-weighted selected experts plus shared ones.

    Only experts selected by at least one token are evaluated. When a sink
    is given, the per-token selections and gates are appended to it; for a
    multi-scene token sequence, record_slices carries the per-scene
    (start, end, tag) spans and each scene logs under step + scene index.
    """
    t, d = x.data.shape
    ids, gates, router_probs = route(x, params, cfg)
    if router_probs_out is not None:
        router_probs_out.append((router_probs, ids))

    pair_token = np.repeat(np.arange(t), cfg.top_k)
    pair_expert = ids.ravel()
    gates_col = tc.reshape(gates, (t * cfg.top_k, 1))

    out: Tensor | None = None
    for e in range(cfg.num_experts):
        pidx = np.nonzero(pair_expert == e)[0]
        if pidx.size == 0:
            continue  # conditional computation: untouched experts are never read
        rows = pair_token[pidx]
        ye = expert_mlp(tc.gather_rows(x, rows, unique=True),
                        params.experts[e], cfg.activation)
        ge = tc.expand_cols(tc.gather_rows(gates_col, pidx, unique=True), d)
        contrib = tc.scatter_add_rows(tc.mul(ye, ge), rows, t, unique=True)
        out = contrib if out is None else tc.add(out, contrib)
    for sp in params.shared:
        ys = expert_mlp(x, sp, cfg.activation)
        out = ys if out is None else tc.add(out, ys)

    if record_sink is not None:
        if record_slices is None:
            record_slices = [(0, t, dataset_tag)]
        for scene, (s, e, tag) in enumerate(record_slices):
            record_sink.append(LayerRouting(step=step + scene, layer_id=layer_id,
                                            expert_ids=ids[s:e].copy(),
                                            gates=gates.data[s:e].copy(),
                                            dataset_tag=tag))
    assert out is not None
    return out


def load_balance_loss(router_probs: Tensor, expert_ids: np.ndarray,
                      alpha: float) -> Tensor:
    """alpha * N * sum_i f_i * P_i.

    f_i is the fraction of tokens whose top-1 expert is i (hard counts, no
    gradient); P_i is the mean router probability of expert i. alpha=0
    returns an exact constant zero that contributes no gradient.
    """
    if alpha == 0.0:
        return tc.tensor(0.0)
    t, n = router_probs.data.shape
    top1 = expert_ids[:, 0]
    f = np.bincount(top1, minlength=n) / t
    weight = np.broadcast_to(f / t, (t, n)).copy()
    total = tc.sum_all(tc.mul(router_probs, tc.tensor(weight)))
    return tc.scale(total, alpha * n)


def count_params(cfg: MoEConfig, dim: int) -> tuple[int, int]:
    """(total, per-token activated) parameter counts for one MoE layer."""
    h = cfg.hidden_width(dim)
    expert = dim * h + h + h * dim + dim
    router = dim * cfg.num_experts
    shared = cfg.num_shared_experts * expert
    total = router + cfg.num_experts * expert + shared
    activated = router + cfg.top_k * expert + shared
    return total, activated


# ---------------------------------------------------------------------------
# routing records


@dataclass
class RoutingRecord:
    layer_id: int
    token_index: int
    expert_ids: tuple[int, ...]
    gate_weights: tuple[float, ...]
    dataset_tag: str | None = None


@dataclass
class LayerRouting:
    """All routing decisions of one moe_forward invocation."""

    step: int
    layer_id: int
    expert_ids: np.ndarray   # [T, k]
    gates: np.ndarray        # [T, k]
    dataset_tag: str | None


class RoutingLog:
    """Append-only routing trace plus token lineage across pooling.

    lineage[(step, layer_id)] maps each embed-level token to its (possibly
    pooled) token index at that layer, which is what lets pathway analysis
    follow a token through coarse stages.
    """

    def __init__(self):
        self.entries: list[LayerRouting] = []
        self.lineage: dict[tuple[int, int], np.ndarray] = {}

    def append(self, entry: LayerRouting) -> None:
        self.entries.append(entry)

    def set_lineage(self, step: int, layer_id: int, mapping: np.ndarray) -> None:
        self.lineage[(step, layer_id)] = np.asarray(mapping, dtype=np.intp)

    def layer_ids(self) -> list[int]:
        return sorted({e.layer_id for e in self.entries})

    def iter_records(self):
        for e in self.entries:
            for tok in range(e.expert_ids.shape[0]):
                yield RoutingRecord(e.layer_id, tok, tuple(map(int, e.expert_ids[tok])),
                                    tuple(map(float, e.gates[tok])), e.dataset_tag)

    # -- files ------------------------------------------------------------

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "layer_id", "token_index", "rank", "expert_id",
                        "gate", "dataset_tag"])
            for e in self.entries:
                tag = e.dataset_tag or ""
                for tok in range(e.expert_ids.shape[0]):
                    for rank in range(e.expert_ids.shape[1]):
                        w.writerow([e.step, e.layer_id, tok, rank,
                                    int(e.expert_ids[tok, rank]),
                                    f"{e.gates[tok, rank]:.6g}", tag])

    def write_lineage_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "layer_id", "orig_index", "layer_index"])
            for (step, layer_id), mapping in sorted(self.lineage.items()):
                for orig, mapped in enumerate(mapping):
                    w.writerow([step, layer_id, orig, int(mapped)])

    @classmethod
    def read_csv(cls, path, lineage_path=None) -> "RoutingLog":
        groups: dict[tuple[int, int], dict] = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                key = (int(row["step"]), int(row["layer_id"]))
                g = groups.setdefault(key, {"ids": {}, "gates": {}, "tag": None})
                tok, rank = int(row["token_index"]), int(row["rank"])
                g["ids"].setdefault(tok, {})[rank] = int(row["expert_id"])
                g["gates"].setdefault(tok, {})[rank] = float(row["gate"])
                g["tag"] = row["dataset_tag"] or None
        log = cls()
        for (step, layer_id), g in sorted(groups.items()):
            toks = sorted(g["ids"])
            k = len(g["ids"][toks[0]])
            ids = np.array([[g["ids"][t][r] for r in range(k)] for t in toks])
            gates = np.array([[g["gates"][t][r] for r in range(k)] for t in toks])
            log.append(LayerRouting(step, layer_id, ids, gates, g["tag"]))
        if lineage_path is not None:
            with open(lineage_path, newline="") as fh:
                rows: dict[tuple[int, int], dict[int, int]] = {}
                for row in csv.DictReader(fh):
                    key = (int(row["step"]), int(row["layer_id"]))
                    rows.setdefault(key, {})[int(row["orig_index"])] = int(row["layer_index"])
            for key, mapping in rows.items():
                arr = np.array([mapping[i] for i in range(len(mapping))], dtype=np.intp)
                log.lineage[key] = arr
        return log
