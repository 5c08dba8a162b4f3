"""Serialized transformer blocks and the U-Net style network assembly.

Each block is a pre-norm attention block: Norm -> dense Q/K/V projections
-> multi-head attention inside fixed windows of the serialized token order
-> output projection -> residual, then Norm -> feed-forward -> residual.
The output projection is where the expert mixture sits by default; it can
be moved into the feed-forward or removed entirely, in which case the
block degrades to the plain dense transformer block.

A forward pass can carry several scenes at once as one concatenated token
sequence: attention windows and pooling groups never cross scene bounds,
but normalization statistics and expert routing span the whole batch.
That shared-statistics coupling is what makes mixed-dataset batches
behave differently from homogeneous ones.

Pooling shifts curve codes right by 3*log2(factor) bits and merges tokens
that share the truncated prefix (one octree level per factor of two);
unpooling broadcasts coarse features back through the recorded parent map
and fuses them with the skip connection.

Checkpoint format: magic "PMOE1", u32-length-prefixed UTF-8 key=value
config lines, u32 tensor count, then per tensor u32 name length, name,
u32 rank, u32 dims and little-endian float64 data, in declaration order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, ConsistencyError, FormatError, InputError
from .moe import (ExpertParams, MoEConfig, MoELayerParams, RoutingLog,
                  expert_mlp, init_expert, init_moe_params)
from .serialization import (VoxelGrid, morton_decode, morton_encode, serialize,
                            voxelize, window_partition)
from .syndata import PointCloud
from .tensorcore import Tensor

MAGIC = b"PMOE1"


@dataclass(frozen=True)
class StageConfig:
    num_blocks: int
    dim: int
    window_size: int


@dataclass(frozen=True)
class BlockConfig:
    dim: int
    num_heads: int
    window_size: int
    norm_kind: str
    moe_position: str       # "projection" | "ffn" | "none"
    moe: MoEConfig
    ffn_multiplier: float = 2.0

    def __post_init__(self):
        if self.dim % self.num_heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by {self.num_heads} heads")
        if self.moe_position not in ("projection", "ffn", "none"):
            raise ConfigError(f"bad moe_position {self.moe_position!r}")
        if self.norm_kind not in ("batch", "layer", "rms"):
            raise ConfigError(f"bad norm_kind {self.norm_kind!r}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads


@dataclass(frozen=True)
class NetworkConfig:
    encoder: tuple[StageConfig, ...] = (StageConfig(2, 32, 16), StageConfig(2, 64, 16))
    decoder: tuple[StageConfig, ...] = (StageConfig(2, 64, 16), StageConfig(2, 32, 16))
    pool_factor: int = 2
    embed_dim: int = 32
    head_embed_dim: int = 32
    num_heads: int = 4
    norm_kind: str = "batch"
    activation: str = "relu"
    moe_position: str = "projection"
    moe: MoEConfig = MoEConfig()
    ffn_multiplier: float = 2.0
    feat_dim: int = 3
    bits_per_axis: int = 16
    head_scale: float = 10.0

    def __post_init__(self):
        if len(self.encoder) != len(self.decoder):
            raise ConfigError("encoder and decoder need the same stage count")
        for enc, dec in zip(self.encoder, reversed(self.decoder)):
            if enc.dim != dec.dim:
                raise ConfigError(f"decoder dims must mirror encoder dims, "
                                  f"got {enc.dim} vs {dec.dim}")
        if self.encoder[0].dim != self.embed_dim:
            raise ConfigError("first encoder stage dim must equal embed_dim")
        if self.pool_factor < 2 or self.pool_factor & (self.pool_factor - 1):
            raise ConfigError(f"pool_factor must be a power of two >= 2, "
                              f"got {self.pool_factor}")
        for st in self.encoder + self.decoder:
            if st.dim % self.num_heads != 0:
                raise ConfigError(f"stage dim {st.dim} not divisible by heads")

    def block_cfg(self, stage: StageConfig) -> BlockConfig:
        moe = replace(self.moe, activation=self.activation)
        return BlockConfig(dim=stage.dim, num_heads=self.num_heads,
                           window_size=stage.window_size, norm_kind=self.norm_kind,
                           moe_position=self.moe_position, moe=moe,
                           ffn_multiplier=self.ffn_multiplier)


@dataclass
class TokenState:
    """A (possibly multi-scene) serialized token sequence.

    codes are non-decreasing inside each scene span; bounds lists the
    per-scene [start, end) spans of the concatenated sequence.
    """

    features: Tensor
    codes: np.ndarray
    labels: np.ndarray
    bounds: list[tuple[int, int]] | None = None
    tags: list[str | None] | None = None
    point_maps: list[np.ndarray] | None = None   # per scene, embed level only
    parent_map: np.ndarray | None = None         # token -> coarse token (global)

    def __post_init__(self):
        if self.bounds is None:
            self.bounds = [(0, self.features.data.shape[0])]
        if self.tags is None:
            self.tags = [None] * len(self.bounds)

    @property
    def num_tokens(self) -> int:
        return self.features.data.shape[0]

    @property
    def num_scenes(self) -> int:
        return len(self.bounds)

    @property
    def dataset_tag(self) -> str | None:
        return self.tags[0]

    @property
    def point_map(self) -> np.ndarray | None:
        return self.point_maps[0] if self.point_maps else None


# ---------------------------------------------------------------------------
# normalization sites


class NormSite:
    """One normalization site with per-domain parameter tables.

    One domain (the default) is the plain layer; several domains give each
    dataset its own gain/bias pair and, for batch normalization, its own
    running statistics, which is the dataset-conditioned baseline.
    """

    def __init__(self, dim: int, kind: str, num_domains: int = 1):
        self.kind = kind
        self.gains = [tc.tensor(np.ones(dim), requires_grad=True)
                      for _ in range(num_domains)]
        self.biases = [tc.tensor(np.zeros(dim), requires_grad=True)
                       for _ in range(num_domains)]
        self.running_mean = [np.zeros(dim) for _ in range(num_domains)]
        self.running_var = [np.ones(dim) for _ in range(num_domains)]

    def __call__(self, x: Tensor, training: bool, domain: int = 0) -> Tensor:
        return tc.normalize(x, self.kind, self.gains[domain], self.biases[domain],
                            running_mean=self.running_mean[domain],
                            running_var=self.running_var[domain], training=training)

    def tensors(self, prefix: str):
        out = []
        for i, (g, b) in enumerate(zip(self.gains, self.biases)):
            out += [(f"{prefix}.gain{i}", g), (f"{prefix}.bias{i}", b)]
        return out

    def buffers(self, prefix: str):
        out = []
        for i, (m, v) in enumerate(zip(self.running_mean, self.running_var)):
            out += [(f"{prefix}.running_mean{i}", m), (f"{prefix}.running_var{i}", v)]
        return out


# ---------------------------------------------------------------------------
# windowed multi-head attention (one tape node)


def windowed_attention(q: Tensor, k: Tensor, v: Tensor,
                       windows: list[tuple[int, int]], num_heads: int) -> Tensor:
    """Scaled dot-product attention inside each serialization window.

    Windows of equal size are stacked and processed with batched matmuls;
    the whole computation is a single tape node with an analytic backward.
    """
    t, d = q.data.shape
    dh = d // num_heads
    scale = 1.0 / np.sqrt(dh)

    by_size: dict[int, list[int]] = {}
    for s, e in windows:
        by_size.setdefault(e - s, []).append(s)

    out = np.empty((t, d))
    saved = []
    for w, starts in by_size.items():
        idx = np.asarray(starts)[:, None] + np.arange(w)[None, :]   # [nw, w]

        def heads(x):
            return x[idx].reshape(len(starts), w, num_heads, dh).transpose(0, 2, 1, 3)

        qh, kh, vh = heads(q.data), heads(k.data), heads(v.data)
        s_mat = qh @ kh.transpose(0, 1, 3, 2) * scale
        s_mat -= s_mat.max(axis=-1, keepdims=True)
        p = np.exp(s_mat)
        p /= p.sum(axis=-1, keepdims=True)
        og = (p @ vh).transpose(0, 2, 1, 3).reshape(len(starts), w, d)
        out[idx.ravel()] = og.reshape(-1, d)
        saved.append((idx, w, qh, kh, vh, p))

    def bw(g):
        dq = np.empty_like(q.data)
        dk = np.empty_like(k.data)
        dv = np.empty_like(v.data)
        for idx, w, qh, kh, vh, p in saved:
            nw = idx.shape[0]
            doh = g[idx].reshape(nw, w, num_heads, dh).transpose(0, 2, 1, 3)
            dvh = p.transpose(0, 1, 3, 2) @ doh
            dp = doh @ vh.transpose(0, 1, 3, 2)
            ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
            dqh = ds @ kh * scale
            dkh = ds.transpose(0, 1, 3, 2) @ qh * scale

            def unheads(x):
                return x.transpose(0, 2, 1, 3).reshape(nw * w, d)

            rows = idx.ravel()  # windows are disjoint, plain assignment suffices
            dq[rows] = unheads(dqh)
            dk[rows] = unheads(dkh)
            dv[rows] = unheads(dvh)
        return dq, dk, dv

    return tc.make_node(out, (q, k, v), bw)


# ---------------------------------------------------------------------------
# parameter containers


def _linear(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return tc.tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                     requires_grad=True)


class BlockParams:
    def __init__(self, rng, cfg: BlockConfig, num_domains: int, layer_id: int):
        d = cfg.dim
        self.cfg = cfg
        self.layer_id = layer_id
        self.norm1 = NormSite(d, cfg.norm_kind, num_domains)
        self.wq = _linear(rng, d, d)
        self.wk = _linear(rng, d, d)
        self.wv = _linear(rng, d, d)
        if cfg.moe_position == "projection":
            self.proj_moe: MoELayerParams | None = init_moe_params(rng, d, cfg.moe)
            self.wo: Tensor | None = None
        else:
            self.proj_moe = None
            self.wo = _linear(rng, d, d)
        self.norm2 = NormSite(d, cfg.norm_kind, num_domains)
        if cfg.moe_position == "ffn":
            self.ffn_moe: MoELayerParams | None = init_moe_params(rng, d, cfg.moe)
            self.ffn: ExpertParams | None = None
        else:
            self.ffn_moe = None
            self.ffn = init_expert(rng, d, max(1, int(round(cfg.ffn_multiplier * d))))

    def tensors(self, prefix):
        out = self.norm1.tensors(f"{prefix}.norm1")
        out += [(f"{prefix}.wq", self.wq), (f"{prefix}.wk", self.wk),
                (f"{prefix}.wv", self.wv)]
        if self.proj_moe is not None:
            out += self.proj_moe.tensors(f"{prefix}.proj_moe")
        else:
            out.append((f"{prefix}.wo", self.wo))
        out += self.norm2.tensors(f"{prefix}.norm2")
        if self.ffn_moe is not None:
            out += self.ffn_moe.tensors(f"{prefix}.ffn_moe")
        else:
            out += self.ffn.tensors(f"{prefix}.ffn")
        return out

    def buffers(self, prefix):
        return self.norm1.buffers(f"{prefix}.norm1") + self.norm2.buffers(f"{prefix}.norm2")


class PoolParams:
    def __init__(self, rng, d_in, d_out, norm_kind, num_domains):
        self.w = _linear(rng, d_in, d_out)
        self.norm = NormSite(d_out, norm_kind, num_domains)

    def tensors(self, prefix):
        return [(f"{prefix}.w", self.w)] + self.norm.tensors(f"{prefix}.norm")

    def buffers(self, prefix):
        return self.norm.buffers(f"{prefix}.norm")


class UnpoolParams:
    def __init__(self, rng, d_coarse, d_skip, d_out, norm_kind, num_domains):
        self.w_coarse = _linear(rng, d_coarse, d_out)
        self.w_skip = _linear(rng, d_skip, d_out)
        self.norm = NormSite(d_out, norm_kind, num_domains)

    def tensors(self, prefix):
        return [(f"{prefix}.w_coarse", self.w_coarse),
                (f"{prefix}.w_skip", self.w_skip)] + self.norm.tensors(f"{prefix}.norm")

    def buffers(self, prefix):
        return self.norm.buffers(f"{prefix}.norm")


class PointMoEModel:
    """All parameters of one network, in fixed declaration order."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0,
                 norm_domains: tuple[str, ...] = ("default",)):
        self.cfg = cfg
        self.seed = seed
        self.norm_domains = tuple(norm_domains)
        nd = len(self.norm_domains)
        rng = np.random.default_rng([seed, 0x90DE1])

        self.embed_w = _linear(rng, cfg.feat_dim + 3, cfg.embed_dim)
        self.embed_norm = NormSite(cfg.embed_dim, cfg.norm_kind, nd)

        layer_id = 0
        self.enc_stages: list[list[BlockParams]] = []
        self.pools: list[PoolParams] = []
        self._layer_stage: list[tuple[int, str]] = []
        for i, st in enumerate(cfg.encoder):
            blocks = []
            for _ in range(st.num_blocks):
                blocks.append(BlockParams(rng, cfg.block_cfg(st), nd, layer_id))
                self._layer_stage.append((layer_id, "encoder"))
                layer_id += 1
            self.enc_stages.append(blocks)
            if i + 1 < len(cfg.encoder):
                self.pools.append(PoolParams(rng, st.dim, cfg.encoder[i + 1].dim,
                                             cfg.norm_kind, nd))
        self.dec_stages: list[list[BlockParams]] = []
        self.unpools: list[UnpoolParams] = []
        for j, st in enumerate(cfg.decoder):
            blocks = []
            for _ in range(st.num_blocks):
                blocks.append(BlockParams(rng, cfg.block_cfg(st), nd, layer_id))
                self._layer_stage.append((layer_id, "decoder"))
                layer_id += 1
            self.dec_stages.append(blocks)
            if j + 1 < len(cfg.decoder):
                skip_dim = cfg.encoder[len(cfg.encoder) - 2 - j].dim
                self.unpools.append(UnpoolParams(rng, st.dim, skip_dim,
                                                 cfg.decoder[j + 1].dim,
                                                 cfg.norm_kind, nd))
        self.head_w = _linear(rng, cfg.decoder[-1].dim, cfg.head_embed_dim)

    # -- parameter enumeration ---------------------------------------------

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = [("embed.w", self.embed_w)] + self.embed_norm.tensors("embed.norm")
        for i, blocks in enumerate(self.enc_stages):
            for b, blk in enumerate(blocks):
                out += blk.tensors(f"enc{i}.block{b}")
            if i < len(self.pools):
                out += self.pools[i].tensors(f"pool{i}")
        for j, blocks in enumerate(self.dec_stages):
            for b, blk in enumerate(blocks):
                out += blk.tensors(f"dec{j}.block{b}")
            if j < len(self.unpools):
                out += self.unpools[j].tensors(f"unpool{j}")
        out.append(("head.w", self.head_w))
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = self.embed_norm.buffers("embed.norm")
        for i, blocks in enumerate(self.enc_stages):
            for b, blk in enumerate(blocks):
                out += blk.buffers(f"enc{i}.block{b}")
            if i < len(self.pools):
                out += self.pools[i].buffers(f"pool{i}")
        for j, blocks in enumerate(self.dec_stages):
            for b, blk in enumerate(blocks):
                out += blk.buffers(f"dec{j}.block{b}")
            if j < len(self.unpools):
                out += self.unpools[j].buffers(f"unpool{j}")
        return out

    def moe_layers(self) -> list[tuple[int, str]]:
        """(layer_id, encoder|decoder) for every block that hosts an MoE."""
        if self.cfg.moe_position == "none":
            return []
        return list(self._layer_stage)

    def num_params(self) -> int:
        return sum(t.data.size for _, t in self.named_params())

    def domain_index(self, tag: str | None) -> int:
        if len(self.norm_domains) == 1:
            return 0
        if tag is None or tag not in self.norm_domains:
            raise ConfigError(f"dataset tag {tag!r} unknown to conditioned "
                              f"normalization domains {self.norm_domains}")
        return self.norm_domains.index(tag)


# ---------------------------------------------------------------------------
# label pooling helper


def majority_vote(group_ids: np.ndarray, labels: np.ndarray, n_groups: int) -> np.ndarray:
    """Per-group majority label; ties pick the smaller class id; -1 ignored."""
    out = np.full(n_groups, -1, dtype=np.int64)
    valid = labels >= 0
    if not np.any(valid):
        return out
    g = group_ids[valid].astype(np.int64)
    l = labels[valid].astype(np.int64)
    c = int(l.max()) + 1
    pairs, counts = np.unique(g * c + l, return_counts=True)
    best = np.zeros(n_groups, dtype=np.int64)
    for pair, count in zip(pairs, counts):   # ascending pair = (group, label)
        grp, lab = divmod(int(pair), c)
        if count > best[grp]:                # strict: first (smaller) label wins ties
            best[grp] = count
            out[grp] = lab
    return out


# ---------------------------------------------------------------------------
# embed / pool / unpool / block


def _scene_windows(bounds, window_size) -> list[tuple[int, int]]:
    out = []
    for s, e in bounds:
        out += [(s + a, s + b) for a, b in window_partition(e - s, window_size)]
    return out


def _voxel_tokens(points: PointCloud, cell_size: float, bits_per_axis: int):
    """Serialize one scene: mean in-voxel features, normalized centres,
    voted labels, point->token map and sorted curve codes."""
    if points.num_points < 1:
        raise InputError("cannot embed an empty point cloud")
    grid = VoxelGrid(origin=tuple(points.coords.min(axis=0)), cell_size=cell_size,
                     bits_per_axis=bits_per_axis)
    voxels, _ = voxelize(points.coords, grid)
    codes = morton_encode(voxels, bits_per_axis)
    order = serialize(codes)

    sorted_codes = order.sorted_codes
    boundary = np.ones(len(sorted_codes), dtype=bool)
    boundary[1:] = sorted_codes[1:] != sorted_codes[:-1]
    group_starts = np.nonzero(boundary)[0]
    n_tokens = len(group_starts)
    group_of_sorted = np.cumsum(boundary) - 1
    point_map = np.empty(points.num_points, dtype=np.intp)
    point_map[order.perm] = group_of_sorted

    counts = np.bincount(group_of_sorted, minlength=n_tokens)
    mean_feats = np.add.reduceat(points.feats[order.perm], group_starts, axis=0)
    mean_feats /= counts[:, None]

    token_codes = sorted_codes[group_starts]
    centers = (morton_decode(token_codes, bits_per_axis) + 0.5) * cell_size \
        + np.asarray(grid.origin)
    lo, hi = centers.min(axis=0), centers.max(axis=0)
    span = np.where(hi - lo > 1e-12, hi - lo, 1.0)
    norm_centers = np.where(hi - lo > 1e-12, (centers - lo) / span, 0.5)

    labels = majority_vote(point_map, points.labels, n_tokens)
    token_input = np.concatenate([mean_feats, norm_centers], axis=1)
    return token_input, token_codes, labels, point_map


def embed_batch(clouds: list[PointCloud], cell_sizes: list[float],
                model: PointMoEModel, training: bool = False,
                domain: int = 0) -> TokenState:
    """Voxel-pool scenes into one concatenated, serialized token sequence.

    One token per occupied voxel. Token input is the mean of in-voxel
    point features concatenated with the voxel centre normalized to the
    scene bounding box, then Linear -> Norm -> activation; normalization
    statistics span the whole batch.
    """
    cfg = model.cfg
    inputs, codes, labels, point_maps, bounds, tags = [], [], [], [], [], []
    at = 0
    for cloud, cell in zip(clouds, cell_sizes):
        ti, tc_codes, lab, pmap = _voxel_tokens(cloud, cell, cfg.bits_per_axis)
        inputs.append(ti)
        codes.append(tc_codes)
        labels.append(lab)
        point_maps.append(pmap)
        bounds.append((at, at + len(tc_codes)))
        tags.append(cloud.dataset_tag)
        at += len(tc_codes)

    token_input = tc.tensor(np.concatenate(inputs, axis=0))
    feats = tc.matmul(token_input, model.embed_w)
    feats = model.embed_norm(feats, training, domain)
    feats = tc.activation(feats, cfg.activation)
    return TokenState(features=feats, codes=np.concatenate(codes),
                      labels=np.concatenate(labels), bounds=bounds, tags=tags,
                      point_maps=point_maps)


def embed(points: PointCloud, cell_size: float, model: PointMoEModel,
          training: bool = False, domain: int = 0) -> TokenState:
    return embed_batch([points], [cell_size], model, training, domain)


def _moe_with_records(x, params, cfg, state: TokenState, sink, step_base,
                      layer_id, aux_sink):
    from .moe import moe_forward
    slices = [(s, e, tag) for (s, e), tag in zip(state.bounds, state.tags)]
    return moe_forward(x, params, cfg, record_sink=sink, layer_id=layer_id,
                       step=step_base, router_probs_out=aux_sink,
                       record_slices=slices)


def attention_block(state: TokenState, params: BlockParams, training: bool = False,
                    domain: int = 0, sink: RoutingLog | None = None, step: int = 0,
                    aux_sink: list | None = None) -> TokenState:
    cfg = params.cfg
    x = state.features
    if x.data.shape[1] != cfg.dim:
        raise ConfigError(f"block dim {cfg.dim} but features are {x.data.shape}")
    windows = _scene_windows(state.bounds, cfg.window_size)

    h = params.norm1(x, training, domain)
    q = tc.matmul(h, params.wq)
    k = tc.matmul(h, params.wk)
    v = tc.matmul(h, params.wv)
    a = windowed_attention(q, k, v, windows, cfg.num_heads)
    if cfg.moe_position == "projection":
        o = _moe_with_records(a, params.proj_moe, cfg.moe, state, sink, step,
                              params.layer_id, aux_sink)
    else:
        o = tc.matmul(a, params.wo)
    x1 = tc.add(x, o)

    h2 = params.norm2(x1, training, domain)
    if cfg.moe_position == "ffn":
        f = _moe_with_records(h2, params.ffn_moe, cfg.moe, state, sink, step,
                              params.layer_id, aux_sink)
    else:
        f = expert_mlp(h2, params.ffn, cfg.moe.activation)
    x2 = tc.add(x1, f)
    return replace(state, features=x2)


def pool(state: TokenState, params: PoolParams, factor: int,
         training: bool = False, domain: int = 0) -> TokenState:
    """Merge tokens sharing a truncated curve-code prefix (never across
    scenes); record the fine->coarse lineage on the input state."""
    shift = 3 * int(np.log2(factor))
    coarse_all = state.codes >> np.uint64(shift)
    boundary = np.ones(state.num_tokens, dtype=bool)
    boundary[1:] = coarse_all[1:] != coarse_all[:-1]
    for s, _ in state.bounds:
        boundary[s] = True                      # groups never span scenes
    parent_map = np.cumsum(boundary) - 1
    n_coarse = int(parent_map[-1]) + 1

    counts = np.bincount(parent_map, minlength=n_coarse).astype(np.float64)
    summed = tc.scatter_add_rows(state.features, parent_map, n_coarse, grouped=True)
    inv = np.repeat((1.0 / counts)[:, None], state.features.data.shape[1], axis=1)
    mean = tc.mul(summed, tc.tensor(inv))
    out = params.norm(tc.matmul(mean, params.w), training, domain)

    coarse_bounds = [(int(parent_map[s]), int(parent_map[e - 1]) + 1)
                     for s, e in state.bounds]
    state.parent_map = parent_map
    return TokenState(features=out, codes=coarse_all[boundary],
                      labels=majority_vote(parent_map, state.labels, n_coarse),
                      bounds=coarse_bounds, tags=list(state.tags))


def unpool(coarse: TokenState, skip: TokenState, params: UnpoolParams,
           activation: str, training: bool = False, domain: int = 0) -> TokenState:
    """Fuse each fine token's coarse parent feature with its skip feature."""
    if skip.parent_map is None:
        raise ConsistencyError("skip state has no parent_map; pool it first")
    pm = skip.parent_map
    if pm.shape[0] != skip.num_tokens or pm.min() < 0 or pm.max() >= coarse.num_tokens:
        raise ConsistencyError("parent_map does not target the coarse tokens")
    up = tc.matmul(tc.gather_rows(coarse.features, pm), params.w_coarse)
    lateral = tc.matmul(skip.features, params.w_skip)
    out = tc.activation(params.norm(tc.add(up, lateral), training, domain), activation)
    return replace(skip, features=out, parent_map=None)


# ---------------------------------------------------------------------------
# full network


@dataclass
class NetworkOutput:
    features: Tensor                     # this scene's [tokens, head_embed_dim]
    token_labels: np.ndarray
    point_map: np.ndarray
    codes: np.ndarray
    dataset_tag: str | None = None
    captured: dict[str, np.ndarray] = field(default_factory=dict)


def network_forward_batch(clouds: list[PointCloud], model: PointMoEModel,
                          cell_sizes: list[float], training: bool = False,
                          sink: RoutingLog | None = None, step: int = 0,
                          domain: int = 0, aux_sink: list | None = None,
                          capture: tuple[str, ...] = ()) -> list[NetworkOutput]:
    """Embed -> encoder stages with pooling -> decoder stages with
    unpooling -> linear head, over one jointly normalized batch.

    Returns one output per scene; token count in equals token count out.
    Routing-record steps are step + scene index.
    """
    cfg = model.cfg
    state = embed_batch(clouds, cell_sizes, model, training, domain)
    n0 = state.num_tokens
    embed_bounds = list(state.bounds)
    lineage = np.arange(n0)
    captured: dict[str, np.ndarray] = {}

    def record_lineage(layer_id, st: TokenState):
        if sink is None:
            return
        for scene, (s0, e0) in enumerate(embed_bounds):
            ls, _ = st.bounds[scene]
            sink.set_lineage(step + scene, layer_id, lineage[s0:e0] - ls)

    skips: list[TokenState] = []
    maps: list[np.ndarray] = []
    for i, blocks in enumerate(model.enc_stages):
        for blk in blocks:
            record_lineage(blk.layer_id, state)
            state = attention_block(state, blk, training, domain, sink, step, aux_sink)
        skips.append(state)
        maps.append(lineage)
        if i < len(model.pools):
            state = pool(state, model.pools[i], cfg.pool_factor, training, domain)
            lineage = skips[-1].parent_map[lineage]
    if "encoder_out" in capture:
        captured["encoder_out"] = state.features.data.copy()
        captured["encoder_out_bounds"] = np.asarray(state.bounds)

    for j, blocks in enumerate(model.dec_stages):
        for blk in blocks:
            record_lineage(blk.layer_id, state)
            state = attention_block(state, blk, training, domain, sink, step, aux_sink)
        if j < len(model.unpools):
            skip = skips[len(model.enc_stages) - 2 - j]
            state = unpool(state, skip, model.unpools[j], cfg.activation,
                           training, domain)
            lineage = maps[len(model.enc_stages) - 2 - j]
    if "decoder_out" in capture:
        captured["decoder_out"] = state.features.data.copy()
        captured["decoder_out_bounds"] = np.asarray(state.bounds)

    if state.num_tokens != n0:
        raise ConsistencyError(f"token count changed: {n0} in, {state.num_tokens} out")
    out = tc.matmul(state.features, model.head_w)
    embed_state = skips[0]

    outputs = []
    for scene, (s, e) in enumerate(embed_bounds):
        feats = out if len(embed_bounds) == 1 else \
            tc.gather_rows(out, np.arange(s, e), unique=True)
        outputs.append(NetworkOutput(
            features=feats,
            token_labels=embed_state.labels[s:e],
            point_map=embed_state.point_maps[scene],
            codes=embed_state.codes[s:e],
            dataset_tag=embed_state.tags[scene],
            captured=captured if scene == 0 else {}))
    return outputs


def network_forward(points: PointCloud, model: PointMoEModel, cell_size: float,
                    training: bool = False, sink: RoutingLog | None = None,
                    step: int = 0, domain: int = 0, aux_sink: list | None = None,
                    capture: tuple[str, ...] = ()) -> NetworkOutput:
    return network_forward_batch([points], model, [cell_size], training=training,
                                 sink=sink, step=step, domain=domain,
                                 aux_sink=aux_sink, capture=capture)[0]


# ---------------------------------------------------------------------------
# checkpoints


def _config_lines(model: PointMoEModel, extra: dict | None = None) -> list[str]:
    cfg = model.cfg

    def stages(sts):
        return ",".join(f"{s.num_blocks}x{s.dim}w{s.window_size}" for s in sts)

    kv = {
        "encoder": stages(cfg.encoder),
        "decoder": stages(cfg.decoder),
        "pool_factor": cfg.pool_factor,
        "embed_dim": cfg.embed_dim,
        "head_embed_dim": cfg.head_embed_dim,
        "num_heads": cfg.num_heads,
        "norm_kind": cfg.norm_kind,
        "activation": cfg.activation,
        "moe_position": cfg.moe_position,
        "ffn_multiplier": cfg.ffn_multiplier,
        "feat_dim": cfg.feat_dim,
        "bits_per_axis": cfg.bits_per_axis,
        "head_scale": cfg.head_scale,
        "moe.num_experts": cfg.moe.num_experts,
        "moe.top_k": cfg.moe.top_k,
        "moe.expert_hidden_multiplier": cfg.moe.expert_hidden_multiplier,
        "moe.num_shared_experts": cfg.moe.num_shared_experts,
        "moe.aux_loss_alpha": cfg.moe.aux_loss_alpha,
        "moe.gate_mode": cfg.moe.gate_mode,
        "seed": model.seed,
        "norm_domains": "|".join(model.norm_domains),
    }
    if extra:
        kv.update(extra)
    return [f"{k}={v}" for k, v in kv.items()]


def _parse_stages(text: str) -> tuple[StageConfig, ...]:
    out = []
    for part in text.split(","):
        nb, rest = part.split("x")
        dim, win = rest.split("w")
        out.append(StageConfig(int(nb), int(dim), int(win)))
    return tuple(out)


def config_from_lines(lines: list[str]) -> tuple[NetworkConfig, int, tuple[str, ...], dict]:
    kv: dict[str, str] = {}
    for ln in lines:
        if ln.strip():
            key, _, val = ln.partition("=")
            kv[key] = val
    moe = MoEConfig(num_experts=int(kv["moe.num_experts"]), top_k=int(kv["moe.top_k"]),
                    expert_hidden_multiplier=float(kv["moe.expert_hidden_multiplier"]),
                    num_shared_experts=int(kv["moe.num_shared_experts"]),
                    activation=kv["activation"],
                    aux_loss_alpha=float(kv["moe.aux_loss_alpha"]),
                    gate_mode=kv["moe.gate_mode"])
    cfg = NetworkConfig(encoder=_parse_stages(kv["encoder"]),
                        decoder=_parse_stages(kv["decoder"]),
                        pool_factor=int(kv["pool_factor"]),
                        embed_dim=int(kv["embed_dim"]),
                        head_embed_dim=int(kv["head_embed_dim"]),
                        num_heads=int(kv["num_heads"]), norm_kind=kv["norm_kind"],
                        activation=kv["activation"], moe_position=kv["moe_position"],
                        moe=moe, ffn_multiplier=float(kv["ffn_multiplier"]),
                        feat_dim=int(kv["feat_dim"]),
                        bits_per_axis=int(kv["bits_per_axis"]),
                        head_scale=float(kv["head_scale"]))
    domains = tuple(kv["norm_domains"].split("|"))
    known = {"encoder", "decoder", "pool_factor", "embed_dim", "head_embed_dim",
             "num_heads", "norm_kind", "activation", "moe_position", "ffn_multiplier",
             "feat_dim", "bits_per_axis", "head_scale", "seed", "norm_domains"}
    extra = {k: v for k, v in kv.items()
             if k not in known and not k.startswith("moe.")}
    return cfg, int(kv["seed"]), domains, extra


def save_checkpoint(model: PointMoEModel, path, extra: dict | None = None) -> None:
    blob = ("\n".join(_config_lines(model, extra)) + "\n").encode("utf-8")
    items = [(name, t.data) for name, t in model.named_params()]
    items += model.named_buffers()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[PointMoEModel, dict]:
    with open(path, "rb") as fh:
        if fh.read(5) != MAGIC:
            raise FormatError(f"{path} is not a model checkpoint (bad magic)")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        lines = fh.read(blob_len).decode("utf-8").splitlines()
        cfg, seed, domains, extra = config_from_lines(lines)
        model = PointMoEModel(cfg, seed=seed, norm_domains=domains)
        lookup = {name: t for name, t in model.named_params()}
        buffers = dict(model.named_buffers())
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(dims)
            if name in lookup:
                if lookup[name].data.shape != arr.shape:
                    raise FormatError(f"tensor {name} has shape {arr.shape}, "
                                      f"expected {lookup[name].data.shape}")
                lookup[name].data[...] = arr
            elif name in buffers:
                buffers[name][...] = arr
            else:
                raise FormatError(f"checkpoint tensor {name!r} unknown to this config")
    return model, extra
