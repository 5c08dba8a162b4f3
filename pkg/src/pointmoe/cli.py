"""Command-line entry point.

Subcommands: gen-data (write scene dumps and the class-embedding table),
train (fit a variant and write checkpoint + metrics log), eval (score a
checkpoint per dataset, optionally dumping a routing log), analyze (turn
a routing log into divergence / pathway / co-occurrence reports), and
selfcheck (fast oracle and gradient battery).

Exit codes: 0 success, 1 configuration or input validation failure,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import analytics
from . import tensorcore as tc
from .blocks import load_checkpoint, save_checkpoint
from .config import KEYS, RunConfig, help_table
from .errors import ConfigError, FormatError, InputError, PlanError
from .langhead import default_table, load_embeddings, save_embeddings
from .moe import RoutingLog
from .syndata import Registry, save_scene
from .trainer import (evaluate, frequency_prior_miou, train,
                      train_dataset_classifier)

VALIDATION_ERRORS = (ConfigError, FormatError, InputError, PlanError,
                     FileNotFoundError)


def _load_config(args) -> RunConfig:
    return RunConfig.from_sources(getattr(args, "config", None),
                                  getattr(args, "override", None))


def _registry(cfg: RunConfig) -> Registry:
    return Registry(cfg.dataset_specs())


def _table(cfg: RunConfig):
    if cfg["head.embeddings_path"]:
        return load_embeddings(cfg["head.embeddings_path"])
    return default_table(dim=cfg["model.head_embed_dim"],
                         seed=cfg["train.table_seed"])


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    registry = _registry(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_embeddings(_table(cfg), out / "embeddings.txt")
    written = 0
    for name in registry.names:
        ddir = out / "scenes" / name
        ddir.mkdir(parents=True, exist_ok=True)
        for seed in range(registry.specs[name].num_scenes):
            save_scene(registry.scene(name, seed), ddir / f"scene_{seed:03d}.txt")
            written += 1
    print(f"wrote {written} scenes and embeddings.txt under {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    registry = _registry(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    result = train(cfg["train.variant"], cfg.batch_plan(), registry,
                   cfg.train_config(), model_cfg=cfg.network_config(),
                   table=_table(cfg), out_dir=str(out))
    wall = time.monotonic() - t0
    print(f"trained {cfg['train.variant']} for {cfg['train.total_steps']} steps "
          f"in {wall:.1f}s -> {out / 'model.ckpt'}")
    for name, metrics in result.per_dataset.items():
        print(f"  val mIoU {name}: {metrics.miou:.4f} "
              f"(overall acc {metrics.overall_acc:.4f})")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    registry = _registry(cfg)
    model, _ = load_checkpoint(args.checkpoint)
    table = _table(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    datasets = args.datasets.split(",") if args.datasets else registry.names
    classifier = None
    if len(model.norm_domains) > 1:
        classifier = train_dataset_classifier(registry, names=model.norm_domains)

    sink = RoutingLog() if args.routing_log else None
    predictions: dict[int, np.ndarray] = {}
    step_base = 0
    results = []
    for name in datasets:
        preds_here: dict[int, np.ndarray] = {} if sink is not None else None
        metrics = evaluate(model, registry, name, table, split=cfg["eval.split"],
                           classifier=classifier, sink=sink, step_base=step_base,
                           predictions_out=preds_here)
        if preds_here:
            predictions.update(preds_here)
            step_base += len(preds_here)
        results.append({"dataset": name, "miou": metrics.miou,
                        "overall_acc": metrics.overall_acc,
                        "per_class_iou": metrics.per_class_iou,
                        "prior_miou": frequency_prior_miou(registry, name,
                                                           cfg["eval.split"])})
        print(f"val mIoU {name}: {metrics.miou:.4f}")
    with open(out / "eval.jsonl", "w") as fh:
        for rec in results:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    if sink is not None:
        sink.write_csv(out / "routing.csv")
        sink.write_lineage_csv(out / "lineage.csv")
        with open(out / "predictions.csv", "w") as fh:
            fh.write("step,token_index,class_id\n")
            for step in sorted(predictions):
                for tok, cid in enumerate(predictions[step]):
                    fh.write(f"{step},{tok},{int(cid)}\n")
        print(f"routing log: {out / 'routing.csv'}")
    return 0


def _read_predictions_csv(path) -> dict[int, np.ndarray]:
    rows: dict[int, dict[int, int]] = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "step,token_index,class_id":
            raise FormatError(f"bad predictions header {header!r}")
        for ln in fh:
            step, tok, cid = ln.split(",")
            rows.setdefault(int(step), {})[int(tok)] = int(cid)
    return {step: np.array([d[i] for i in range(len(d))])
            for step, d in rows.items()}


def cmd_analyze(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = RoutingLog.read_csv(args.routing_log, args.lineage)
    layer_stages = []
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        layer_stages = model.moe_layers()
    dists = analytics.collect_distributions(log)
    analytics.write_jsd_csv(layer_stages, dists, out / "jsd.csv")
    if args.lineage:
        table = analytics.pathways(log, top_m=args.top_m)
        analytics.write_pathways_csv(table, out / "pathways.csv")
    if args.predictions:
        preds = _read_predictions_csv(args.predictions)
        mats = analytics.expert_class_matrix(log, preds)
        names = [f"class{i}" for i in range(next(iter(mats.values())).shape[1])]
        analytics.write_cooccurrence_csv(mats, names, out / "cooccurrence.csv")
    for lid in sorted(dists):
        print(f"layer {lid}: JSD {analytics.jsd(dists[lid]):.4f} nats")
    return 0


def cmd_selfcheck(args) -> int:
    failures = 0

    def check(name, fn):
        nonlocal failures
        try:
            fn()
            print(f"ok   {name}")
        except Exception as e:
            failures += 1
            print(f"FAIL {name}: {e}")

    def matmul_oracle():
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        ref = np.array([[sum(a[i, l] * b[l, j] for l in range(4))
                         for j in range(2)] for i in range(3)])
        assert np.allclose(tc.matmul(tc.tensor(a), tc.tensor(b)).data, ref)

    def softmax_props():
        x = np.random.default_rng(1).normal(size=(6, 5)) * 30
        p = tc.softmax(tc.tensor(x), axis=1).data
        assert np.max(np.abs(p.sum(axis=1) - 1)) < 1e-12
        q = tc.softmax(tc.tensor(x + 500.0), axis=1).data
        assert np.max(np.abs(p - q)) < 1e-10

    def gradcheck_moe_block():
        from .moe import MoEConfig, init_moe_params, moe_forward
        rng = np.random.default_rng(2)
        cfgm = MoEConfig(num_experts=3, top_k=2)
        params = init_moe_params(rng, 6, cfgm)
        x = tc.tensor(rng.normal(size=(8, 6)))
        mask = tc.tensor(rng.normal(size=(8, 6)))
        report = tc.check_gradients(
            lambda: tc.sum_all(tc.mul(moe_forward(x, params, cfgm), mask)),
            params.tensors("moe"))
        assert report.passed, str(report)

    def morton_checks():
        from .serialization import morton_encode
        grid = np.stack(np.meshgrid(*([np.arange(8)] * 3), indexing="ij"),
                        axis=-1).reshape(-1, 3)
        codes = morton_encode(grid, 3)
        assert len(set(codes.tolist())) == 512
        assert morton_encode(np.array([[3, 1, 2]]), 4)[0] == 43

    def moe_dense_equivalence():
        from .moe import MoEConfig, init_moe_params, moe_forward
        rng = np.random.default_rng(3)
        cfgm = MoEConfig(num_experts=4, top_k=4)
        params = init_moe_params(rng, 8, cfgm)
        x = rng.normal(size=(10, 8))
        out = moe_forward(tc.tensor(x), params, cfgm).data
        logits = x @ params.router.data
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs = e / e.sum(axis=1, keepdims=True)
        ref = np.zeros_like(x)
        for i, p in enumerate(params.experts):
            h = np.maximum(x @ p.w1.data + p.b1.data, 0)
            ref += probs[:, i:i + 1] * (h @ p.w2.data + p.b2.data)
        assert np.max(np.abs(out - ref)) < 1e-12

    def param_accounting():
        from .moe import MoEConfig, count_params
        total, act = count_params(MoEConfig(num_experts=4, top_k=2), 32)
        assert (total, act) == (8576, 4352)

    def jsd_cases():
        from .analytics import ExpertDistribution, entropy, jsd
        same = ExpertDistribution(0, ("a", "b"), np.array([[0.3, 0.7]] * 2),
                                  np.array([0.5, 0.5]))
        assert abs(jsd(same)) < 1e-15
        disjoint = ExpertDistribution(0, ("a", "b"), np.eye(2),
                                      np.array([0.5, 0.5]))
        assert abs(jsd(disjoint) - np.log(2)) < 1e-12
        mixed = ExpertDistribution(0, ("a", "b"),
                                   np.array([[0.5, 0.5], [1.0, 0.0]]),
                                   np.array([0.5, 0.5]))
        assert abs(jsd(mixed) - 0.2158) < 1e-4

    def cross_entropy_case():
        from .langhead import masked_cross_entropy
        loss = masked_cross_entropy(tc.tensor([[0.0] * 4]), np.array([2]))
        assert abs(loss.item() - np.log(4)) < 1e-12

    def attention_oracle():
        from .blocks import windowed_attention
        from .serialization import window_partition
        rng = np.random.default_rng(4)
        t, d, heads = 9, 8, 2
        windows = window_partition(t, 4)
        q, k, v = (rng.normal(size=(t, d)) for _ in range(3))
        out = windowed_attention(tc.tensor(q), tc.tensor(k), tc.tensor(v),
                                 windows, heads).data
        dh = d // heads
        ref = np.zeros((t, d))
        for h in range(heads):
            qh, kh, vh = (x[:, h * dh:(h + 1) * dh] for x in (q, k, v))
            for s, e in windows:
                logits = qh[s:e] @ kh[s:e].T / np.sqrt(dh)
                p = np.exp(logits - logits.max(axis=1, keepdims=True))
                p /= p.sum(axis=1, keepdims=True)
                ref[s:e, h * dh:(h + 1) * dh] = p @ vh[s:e]
        assert np.max(np.abs(out - ref)) < 1e-10

    check("matmul vs triple-loop oracle", matmul_oracle)
    check("softmax normalization and shift invariance", softmax_props)
    check("expert-mixture gradient vs finite differences", gradcheck_moe_block)
    check("curve-code injectivity and worked value", morton_checks)
    check("top-k=N equals dense mixture", moe_dense_equivalence)
    check("parameter accounting worked example", param_accounting)
    check("divergence reference cases", jsd_cases)
    check("masked cross-entropy uniform case", cross_entropy_case)
    check("windowed attention vs dense masked oracle", attention_oracle)
    if failures:
        print(f"{failures} checks failed")
        return 2
    print("all checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointmoe",
        description=__doc__,
        epilog=help_table(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("gen-data", help="write scene dumps and embeddings")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a variant")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--datasets", help="comma names (default: all in registry)")
    p.add_argument("--routing-log", action="store_true",
                   help="dump routing.csv, lineage.csv and predictions.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="reports from a routing log")
    p.add_argument("--routing-log", required=True)
    p.add_argument("--lineage", help="lineage csv (enables pathway report)")
    p.add_argument("--predictions", help="predictions csv (enables co-occurrence)")
    p.add_argument("--checkpoint", help="used to label encoder/decoder stages")
    p.add_argument("--top-m", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("selfcheck", help="fast oracle and gradient battery")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
