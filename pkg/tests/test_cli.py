import json
import os

import numpy as np
import pytest

from pointmoe import cli
from pointmoe.config import KEYS, RunConfig, help_table


TINY_CFG = """\
# tiny end-to-end configuration for CLI tests
model.encoder=1x8w8,1x16w8
model.decoder=1x16w8,1x8w8
model.embed_dim=8
model.head_embed_dim=8
model.num_heads=2
moe.num_experts=2
moe.top_k=2
train.total_steps=10
data.num_scenes=12
data.heldout_scenes=5
data.indoor.points_min=400
data.indoor.points_max=700
data.indoor.cell_size=0.6
data.outdoor.points_min=400
data.outdoor.points_max=700
data.outdoor.cell_size=1.5
aug.jitter_sigma=0.0
"""


@pytest.fixture()
def tiny_cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG)
    return str(path)


class TestRunConfig:
    def test_defaults_parse(self):
        cfg = RunConfig.from_sources()
        assert cfg["moe.top_k"] == 2
        assert cfg["model.norm_kind"] == "batch"

    def test_unknown_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("nonsense.key=1\n")
        from pointmoe.errors import ConfigError
        with pytest.raises(ConfigError):
            RunConfig.from_sources(str(bad))

    def test_override_wins_over_file(self, tiny_cfg_file):
        cfg = RunConfig.from_sources(tiny_cfg_file, ["train.total_steps=25"])
        assert cfg["train.total_steps"] == 25

    def test_env_seed_override(self, monkeypatch):
        monkeypatch.setenv("PMOE_SEED", "123")
        assert RunConfig.from_sources()["seed"] == 123

    def test_help_documents_every_key(self):
        text = cli.build_parser().format_help()
        for key in KEYS:
            assert key in text
        for key, (default, _, _) in KEYS.items():
            assert key in help_table()

    def test_ablation_presets_parse(self):
        import glob
        presets = glob.glob("configs/ablations/*.cfg") + ["configs/tiny.cfg",
                                                          "configs/trend.cfg"]
        assert len(presets) >= 20
        for preset in presets:
            RunConfig.from_sources(preset)


class TestCommands:
    def test_selfcheck_passes(self, capsys):
        assert cli.main(["selfcheck"]) == 0
        out = capsys.readouterr().out
        assert "all checks passed" in out
        assert "FAIL" not in out

    def test_gen_data(self, tmp_path, tiny_cfg_file):
        out = tmp_path / "data"
        assert cli.main(["gen-data", "--config", tiny_cfg_file,
                         "--out", str(out)]) == 0
        assert (out / "embeddings.txt").exists()
        scenes = list((out / "scenes").rglob("scene_*.txt"))
        assert len(scenes) == 12 + 12 + 5

    def test_train_eval_analyze_roundtrip(self, tmp_path, tiny_cfg_file):
        run = tmp_path / "run"
        assert cli.main(["train", "--config", tiny_cfg_file,
                         "--out", str(run)]) == 0
        assert (run / "model.ckpt").exists()
        assert (run / "metrics.jsonl").exists()

        ev = tmp_path / "eval"
        assert cli.main(["eval", "--config", tiny_cfg_file,
                         "--checkpoint", str(run / "model.ckpt"),
                         "--out", str(ev), "--routing-log"]) == 0
        recs = [json.loads(l) for l in (ev / "eval.jsonl").read_text().splitlines()]
        names = {r["dataset"] for r in recs}
        assert names == {"roomsim", "ringsim", "roomsim_v2"}
        for f in ("routing.csv", "lineage.csv", "predictions.csv"):
            assert (ev / f).exists()

        an = tmp_path / "analysis"
        assert cli.main(["analyze", "--routing-log", str(ev / "routing.csv"),
                         "--lineage", str(ev / "lineage.csv"),
                         "--predictions", str(ev / "predictions.csv"),
                         "--checkpoint", str(run / "model.ckpt"),
                         "--out", str(an)]) == 0
        assert (an / "jsd.csv").exists()
        assert (an / "pathways.csv").exists()
        assert (an / "cooccurrence.csv").exists()
        header = (an / "jsd.csv").read_text().splitlines()[0]
        assert header == "layer_id,stage,jsd_nats"

    def test_train_is_bit_reproducible(self, tmp_path, tiny_cfg_file):
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["train", "--config", tiny_cfg_file, "--out", str(a)]) == 0
        assert cli.main(["train", "--config", tiny_cfg_file, "--out", str(b)]) == 0
        assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
        assert (a / "metrics.jsonl").read_text() == (b / "metrics.jsonl").read_text()

    def test_single_expert_override_equals_dense_variant(self, tmp_path,
                                                         tiny_cfg_file):
        a, b = tmp_path / "override", tmp_path / "dense"
        assert cli.main(["train", "--config", tiny_cfg_file, "--out", str(a),
                         "--override", "moe.num_experts=1",
                         "--override", "moe.top_k=1"]) == 0
        assert cli.main(["train", "--config", tiny_cfg_file, "--out", str(b),
                         "--override", "train.variant=dense"]) == 0
        assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()

        ev_a, ev_b = tmp_path / "eva", tmp_path / "evb"
        for ckpt, out in ((a, ev_a), (b, ev_b)):
            assert cli.main(["eval", "--config", tiny_cfg_file,
                             "--checkpoint", str(ckpt / "model.ckpt"),
                             "--out", str(out)]) == 0
        assert (ev_a / "eval.jsonl").read_bytes() == (ev_b / "eval.jsonl").read_bytes()

    def test_analyze_constructed_log(self, tmp_path):
        # two datasets, disjoint experts, equal tokens -> JSD = ln 2
        routing = tmp_path / "routing.csv"
        rows = ["step,layer_id,token_index,rank,expert_id,gate,dataset_tag"]
        for tok in range(10):
            rows.append(f"0,0,{tok},0,0,1,alpha")
            rows.append(f"1,0,{tok},0,1,1,beta")
        routing.write_text("\n".join(rows) + "\n")
        out = tmp_path / "analysis"
        assert cli.main(["analyze", "--routing-log", str(routing),
                         "--out", str(out)]) == 0
        body = (out / "jsd.csv").read_text().splitlines()
        lid, stage, val = body[1].split(",")
        assert (int(lid), stage) == (0, "unknown")
        assert abs(float(val) - np.log(2)) < 1e-9

    def test_validation_exit_code(self, tmp_path):
        assert cli.main(["train", "--override", "bogus.key=1",
                         "--out", str(tmp_path / "x")]) == 1
        assert cli.main(["train", "--config", str(tmp_path / "missing.cfg"),
                         "--out", str(tmp_path / "y")]) == 1

    def test_runtime_exit_code(self, tmp_path, tiny_cfg_file):
        # checkpoint path exists but is not a checkpoint -> validation error
        junk = tmp_path / "junk.ckpt"
        junk.write_bytes(b"JUNK!")
        assert cli.main(["eval", "--config", tiny_cfg_file, "--checkpoint",
                         str(junk), "--out", str(tmp_path / "out")]) == 1

    def test_pmoe_seed_changes_training(self, tmp_path, tiny_cfg_file,
                                        monkeypatch):
        a, b = tmp_path / "a", tmp_path / "b"
        assert cli.main(["train", "--config", tiny_cfg_file, "--out", str(a)]) == 0
        monkeypatch.setenv("PMOE_SEED", "99")
        assert cli.main(["train", "--config", tiny_cfg_file, "--out", str(b)]) == 0
        assert (a / "model.ckpt").read_bytes() != (b / "model.ckpt").read_bytes()
