"""CLI pipeline: artifacts, chaining, exit codes, determinism, flag overrides."""

import json
import os
import struct

import numpy as np
import pytest

from ders.checkpoint import load_model
from ders.cli import main
from ders.deltas import LowRankDelta, QuantizedDelta

BASE_CONFIG = {
    "seed": 7,
    "model": {"d": 12, "d_h": 24, "depth": 2},
    "task": {"kind": "modular_classification", "params": {"d": 1, "n_clusters": 8}, "seed": 3},
    "pretrain": {"steps": 250, "lr": 0.01, "eval_every": 125},
    "upcycle": {"n_experts": 4, "topk_count": 2, "method": "vanilla"},
    "train": {"steps": 120, "lr": 0.005, "eval_every": 60},
    "compress": {"technique": "sparsify", "drop_rate": 0.9},
    "sweep": {"drop_rates": [0.5], "bit_widths": [8]},
}


def write_config(tmp_path, overrides=None, name="config.json"):
    cfg = json.loads(json.dumps(BASE_CONFIG))
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    path = str(tmp_path / name)
    with open(path, "w") as fh:
        json.dump(cfg, fh)
    return path


def run(*argv):
    return main(list(argv))


def read_json(out, name):
    with open(os.path.join(out, name)) as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full pretrain -> upcycle -> train -> compress run shared by tests."""
    tmp = tmp_path_factory.mktemp("pipeline")
    cfg = write_config(tmp)
    out = str(tmp / "run")
    for cmd in ("pretrain-dense", "upcycle", "train", "compress"):
        assert run(cmd, "--config", cfg, "--out", out) == 0
    return cfg, out


class TestPipeline:
    def test_all_artifacts_emitted(self, pipeline):
        cfg, out = pipeline
        assert run("eval", "--config", cfg, "--out", out) == 0
        assert run("report-params", "--out", out) == 0
        assert run("analyze-similarity", "--ckpt", os.path.join(out, "trained.ckpt"), "--out", out) == 0
        assert run("sweep", "--config", cfg, "--out", out) == 0
        for name in (
            "dense.ckpt",
            "moe.ckpt",
            "trained.ckpt",
            "compressed.ckpt",
            "metrics.csv",
            "compression_report.json",
            "eval.json",
            "params.json",
            "similarity.csv",
            "sweep.csv",
        ):
            assert os.path.exists(os.path.join(out, name)), name

    def test_metrics_csv_schema(self, pipeline):
        _, out = pipeline
        with open(os.path.join(out, "metrics.csv")) as fh:
            lines = fh.read().splitlines()
        assert lines[0] == "step,loss,aux_loss,eval_metric"
        assert len(lines) == 1 + 120
        first = lines[1].split(",")
        assert first[0] == "1" and float(first[1]) > 0

    def test_eval_json_fields(self, pipeline):
        cfg, out = pipeline
        run("eval", "--config", cfg, "--out", out)
        data = read_json(out, "eval.json")
        assert data["checkpoint"] == "compressed.ckpt"
        assert data["task_kind"] == "modular_classification"
        assert 0.0 <= data["eval_metric"] <= 100.0

    def test_compression_report_totals(self, pipeline):
        _, out = pipeline
        report = read_json(out, "compression_report.json")
        assert report["technique"] == "sparsify"
        totals = report["totals"]
        assert totals["stored_values_after"] < totals["stored_values_before"]

    def test_sweep_csv_rows(self, pipeline):
        cfg, out = pipeline
        run("sweep", "--config", cfg, "--out", out)
        with open(os.path.join(out, "sweep.csv")) as fh:
            lines = fh.read().splitlines()
        assert lines[0] == "kind,value,eval_metric,stored_values,stored_bits,trainable_values"
        kinds = [line.split(",")[0] for line in lines[1:]]
        assert kinds == ["baseline", "drop_rate", "bit_width"]

    def test_eval_prefers_newest_stage_artifact(self, pipeline):
        cfg, out = pipeline
        run("eval", "--config", cfg, "--out", out)
        assert read_json(out, "eval.json")["stage"] == "compress"
        run("eval", "--config", cfg, "--out", out, "--ckpt", os.path.join(out, "moe.ckpt"))
        assert read_json(out, "eval.json")["checkpoint"] == "moe.ckpt"


class TestIdentityAndChance:
    def test_untrained_eval_near_chance(self, tmp_path):
        cfg = write_config(
            tmp_path,
            {
                "task": {"kind": "modular_classification", "params": {"d": 1, "n_clusters": 16}, "seed": 5},
                "pretrain": {"steps": 1, "lr": 0.0},
            },
        )
        out = str(tmp_path / "run")
        assert run("pretrain-dense", "--config", cfg, "--out", out) == 0
        assert run("eval", "--config", cfg, "--out", out) == 0
        metric = read_json(out, "eval.json")["eval_metric"]
        n_eval = read_json(out, "eval.json")["eval_size"]
        q = 1.0 / 16.0
        sigma = (q * (1 - q) / n_eval) ** 0.5
        assert abs(metric / 100.0 - q) <= 3 * sigma

    def test_upcycle_then_eval_matches_dense_exactly(self, tmp_path):
        cfg = write_config(tmp_path, {"upcycle": {"n_experts": 4, "topk_count": 4}})
        out = str(tmp_path / "run")
        assert run("pretrain-dense", "--config", cfg, "--out", out) == 0
        assert run("eval", "--config", cfg, "--out", out) == 0
        dense_metric = read_json(out, "eval.json")["eval_metric"]
        assert run("upcycle", "--config", cfg, "--out", out) == 0
        assert run("eval", "--config", cfg, "--out", out) == 0
        data = read_json(out, "eval.json")
        assert data["checkpoint"] == "moe.ckpt"
        assert data["eval_metric"] == dense_metric


class TestExitCodes:
    def test_unknown_config_key_exit_2_with_path(self, tmp_path, capsys):
        path = str(tmp_path / "bad.json")
        with open(path, "w") as fh:
            json.dump({"seed": 1, "upcycle": {"n_expert": 4}}, fh)
        assert run("upcycle", "--config", path, "--out", str(tmp_path)) == 2
        assert "upcycle.n_expert" in capsys.readouterr().err

    def test_invalid_json_exit_2_with_line(self, tmp_path, capsys):
        path = str(tmp_path / "bad.json")
        with open(path, "w") as fh:
            fh.write('{"seed": 1,\n  "model": }\n')
        assert run("pretrain-dense", "--config", path, "--out", str(tmp_path)) == 2
        assert "line 2" in capsys.readouterr().err

    def test_missing_seed_exit_2(self, tmp_path, capsys):
        path = str(tmp_path / "bad.json")
        with open(path, "w") as fh:
            json.dump({"model": {"d": 4, "d_h": 8, "depth": 1}}, fh)
        assert run("pretrain-dense", "--config", path, "--out", str(tmp_path)) == 2
        assert "'seed'" in capsys.readouterr().err

    def test_missing_config_exit_2(self, tmp_path):
        assert run("eval", "--out", str(tmp_path)) == 2

    def test_missing_artifact_exit_3(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert run("train", "--config", cfg, "--out", str(tmp_path / "empty")) == 3
        assert "moe.ckpt" in capsys.readouterr().err

    def test_version_skew_exit_3(self, tmp_path, pipeline, capsys):
        _, out = pipeline
        cfg = write_config(tmp_path)
        blob = bytearray(open(os.path.join(out, "dense.ckpt"), "rb").read())
        struct.pack_into("<I", blob, 4, 99)
        skewed = str(tmp_path / "skewed.ckpt")
        with open(skewed, "wb") as fh:
            fh.write(blob)
        assert run("eval", "--config", cfg, "--out", str(tmp_path), "--ckpt", skewed) == 3
        assert "newer" in capsys.readouterr().err

    def test_non_vanilla_similarity_exit_3(self, tmp_path):
        cfg = write_config(tmp_path, {"upcycle": {"method": "ders_lm", "rank": 2}})
        out = str(tmp_path / "run")
        assert run("pretrain-dense", "--config", cfg, "--out", out) == 0
        assert run("upcycle", "--config", cfg, "--out", out) == 0
        assert run("analyze-similarity", "--out", out, "--ckpt", os.path.join(out, "moe.ckpt")) == 3

    def test_bad_flag_exit_2(self):
        assert run("upcycle", "--method", "magic") == 2

    def test_bad_ders_threads_exit_2(self, tmp_path, monkeypatch, pipeline):
        cfg, out = pipeline
        monkeypatch.setenv("DERS_THREADS", "0")
        assert run("eval", "--config", cfg, "--out", out) == 2
        monkeypatch.setenv("DERS_THREADS", "many")
        assert run("eval", "--config", cfg, "--out", out) == 2


class TestDeterminismAndThreads:
    def test_reruns_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, {"pretrain": {"steps": 40}, "train": {"steps": 30}})
        outs = [str(tmp_path / f"run{i}") for i in (0, 1)]
        for out in outs:
            for cmd in ("pretrain-dense", "upcycle", "train", "compress", "eval"):
                assert run(cmd, "--config", cfg, "--out", out) == 0
        for name in ("dense.ckpt", "moe.ckpt", "trained.ckpt", "compressed.ckpt", "metrics.csv", "eval.json"):
            with open(os.path.join(outs[0], name), "rb") as fa, open(os.path.join(outs[1], name), "rb") as fb:
                assert fa.read() == fb.read(), name

    def test_threads_do_not_change_eval(self, tmp_path, monkeypatch, pipeline):
        cfg, out = pipeline
        run("eval", "--config", cfg, "--out", out)
        single = read_json(out, "eval.json")
        monkeypatch.setenv("DERS_THREADS", "3")
        run("eval", "--config", cfg, "--out", out)
        assert read_json(out, "eval.json") == single

    def test_seed_override_changes_model(self, tmp_path):
        cfg = write_config(tmp_path, {"pretrain": {"steps": 5}})
        out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
        assert run("pretrain-dense", "--config", cfg, "--out", out_a) == 0
        assert run("pretrain-dense", "--config", cfg, "--out", out_b, "--seed", "99") == 0
        with open(os.path.join(out_a, "dense.ckpt"), "rb") as fa, open(
            os.path.join(out_b, "dense.ckpt"), "rb"
        ) as fb:
            assert fa.read() != fb.read()


class TestFlagOverrides:
    def test_method_and_rank_flags(self, tmp_path, pipeline):
        _, src = pipeline
        cfg = write_config(tmp_path)
        out = str(tmp_path / "run")
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(src, "dense.ckpt"), "rb") as fh:
            blob = fh.read()
        with open(os.path.join(out, "dense.ckpt"), "wb") as fh:
            fh.write(blob)
        assert run("upcycle", "--config", cfg, "--out", out, "--method", "ders-lm", "--rank", "2") == 0
        model, meta = load_model(os.path.join(out, "moe.ckpt"))
        assert meta["method"] == "ders_lm"
        layer = next(b for b in model.blocks if hasattr(b, "group_in"))
        delta = layer.group_in.deltas[0]
        assert isinstance(delta, LowRankDelta) and delta.rank == 2

    def test_bit_width_flag_selects_quantize(self, tmp_path, pipeline):
        _, src = pipeline
        cfg = write_config(tmp_path, {"compress": None})
        with open(cfg) as fh:
            data = json.load(fh)
        del data["compress"]
        with open(cfg, "w") as fh:
            json.dump(data, fh)
        out = str(tmp_path / "run")
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(src, "trained.ckpt"), "rb") as fh:
            blob = fh.read()
        with open(os.path.join(out, "trained.ckpt"), "wb") as fh:
            fh.write(blob)
        assert run("compress", "--config", cfg, "--out", out, "--bit-width", "4") == 0
        model, meta = load_model(os.path.join(out, "compressed.ckpt"))
        assert meta["technique"] == "quantize"
        layer = next(b for b in model.blocks if hasattr(b, "group_in"))
        delta = layer.group_in.deltas[0]
        assert isinstance(delta, QuantizedDelta) and delta.bit_width == 4

    def test_format_flag(self, tmp_path, pipeline):
        _, out = pipeline
        dest = str(tmp_path / "fmt")
        os.makedirs(dest, exist_ok=True)
        ckpt = os.path.join(out, "trained.ckpt")
        assert run("report-params", "--out", dest, "--ckpt", ckpt, "--format", "csv") == 0
        assert os.path.exists(os.path.join(dest, "params.csv"))
        assert run("analyze-similarity", "--out", dest, "--ckpt", ckpt, "--format", "json") == 0
        assert os.path.exists(os.path.join(dest, "similarity.json"))
        data = json.load(open(os.path.join(dest, "similarity.json")))
        assert data["note"].startswith("cosine similarity")

    def test_compress_both_flags_without_technique_rejected(self, tmp_path, pipeline, capsys):
        _, src = pipeline
        cfg = write_config(tmp_path)
        with open(cfg) as fh:
            data = json.load(fh)
        del data["compress"]
        with open(cfg, "w") as fh:
            json.dump(data, fh)
        out = str(tmp_path / "run")
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(src, "trained.ckpt"), "rb") as fh:
            blob = fh.read()
        with open(os.path.join(out, "trained.ckpt"), "wb") as fh:
            fh.write(blob)
        code = run(
            "compress", "--config", cfg, "--out", out, "--bit-width", "4", "--drop-rate", "0.5"
        )
        assert code == 2
        assert "technique" in capsys.readouterr().err
