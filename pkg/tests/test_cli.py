"""End-to-end CLI tests on tiny corpora."""

import json
import os

import numpy as np
import pytest

from dualground.cli import main, micro_model_and_example


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    code = run_cli("gen-data", "--out", str(out), "--seed", "3",
                   "--scenes", "12", "--k", "4")
    assert code == 0
    return out


class TestGenData:
    def test_manifest_counts(self, tiny_corpus):
        manifest = json.loads((tiny_corpus / "manifest.json").read_text())
        assert manifest["n_scenes"] == 12
        assert manifest["n_train"] + manifest["n_test"] == manifest["n_records"]
        assert set(manifest["train_scene_ids"]).isdisjoint(manifest["test_scene_ids"])
        assert (tiny_corpus / "vocab.txt").exists()

    def test_rerun_byte_identical(self, tiny_corpus, tmp_path):
        again = tmp_path / "again"
        assert run_cli("gen-data", "--out", str(again), "--seed", "3",
                       "--scenes", "12", "--k", "4") == 0
        for name in ("scenes.jsonl", "descriptions.jsonl", "vocab.txt",
                     "manifest.json"):
            assert (tiny_corpus / name).read_bytes() == (again / name).read_bytes()

    def test_corpus_invariants(self, tiny_corpus):
        from dualground.config import GenConfig
        from dualground.scenegen import load_corpus, oracle_satisfiers, validate_scene

        manifest = json.loads((tiny_corpus / "manifest.json").read_text())
        gen = GenConfig(**{k: tuple(v) if isinstance(v, list) else v
                           for k, v in manifest["gen"].items()})
        scenes, records, _ = load_corpus(tiny_corpus)
        for scene in scenes.values():
            assert validate_scene(scene, gen) == []
        for rec in records:
            got = oracle_satisfiers(scenes[rec.scene_id], rec.relation_kind,
                                    rec.anchor_ids, rec.attribute_filter, gen,
                                    secondary_relation=rec.secondary_relation)
            assert got == {rec.target_id}


@pytest.fixture(scope="module")
def tiny_run(tiny_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = run_cli("train", "--corpus", str(tiny_corpus), "--out", str(out),
                   "--seed", "3", "--epochs", "1,1,1,1", "--batch-size", "4",
                   "--d", "16", "--heads", "2", "--quiet")
    assert code == 0
    return out


class TestTrain:
    def test_full_run_emits_four_stages(self, tiny_run):
        summary = json.loads((tiny_run / "summary.json").read_text())
        assert len(summary["stages"]) == 4
        for name in summary["stages"]:
            assert (tiny_run / f"report_{name}.json").exists()
            assert (tiny_run / f"checkpoint_{name}.ckpt").exists()

    def test_teacher_only_no_gtas_two_reports(self, tiny_corpus, tmp_path):
        out = tmp_path / "teacher_only"
        assert run_cli("train", "--corpus", str(tiny_corpus), "--out", str(out),
                       "--seed", "3", "--epochs", "1,1,1,1", "--batch-size", "4",
                       "--d", "16", "--heads", "2", "--mode", "teacher-only",
                       "--no-gtas", "--quiet") == 0
        summary = json.loads((out / "summary.json").read_text())
        assert len(summary["stages"]) == 2
        reports = [json.loads((out / f"report_{n}.json").read_text())
                   for n in summary["stages"]]
        assert all(not r["gtas_active"] for r in reports)

    def test_metrics_reproducible(self, tiny_corpus, tiny_run, tmp_path):
        out = tmp_path / "repeat"
        assert run_cli("train", "--corpus", str(tiny_corpus), "--out", str(out),
                       "--seed", "3", "--epochs", "1,1,1,1", "--batch-size", "4",
                       "--d", "16", "--heads", "2", "--quiet") == 0
        summary = json.loads((tiny_run / "summary.json").read_text())
        for name in summary["stages"]:
            assert (tiny_run / f"report_{name}.json").read_bytes() == \
                (out / f"report_{name}.json").read_bytes()
            assert (tiny_run / f"checkpoint_{name}.ckpt").read_bytes() == \
                (out / f"checkpoint_{name}.ckpt").read_bytes()


class TestEval:
    def test_eval_writes_metrics(self, tiny_corpus, tiny_run, tmp_path):
        summary = json.loads((tiny_run / "summary.json").read_text())
        ckpt = tiny_run / f"checkpoint_{summary['stages'][1]}.ckpt"
        out = tmp_path / "metrics.json"
        assert run_cli("eval", "--checkpoint", str(ckpt), "--corpus",
                       str(tiny_corpus), "--out", str(out)) == 0
        payload = json.loads(out.read_text())
        assert 0.0 <= payload["metrics"]["overall"] <= 1.0
        assert payload["metrics"]["n"] > 0


class TestInspect:
    def test_dump_columns_and_identity(self, tiny_corpus, tiny_run, tmp_path):
        summary = json.loads((tiny_run / "summary.json").read_text())
        ckpt = tiny_run / f"checkpoint_{summary['stages'][1]}.ckpt"
        out = tmp_path / "dump.csv"
        assert run_cli("inspect", "--checkpoint", str(ckpt), "--corpus",
                       str(tiny_corpus), "--description-id", "0",
                       "--out", str(out)) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "object_id,category,color,s_att,s_spa,s,is_target,is_distractor"
        rows = [ln for ln in lines[1:] if not ln.startswith("#")]
        assert len(rows) == 4  # K=4 objects
        assert any("corpus" in ln for ln in lines if ln.startswith("#"))
        n_targets = 0
        for row in rows:
            parts = row.split(",")
            s_att, s_spa, s = float(parts[3]), float(parts[4]), float(parts[5])
            assert s == s_att + s_spa
            n_targets += int(parts[6])
        assert n_targets == 1

    def test_wrong_scene_id_rejected(self, tiny_corpus, tiny_run):
        summary = json.loads((tiny_run / "summary.json").read_text())
        ckpt = tiny_run / f"checkpoint_{summary['stages'][1]}.ckpt"
        assert run_cli("inspect", "--checkpoint", str(ckpt), "--corpus",
                       str(tiny_corpus), "--description-id", "0",
                       "--scene-id", "99999") == 1

    def test_unknown_description_rejected(self, tiny_corpus, tiny_run):
        summary = json.loads((tiny_run / "summary.json").read_text())
        ckpt = tiny_run / f"checkpoint_{summary['stages'][1]}.ckpt"
        assert run_cli("inspect", "--checkpoint", str(ckpt), "--corpus",
                       str(tiny_corpus), "--description-id", "5000") == 1


class TestGradcheck:
    def test_micro_model_matches_spec_dims(self):
        model, example = micro_model_and_example()
        assert model.cfg.d == 16
        assert model.cfg.stack_layers == 2
        assert model.cfg.heads == 2
        assert len(example.object_ids) == 4
        assert len(example.token_ids) == 8

    def test_sampled_gradcheck_passes(self, capsys):
        assert run_cli("gradcheck", "--sample", "2") == 0
        assert "PASS" in capsys.readouterr().out

    def test_corrupted_gradient_fails(self, capsys):
        assert run_cli("gradcheck", "--sample", "2", "--corrupt") == 3
        assert "FAIL" in capsys.readouterr().out

    def test_report_lists_groups(self, capsys, tmp_path):
        out = tmp_path / "gradcheck.json"
        assert run_cli("gradcheck", "--sample", "1", "--out", str(out)) == 0
        payload = json.loads(out.read_text())
        assert {"head", "obj", "score", "stack", "text"} <= set(payload["groups"])


class TestExitCodes:
    def test_missing_corpus_is_io_error(self, tmp_path):
        assert run_cli("eval", "--checkpoint", "nope.ckpt",
                       "--corpus", str(tmp_path / "missing")) == 2
