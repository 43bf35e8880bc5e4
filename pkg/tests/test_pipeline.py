import csv
import logging
import os

import numpy as np
import pytest

from bodycorr import cli
from bodycorr import eval_metrics as E
from bodycorr import mesh_core as mc
from bodycorr import pipeline as P
from bodycorr.config import ConfigError, RunConfig

TINY = {
    "poses.train": 2, "poses.heldout": 1, "segment.k": 8, "segment.candidates": 4, "segment.max_count": 2,
    "segment.initial_seeds": 2, "render.views": 2, "render.size": 32, "net.iterations": 4, "net.batch_size": 2,
}


def tiny(tmp_path, **kw):
    return RunConfig({**TINY, "run.out_dir": str(tmp_path / "run"), **kw}).validate()


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    cfg = RunConfig({**TINY, "run.out_dir": str(tmp_path_factory.mktemp("tiny") / "run")}).validate()
    P.run_all(cfg)
    return cfg


class TestConfig:
    def test_parse_roundtrip(self):
        cfg = RunConfig.parse("segment.k = 12  # comment\n\nnet.lr = 0.02\neval.geodesic = yes\n")
        assert cfg["segment.k"] == 12 and cfg["net.lr"] == 0.02 and cfg["eval.geodesic"] is True
        again = RunConfig.parse(cfg.dump())
        assert again.values == cfg.values

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            RunConfig.parse("segment.kk = 3")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            RunConfig.parse("segment.k = many")
        with pytest.raises(ConfigError):
            RunConfig.parse("no equals sign")

    def test_presets(self):
        paper = RunConfig(preset="paper")
        assert (paper["segment.k"], paper["segment.candidates"], paper["render.views"], paper["render.size"]) == (500, 100, 144, 512)
        assert (paper["net.d"], paper["net.batch_size"], paper["net.iterations"]) == (16, 128, 200_000)
        paper.validate()
        desk = RunConfig().validate()
        assert desk.net_config().input_size == 64 and desk["segment.k"] == 20

    def test_invalid_network(self):
        with pytest.raises(ConfigError):
            RunConfig({"render.size": 30}).validate()

    def test_hash_chain(self):
        a, b = RunConfig(), RunConfig({"net.lr": 0.5})
        ha, hb = P.stage_hashes(a), P.stage_hashes(b)
        assert ha["render"] == hb["render"]
        assert all(ha[s] != hb[s] for s in ("train", "extract", "match", "eval", "report"))


def test_segment_stage_file_contract(tmp_path):
    cfg = tiny(tmp_path, **{"segment.k": 20, "segment.candidates": 20, "segment.max_count": 5})
    P.run_stage("synth", cfg)
    P.run_stage("segment", cfg)
    files = sorted(os.listdir(tmp_path / "run" / "segment"))
    assert files == ["seg0.txt", "seg1.txt", "seg2.txt", "seg3.txt", "seg4.txt", "set.txt"]
    segs = P.load_segmentations(cfg)
    assert all(s.k == 20 for s in segs)


class TestRun:
    def test_artifacts(self, tiny_run):
        root = tiny_run["run.out_dir"]
        for rel in ("report/report.csv", "report/summary.txt", "report/curve_vertices.csv", "eval/vertex_errors.csv",
                    "train/loss.csv", "train/net.bin", "manifest.txt"):
            assert os.path.exists(os.path.join(root, rel)), rel
        text = open(os.path.join(root, "report", "summary.txt")).read()
        assert "R@10cm" in text and "spearman_geodesic_descriptor" in text

    def test_render_file_formats(self, tiny_run):
        render = os.path.join(tiny_run["run.out_dir"], "render")
        with open(os.path.join(render, "heldout0_view1_depth.pfm"), "rb") as fh:
            assert fh.read(9) == b"Pf\n32 32\n"
        pr = P.PoseRenders(tiny_run, "heldout0", 2)
        assert pr.depth.shape == (2, 32, 32) and pr.labels.shape == (2, 2, 32, 32)
        # zero depth exactly where no vertex was rasterized
        np.testing.assert_array_equal(pr.depth > 0, pr.mask)

    def test_manifest_records_every_artifact(self, tiny_run):
        m = P.Manifest(os.path.join(tiny_run["run.out_dir"], "manifest.txt"))
        hashes = P.stage_hashes(tiny_run)
        for stage in P.STAGES:
            assert m.stage_hash(stage) == hashes[stage]
            assert m.entries[f"stage.{stage}.seed"] == "0"
            for a in m.artifacts(stage):
                assert os.path.exists(os.path.join(tiny_run["run.out_dir"], a))
                assert m.entries[f"artifact.{stage}.{a}"] == f"config_hash={hashes[stage]} seed=0"

    def test_rerun_is_noop(self, tiny_run):
        path = os.path.join(tiny_run["run.out_dir"], "manifest.txt")
        before = open(path).read()
        assert P.run_all(tiny_run) == []
        assert open(path).read() == before

    def test_missing_artifact_recomputes(self, tiny_run):
        os.remove(os.path.join(tiny_run["run.out_dir"], "report", "summary.txt"))
        assert P.run_all(tiny_run) == ["report"]


def test_config_change_recomputes_downstream(tmp_path, caplog):
    cfg = tiny(tmp_path)
    P.run_all(cfg)
    changed = tiny(tmp_path, **{"filter.threshold": 0.2})
    with caplog.at_level(logging.WARNING, logger="bodycorr"):
        ran = P.run_all(changed)
    assert ran == ["match", "eval", "report"]
    assert any("stale" in r.message for r in caplog.records)


def test_deterministic_reports(tmp_path):
    outs = []
    for name in ("a", "b"):
        cfg = RunConfig({**TINY, "run.out_dir": str(tmp_path / name)}).validate()
        P.run_all(cfg)
        outs.append({f: open(tmp_path / name / "report" / f, "rb").read()
                     for f in os.listdir(tmp_path / name / "report") if f.endswith(".csv")})
    assert outs[0] == outs[1] and len(outs[0]) >= 3


def write_eval_fixture(cfg, pairs):
    """Planted per-pair errors plus a minimal metrics file."""
    root = cfg["run.out_dir"]
    os.makedirs(os.path.join(root, "eval"), exist_ok=True)
    rep = E.summarize([np.asarray(e) for e in pairs.values()], cfg.radii, list(pairs))
    for f in ("vertex_errors.csv", "baseline_errors.csv"):
        E.write_errors_csv(os.path.join(root, "eval", f), rep)
    with open(os.path.join(root, "eval", "metrics.txt"), "w") as fh:
        fh.write("spearman_geodesic_descriptor = 1.0\n")


def read_report(cfg):
    with open(os.path.join(cfg["run.out_dir"], "report", "report.csv"), newline="") as fh:
        return {r["method"]: r for r in csv.DictReader(fh)}


def test_report_perfect_fixture(tmp_path):
    cfg = tiny(tmp_path)
    write_eval_fixture(cfg, {"p0": [0.0] * 10})
    P.stage_report(cfg)
    row = read_report(cfg)["descriptor NN (vertices)"]
    assert row["AE_cm"] == "0.0000" and row["recall@10cm"] == "1.0000"
    assert "0.00" in open(os.path.join(cfg["run.out_dir"], "report", "summary.txt")).read()


def test_report_worst_pair_fixture(tmp_path):
    cfg = tiny(tmp_path)
    pairs = {"p0": [1.0, 3.0], "p1": [8.0, 10.0, 9.0]}
    write_eval_fixture(cfg, pairs)
    P.stage_report(cfg)
    row = read_report(cfg)["descriptor NN (vertices)"]
    assert float(row["worst_AE_cm"]) == pytest.approx(max(np.mean(v) for v in pairs.values()), abs=1e-4)


class TestCLI:
    def test_bad_config_exit_2(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("segment.k = lots\n")
        assert cli.main(["synth", "--config", str(bad), "-q"]) == 2
        assert cli.main(["synth", "--set", "nope=1", "-q"]) == 2
        assert cli.main(["bogus"]) == 2

    def test_missing_upstream_exit_1(self, tmp_path):
        assert cli.main(["segment", "--out", str(tmp_path / "empty"), "-q"]) == 1

    def test_stage_ok(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("".join(f"{k} = {v}\n" for k, v in TINY.items()))
        assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "r"), "--seed", "3", "-q"]) == 0
        mesh = mc.load_mesh(tmp_path / "r" / "synth" / "rest.obj")
        assert mesh.n_vertices > 1000
        assert "stage.synth.seed = 3" in (tmp_path / "r" / "manifest.txt").read_text()
