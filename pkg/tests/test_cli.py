import json
import math
import os

import numpy as np
import pytest

from panoflow import cli
from panoflow import metrics as mt
from panoflow import projections as pj
from panoflow.flowfield import FlowField, read_flow, write_flow
from panoflow.imageio import read_pfm, read_png, write_png


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_bytes(root, skip=("run.json",)):
    out = {}
    for d, _, files in os.walk(root):
        for name in files:
            if name not in skip:
                path = os.path.join(d, name)
                out[os.path.relpath(path, root)] = open(path, "rb").read()
    return out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "eft64"
    assert run("generate", "--schedule", "eft", "--pairs", 3, "--seed", 7, "--width", 64, "--objects", 12, "--out", root) == 0
    return root


def test_generate_count_and_manifest(dataset, capsys):
    lines = open(dataset / "manifest.jsonl").read().splitlines()
    assert len(lines) == 3
    run_rec = json.load(open(dataset / "run.json"))
    assert run_rec["command"] == "generate" and run_rec["seeds"] == {"dataset": 7}
    assert set(run_rec["versions"]) >= {"panoflow", "numpy", "python"}


def test_generate_rerun_identical(dataset, tmp_path):
    other = tmp_path / "again"
    assert run("generate", "--schedule", "eft", "--pairs", 3, "--seed", 7, "--width", 64, "--objects", 12,
               "--threads", 2, "--out", other) == 0
    assert tree_bytes(dataset) == tree_bytes(other)


def test_generate_config_errors(tmp_path):
    assert run("generate", "--out", tmp_path / "x") == cli.EXIT_CONFIG
    assert run("generate", "--schedule", "jungle", "--seed", 1, "--out", tmp_path / "x") == cli.EXIT_CONFIG
    cfg = tmp_path / "c.cfg"
    cfg.write_text("bogus = 1\n")
    assert run("generate", "--seed", 1, "--config", cfg, "--out", tmp_path / "x") == cli.EXIT_CONFIG
    cfg.write_text("pairs = two\n")
    assert run("generate", "--seed", 1, "--config", cfg, "--out", tmp_path / "x") == cli.EXIT_CONFIG


def test_config_overrides_flags(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("pairs = 1\nschedule = city\nobjects = 2\n")
    out = tmp_path / "d"
    assert run("generate", "--seed", 2, "--pairs", 5, "--width", 32, "--config", cfg, "--out", out) == 0
    assert len(open(out / "manifest.jsonl").read().splitlines()) == 1
    assert json.load(open(out / "dataset_config.json"))["schedule"] == "city"


def pipeline(dataset, out, *extra):
    return run("pipeline", "--manifest", dataset / "manifest.jsonl", "--seed", 3, "--out", out, *extra)


def test_pipeline_oracle_rows_bracket_singles(dataset, tmp_path):
    out = tmp_path / "run"
    assert pipeline(dataset, out, "--fusion", "blend,oracle-lower,oracle-upper") == 0
    rows = {r["method"]: r for r in mt.parse_table_csv(open(out / "compare.csv").read())}
    for key in ("sd_mean", "epe_mean"):
        singles = [rows["E"][key], rows["C"][key]]
        assert rows["E+C oracle-lower"][key] <= min(singles)
        assert rows["E+C oracle-upper"][key] >= max(singles)
    assert "SD/EPE" in open(out / "compare.txt").read()
    assert os.path.getsize(out / "failures.jsonl") == 0
    assert any(name.endswith(".png") for name in os.listdir(out / "heatmaps"))


@pytest.mark.parametrize("pair", ["E+P", "C+P"])
def test_pipeline_pair_selection(dataset, tmp_path, pair):
    out = tmp_path / pair.replace("+", "")
    assert pipeline(dataset, out, "--pair", pair, "--limit", 1, "--no-heatmaps") == 0
    methods = [r["method"] for r in mt.parse_table_csv(open(out / "compare.csv").read())]
    a, b = pair.split("+")
    assert methods == [a, b, f"{pair} blend"]


def test_pipeline_thread_invariance(dataset, tmp_path):
    args = ("--fusion", "blend,oracle-lower", "--estimator", "perturbed", "--fb")
    assert pipeline(dataset, tmp_path / "t1", *args, "--threads", 1) == 0
    assert pipeline(dataset, tmp_path / "t3", *args, "--threads", 3) == 0
    assert tree_bytes(tmp_path / "t1") == tree_bytes(tmp_path / "t3")


def test_pipeline_quarantine(dataset, tmp_path):
    broken = tmp_path / "broken"
    broken.mkdir()
    for d, _, files in os.walk(dataset):
        for name in files:
            src = os.path.join(d, name)
            dst = broken / os.path.relpath(src, dataset)
            dst.parent.mkdir(parents=True, exist_ok=True)
            dst.write_bytes(open(src, "rb").read())
    (broken / "flows" / "flow_0001.sfl").write_bytes(b"junk")
    out = tmp_path / "q"
    assert run("pipeline", "--manifest", broken / "manifest.jsonl", "--seed", 1, "--out", out) == 0
    failures = [json.loads(l) for l in open(out / "failures.jsonl")]
    assert [f["index"] for f in failures] == [1]
    for name in ("flow_0000.sfl", "flow_0002.sfl"):
        (broken / "flows" / name).write_bytes(b"junk")
    assert run("pipeline", "--manifest", broken / "manifest.jsonl", "--seed", 1, "--out", tmp_path / "q2") == cli.EXIT_DATA


def test_pipeline_requires_seed_and_manifest(dataset, tmp_path):
    assert run("pipeline", "--manifest", dataset / "manifest.jsonl", "--out", tmp_path / "x") == cli.EXIT_CONFIG
    assert run("pipeline", "--manifest", tmp_path / "none.jsonl", "--seed", 1, "--out", tmp_path / "x") == cli.EXIT_DATA
    assert pipeline(dataset, tmp_path / "x", "--pair", "E+E") == cli.EXIT_CONFIG
    assert pipeline(dataset, tmp_path / "x", "--fusion", "average") == cli.EXIT_CONFIG


def test_estimate_fuse_eval_chain(dataset, tmp_path):
    a, b, gt = dataset / "frames/frame_0000.png", dataset / "frames/frame_0001.png", dataset / "flows/flow_0000.sfl"
    assert run("estimate", "--frame-a", a, "--frame-b", b, "--out", tmp_path / "e") == 0
    assert run("estimate", "--frame-a", a, "--frame-b", b, "--spec", "tricyl:64", "--estimator", "hornschunck",
               "--iterations", 20, "--to-equirect", "--out", tmp_path / "c") == 0
    assert read_flow(str(tmp_path / "c/flow.sfl")).spec.kind == pj.TRICYL
    assert run("estimate", "--frame-a", a, "--frame-b", b, "--estimator", "perturbed", "--out", tmp_path / "p") == cli.EXIT_CONFIG
    assert run("fuse", "--a", tmp_path / "e/flow.sfl", "--b", tmp_path / "c/flow.sfl", "--mode", "oracle-lower",
               "--out", tmp_path / "f") == cli.EXIT_CONFIG
    assert run("fuse", "--a", tmp_path / "e/flow.sfl", "--b", tmp_path / "c/flow.sfl", "--gt", gt, "--out", tmp_path / "f") == 0
    conf = read_pfm(str(tmp_path / "f/confidence.pfm"))
    assert conf.shape == (32, 64) and np.all((conf >= 0) & (conf <= 1))
    assert {"fused.sfl", "lower.sfl", "upper.sfl"} <= set(os.listdir(tmp_path / "f"))
    assert run("eval", "--pred", tmp_path / "f/fused.sfl", "--gt", gt, "--mask", dataset / "occlusion/occ_0000.pfm",
               "--method", "E+C", "--dataset", "eft64", "--out", tmp_path / "v") == 0
    rep = json.load(open(tmp_path / "v/report.json"))
    assert rep["method"] == "E+C" and rep["epe_mean"] >= 0 and "epe_vmax" in rep["meta"]
    assert {"epe.png", "epe.pfm", "sd.png", "sd.pfm", "report.csv", "report.txt"} <= set(os.listdir(tmp_path / "v"))
    assert run("eval", "--pred", tmp_path / "missing.sfl", "--gt", gt, "--out", tmp_path / "v") == cli.EXIT_DATA


def test_convert_round_trip_psnr(tmp_path):
    E = pj.ProjectionSpec.equirect(512)
    d = pj.pixel_map(E).dirs
    card = 0.5 + 0.25 * np.stack([np.sin(3 * d[..., 0] + d[..., 1]), np.cos(2 * d[..., 2]), np.sin(4 * d[..., 1])], -1)
    write_png(str(tmp_path / "card.png"), card, bits=16)
    assert run("convert", tmp_path / "card.png", "--to", "tricyl:512", "--bits", 16, "--out", tmp_path / "c") == 0
    assert run("convert", tmp_path / "c/card.png", "--from", "tricyl:512", "--to", "equirect:512", "--bits", 16,
               "--out", tmp_path / "e") == 0
    back = read_png(str(tmp_path / "e/card.png"))
    mse = np.mean((back - card) ** 2)
    assert 10 * math.log10(1 / mse) > 30


def test_convert_flow_formats(dataset, tmp_path):
    gt = dataset / "flows/flow_0000.sfl"
    assert run("convert", gt, "--to", "cubepad:16", "--out", tmp_path) == 0
    assert read_flow(str(tmp_path / "flow_0000.sfl")).spec == pj.ProjectionSpec.cubepad(16)
    assert run("convert", gt, "--to", "equirect:64", "--format", "flo", "--out", tmp_path) == 0
    assert (tmp_path / "flow_0000.flo").read_bytes()[:4] == b"PIEH"
    (tmp_path / "x.txt").write_text("hi")
    assert run("convert", tmp_path / "x.txt", "--to", "equirect:64", "--out", tmp_path) == cli.EXIT_DATA
    assert run("convert", gt, "--to", "hexagon:3", "--out", tmp_path) == cli.EXIT_CONFIG


def test_visualize_zero_flow_and_weights(tmp_path):
    E = pj.ProjectionSpec.equirect(64)
    write_flow(FlowField.zeros(E), str(tmp_path / "zero.sfl"))
    assert run("visualize", "--flow", tmp_path / "zero.sfl", "--weights", "tricyl:256", "--out", tmp_path / "v") == 0
    img = read_png(str(tmp_path / "v/zero_color.png"))
    assert np.all(img == 1.0)
    owned = read_png(str(tmp_path / "v/weights_tricyl_owned.png")) > 0.5
    C = pj.ProjectionSpec.tricyl(256)
    bh = C.band_height
    for b in range(3):
        band = owned[b * bh : (b + 1) * bh]
        assert band[bh // 2].mean() > band[0].mean() and band[bh // 2].mean() > band[-1].mean()
    w = read_pfm(str(tmp_path / "v/weights_tricyl.pfm"))
    assert float(w.sum()) == pytest.approx(4 * np.pi, rel=0.01)
    assert run("visualize", "--out", tmp_path / "v") == cli.EXIT_CONFIG


def test_propagate_edit(dataset, tmp_path):
    out = tmp_path / "edit"
    assert run("propagate-edit", "--manifest", dataset / "manifest.jsonl", "--at", "20,16", "--radius", 3, "--out", out) == 0
    frames = sorted(os.listdir(out / "frames"))
    assert frames == [f"edit_{k:04d}.png" for k in range(4)]
    track = json.load(open(out / "track.json"))
    assert track[0]["centroid"] == pytest.approx([20.0, 16.0], abs=0.1)
    assert all(t["centroid"] is not None for t in track)


def test_propagate_edit_missing_flow(dataset, tmp_path):
    recs = [json.loads(l) for l in open(dataset / "manifest.jsonl")]
    recs[1]["flow_ba"] = "flows/nope.sfl"
    root = tmp_path / "m"
    root.mkdir()
    for sub in ("frames", "flows"):
        os.symlink(dataset / sub, root / sub)
    with open(root / "manifest.jsonl", "w") as f:
        for r in recs:
            f.write(json.dumps(r) + "\n")
    assert run("propagate-edit", "--manifest", root / "manifest.jsonl", "--out", tmp_path / "e") == cli.EXIT_DATA


def test_internal_errors_exit_4(monkeypatch, tmp_path):
    def boom(args):
        raise AssertionError("invariant broken")

    monkeypatch.setitem(cli.COMMANDS, "visualize", boom)
    assert run("visualize", "--out", tmp_path) == cli.EXIT_INTERNAL
