import json
import subprocess
import sys

import numpy as np
import pytest

from entroprune.cli import heatmap_pixels, main
from entroprune.entropy import Criterion, head_averaged_scores
from entroprune.imageio import decode_pnm, load_image, write_pnm, write_raw_f32
from entroprune.model import forward
from entroprune.pruning import PruneSchedule, pruned_forward
from entroprune.reference import make_toy, naive_forward

from conftest import toy_params


@pytest.fixture(scope="module")
def toy3():
    seed = next(s for s in range(100) if make_toy(s, depth=3).config.grid_size == 3)
    return make_toy(seed, depth=3)


@pytest.fixture
def workspace(tmp_path, toy3):
    cfg = toy3.config
    (tmp_path / "model.entp").write_bytes(toy3.archive_bytes())
    (tmp_path / "config.json").write_text(json.dumps(cfg.to_dict()))
    rng = np.random.default_rng(0)
    imgs = []
    for i in range(3):
        p = tmp_path / f"img{i}.f32"
        write_raw_f32(p, rng.random((cfg.image_size, cfg.image_size, cfg.in_chans)).astype(np.float32))
        imgs.append(str(p))
    base = ["--archive", str(tmp_path / "model.entp"), "--config", str(tmp_path / "config.json"), "--blocks="]
    return tmp_path, base, imgs


def run_cli(args, capsys):
    code = main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_classify_output(workspace, capsys, toy3):
    tmp, base, imgs = workspace
    code, out, _ = run_cli(["classify", *base, "--blocks", "1,2", "--keep-rate", "0.5", *imgs], capsys)
    assert code == 0
    recs = [json.loads(line) for line in out.splitlines()]
    assert [r["path"] for r in recs] == imgs
    for r in recs:
        assert abs(sum(r["probabilities"]) - 1) < 1e-9
        assert r["trajectory"][0] == toy3.config.num_patches + 1
        assert r["top_k"][0] == int(np.argmax(r["probabilities"]))


def test_classify_dense_argmax_matches_oracle(workspace, capsys, toy3):
    tmp, base, imgs = workspace
    _, out, _ = run_cli(["classify", *base, "--keep-rate", "1.0", *imgs], capsys)
    for line, path in zip(out.splitlines(), imgs):
        ref = naive_forward(toy3, load_image(path, toy3.config))
        assert json.loads(line)["top_k"][0] == int(np.argmax(ref))


def test_classify_deterministic_bytes(workspace):
    tmp, base, imgs = workspace
    outs = []
    for k, threads in enumerate(("1", "3")):
        d = tmp / f"run{k}"
        assert main(["classify", *base, "--keep-rate", "0.6", "--blocks", "1,3", "--threads", threads, "--out-dir", str(d), *imgs]) == 0
        outs.append((d / "classify.jsonl").read_bytes())
    assert outs[0] == outs[1]


def test_classify_partial_failure(workspace, capsys):
    tmp, base, imgs = workspace
    bad = tmp / "bad.ppm"
    bad.write_bytes(b"P6\n3 3\n255\n\0")
    code, out, _ = run_cli(["classify", *base, imgs[0], str(bad), imgs[1]], capsys)
    assert code == 1
    recs = [json.loads(line) for line in out.splitlines()]
    assert "error" in recs[1] and "probabilities" in recs[0] and "probabilities" in recs[2]


def test_usage_errors(workspace, capsys):
    tmp, base, imgs = workspace
    assert run_cli(["classify", *base, "--blocks", "9", *imgs], capsys)[0] == 2
    assert run_cli(["classify", *base, "--keep-rate", "0", *imgs], capsys)[0] == 2
    assert run_cli(["classify", *base, "--criterion", "renyi", *imgs], capsys)[0] == 2
    assert run_cli(["classify", "--archive", str(tmp / "missing.entp"), imgs[0]], capsys)[0] == 2
    (tmp / "junk.entp").write_bytes(b"not an archive at all")
    assert run_cli(["classify", "--archive", str(tmp / "junk.entp"), "--config", base[3], imgs[0]], capsys)[0] == 2


def test_entropy_map(workspace, toy3):
    tmp, base, imgs = workspace
    out = tmp / "maps"
    assert main(["entropy-map", *base, "--block", "2", "--out-dir", str(out), imgs[0]]) == 0
    px = decode_pnm((out / "img0.block2.pgm").read_bytes())
    assert px.shape == (3, 3, 1)
    side = json.loads((out / "img0.block2.json").read_text())
    # sidecar scores are the engine's scores exactly
    params = toy_params(toy3)
    seen = {}
    pruned_forward(load_image(imgs[0], toy3.config), params, toy3.config, PruneSchedule.dense(), on_block=lambda i, x, a: seen.setdefault(i, a))
    expect = head_averaged_scores(seen[2], Criterion("shannon"), block=2).values
    assert side["scores"] == expect.tolist()
    assert px[..., 0].min() == 0 and px[..., 0].max() == 255


def test_entropy_map_after_pruning_marks_dropped(workspace):
    tmp, base, imgs = workspace
    out = tmp / "maps"
    assert main(["entropy-map", *base, "--block", "2", "--blocks", "1", "--keep-rate", "0.5", "--out-dir", str(out), imgs[0]]) == 0
    side = json.loads((out / "img0.block2.json").read_text())
    assert len(side["patch_ids"]) == 5


def test_heatmap_constant_and_dropped():
    np.testing.assert_array_equal(heatmap_pixels(np.array([0.5, 0.5]), np.array([0, 3]), 2), [[0, 255], [255, 0]])
    np.testing.assert_array_equal(heatmap_pixels(np.array([1.0, 3.0]), np.array([1, 2]), 2), [[255, 0], [255, 255]])


def test_sweep(workspace, capsys):
    tmp, base, imgs = workspace
    code, out, _ = run_cli(
        ["sweep", *base, "--blocks", "1,2", "--keep-rates", "1.0,0.5", "--criteria", "shannon,renyi:1.0001,renyi:2,evit", "--out-dir", str(tmp / "sw"), *imgs],
        capsys,
    )
    assert code == 0
    res = json.loads((tmp / "sw" / "sweep.json").read_text())
    rows = {(r["criterion"], r["keep_rate"]): r for r in res["rows"]}
    for c in ("shannon", "renyi:1.0001", "renyi:2", "evit"):
        assert rows[(c, 1.0)]["reduction"] == 0.0
        assert rows[(c, 1.0)]["agreement"] == 1.0
        assert rows[(c, 1.0)]["overlap_vs_ref"] == 1.0
    assert rows[("renyi:1.0001", 0.5)]["overlap_vs_ref"] == 1.0
    assert "criterion" in out.splitlines()[0]
    assert (tmp / "sw" / "sweep.txt").read_text().strip() == out.strip()


def test_analyze(workspace, capsys):
    tmp, base, imgs = workspace
    code, out, _ = run_cli(["analyze", *base, "--alphas", "2", "--bins", "4", imgs[0]], capsys)
    assert code == 0
    rec = json.loads(out)
    assert [b["block"] for b in rec["blocks"]] == [1, 2, 3]
    assert set(rec["blocks"][0]["histogram"]) == {"1", "2"}
    assert sum(rec["blocks"][0]["histogram"]["1"]) == 9


def test_flops_command(capsys):
    code, out, _ = run_cli(["flops", "--json"], capsys)
    assert code == 0
    docs = [json.loads(line) for line in out.splitlines()]
    assert [d["prune_point"] for d in docs] == ["post_block", "mid_block"]
    assert abs(docs[0]["reduction"] - 0.31549) < 1e-4


def test_benchmark_and_init_archive(workspace, capsys):
    tmp, base, imgs = workspace
    code, out, _ = run_cli(["benchmark", "--config", base[3], "--keep-rates", "0.5", "--blocks", "1", "--n-images", "1", "--repeats", "1"], capsys)
    assert code == 0 and json.loads(out)["keep_rate"] == 0.5
    assert main(["init-archive", str(tmp / "r.entp"), "--config", base[3], "--seed", "1"]) == 0
    assert main(["init-archive", str(tmp / "s.entp"), "--config", base[3], "--seed", "1"]) == 0
    assert (tmp / "r.entp").read_bytes() == (tmp / "s.entp").read_bytes()


def test_module_entry_point(workspace):
    tmp, base, imgs = workspace
    r = subprocess.run([sys.executable, "-m", "entroprune", "classify", *base, imgs[0]], capture_output=True, text=True)
    assert r.returncode == 0 and json.loads(r.stdout)["path"] == imgs[0]


def test_pgm_input(workspace, capsys, toy3):
    tmp, base, imgs = workspace
    cfg = toy3.config
    if cfg.in_chans not in (1, 3):
        pytest.skip("PNM needs 1 or 3 channels")
    write_pnm(tmp / "x.pnm", np.zeros((cfg.image_size, cfg.image_size, cfg.in_chans), np.uint8))
    code, out, _ = run_cli(["classify", *base, str(tmp / "x.pnm")], capsys)
    assert code == 0
    np.testing.assert_allclose(json.loads(out)["probabilities"], forward(np.zeros((cfg.image_size,) * 2 + (cfg.in_chans,)), toy_params(toy3), cfg), atol=0, rtol=0)
