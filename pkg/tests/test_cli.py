import json
import shutil

import numpy as np
import pytest

from nrfusion.benchmark import load_dataset, load_sequence
from nrfusion.cli import METRIC_FIELDS, main
from nrfusion.geometry import backproject
from nrfusion.pipeline import read_dense_matches

FAST = ["--frames", "4", "--solver.gn_iterations", "3"]


@pytest.fixture(scope="module")
def seq(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    out = root / "seq"
    rc = main(["synth", "--scene", "bending-cylinder", "--out", str(out), "--frames", "5", "--width", "160",
               "--height", "120", "--pairs", "2", "--matches-per-pair", "8", "--heatmaps"])
    assert rc == 0
    return out


def test_synth_layout(seq):
    assert len(list((seq / "depth").glob("*.png"))) == 5
    assert len(list((seq / "gt").glob("vertices_*.npy"))) == 5
    assert (seq / "heatmaps" / "manifest.json").exists()
    assert len(json.loads((seq / "heatmaps" / "manifest.json").read_text())["entries"]) > 0


def test_reconstruct_outputs(seq, tmp_path):
    out = tmp_path / "rec"
    assert main(["reconstruct", "--sequence", str(seq), "--out", str(out), *FAST]) == 0
    assert len(list((out / "meshes").glob("*.ply"))) == 4
    assert len(list((out / "graphs").glob("*.json"))) == 4
    for name in ("trace.csv", "energy.png", "summary.json", "config.toml", "canonical.ply"):
        assert (out / name).exists(), name
    summary = json.loads((out / "summary.json").read_text())
    assert summary["frames"] == 4 and summary["learned_constraints"][1] > 0
    assert np.isfinite(summary["deformation_error_cm"])


def test_reconstruct_ablation_flag(seq, tmp_path):
    out = tmp_path / "abl"
    assert main(["reconstruct", "--sequence", str(seq), "--out", str(out), "--weights.lambda_learned", "0",
                 *FAST]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["learned_constraints"] == [0, 0, 0, 0]
    assert "lambda_learned = 0.0" in (out / "config.toml").read_text()


def test_reconstruct_is_deterministic(seq, tmp_path):
    for name in ("a", "b"):
        assert main(["reconstruct", "--sequence", str(seq), "--out", str(tmp_path / name), "--threads", "2",
                     *FAST]) == 0
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()


def test_help_lists_config_keys(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["reconstruct", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for key in ("--weights.lambda_learned", "--solver.pcg_tolerance", "--volume.voxel_size", "--threads",
                "--seed", "--provider.kind", "--filter.depth_threshold"):
        assert key in text


def test_exit_codes_and_no_partial_output(seq, tmp_path, capsys):
    out = tmp_path / "never"
    with pytest.raises(SystemExit) as exc:
        main(["reconstruct", "--sequence", str(seq), "--out", str(out), "--bogus"])
    assert exc.value.code == 1
    assert main(["reconstruct", "--sequence", str(seq), "--out", str(out), "--weights.lambda_learned",
                 "lots"]) == 1
    assert main(["reconstruct", "--sequence", str(tmp_path / "nope"), "--out", str(out)]) == 2
    broken = tmp_path / "broken"
    shutil.copytree(seq, broken)
    (broken / "mask" / "000000.png").unlink()
    assert main(["reconstruct", "--sequence", str(broken), "--out", str(out), *FAST]) == 2
    assert main(["synth", "--scene", "teapot", "--out", str(out)]) == 1
    assert not out.exists()
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".never")]


def test_align_pair_identical_frames(seq, tmp_path):
    out = tmp_path / "al"
    assert main(["align-pair", "--sequence", str(seq), "--source", "0", "--target", "0", "--out", str(out),
                 "--align.gn_iterations", "4"]) == 0
    px, m, ok = read_dense_matches(out / "matches.bin")
    f = load_sequence(seq).load_frame(0)
    src = np.array([backproject(p, f.depth[p[1], p[0]], f.intrinsics) for p in px])
    assert ok.all() and np.max(np.linalg.norm(m - src, axis=1)) < 1e-3
    assert (out / "alignment.png").exists()


def test_align_pair_sparse_handling(seq, tmp_path, caplog):
    pair = sorted((seq / "pairs").glob("*.json"))[0]
    ann = json.loads(pair.read_text())
    out = tmp_path / "sp"
    assert main(["align-pair", "--sequence", str(seq), "--source", "0", "--target", str(ann["target_frame"]),
                 "--sparse", str(pair), "--out", str(out), "--align.gn_iterations", "3"]) == 0
    weights = json.loads((out / "sample_weights.json").read_text())
    assert len(weights["weights"]) == len(ann["matches"])
    assert sum(weights["weights"]) == pytest.approx(1.0)

    with caplog.at_level("WARNING"):
        assert main(["align-pair", "--sequence", str(seq), "--source", "0", "--target", "1",
                     "--sparse", str(tmp_path / "missing.json"), "--out", str(tmp_path / "sp2"),
                     "--align.gn_iterations", "2"]) == 0
    assert "not found" in caplog.text
    assert json.loads((tmp_path / "sp2" / "summary.json").read_text())["sparse_matches"] == 0


@pytest.fixture()
def dataset(seq, tmp_path):
    root = tmp_path / "ds"
    shutil.copytree(seq, root / "test" / "seq")
    return root


def _perfect_predictions(dataset, pred_root):
    seq = load_dataset(dataset).sequences[0]
    mdir = pred_root / seq.name / "matches"
    mdir.mkdir(parents=True)
    for ann in seq.pairs:
        (mdir / f"{ann.pair_id}.json").write_text(json.dumps({"pred_uv": ann.target_uv.tolist(),
                                                              "pred_xyz": ann.target_xyz.tolist()}))
    return seq


def test_evaluate_perfect_predictions(dataset, tmp_path):
    preds = tmp_path / "pred"
    _perfect_predictions(dataset, preds)
    out = tmp_path / "report"
    assert main(["evaluate", "--dataset", str(dataset), "--predictions", str(preds), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert tuple(report) == METRIC_FIELDS
    assert report["accuracy_2d"] == 1.0 and report["accuracy_3d"] == 1.0
    assert report["mean_2d_error_px"] == 0.0
    assert report["deformation_error_cm"] is None
    header = (out / "report.csv").read_text().splitlines()[0].split(",")
    assert tuple(header) == METRIC_FIELDS
    assert (out / "matching_error_2d.png").exists()


def test_evaluate_matches_brute_force(dataset, tmp_path):
    preds = tmp_path / "pred"
    seq = _perfect_predictions(dataset, preds)
    rng = np.random.default_rng(4)
    errs2, errs3 = [], []
    for ann in seq.pairs:
        uv = ann.target_uv + rng.normal(0, 15, ann.target_uv.shape)
        xyz = ann.target_xyz + rng.normal(0, 0.04, ann.target_xyz.shape)
        (preds / seq.name / "matches" / f"{ann.pair_id}.json").write_text(
            json.dumps({"pred_uv": uv.tolist(), "pred_xyz": xyz.tolist()}))
        for a, b in zip(uv, ann.target_uv):
            errs2.append(((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2) ** 0.5)
        for a, b in zip(xyz, ann.target_xyz):
            errs3.append(sum((x - y) ** 2 for x, y in zip(a, b)) ** 0.5)
    out = tmp_path / "report"
    assert main(["evaluate", "--dataset", str(dataset), "--predictions", str(preds), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["mean_2d_error_px"] == pytest.approx(sum(errs2) / len(errs2), rel=1e-12)
    assert report["mean_3d_error_m"] == pytest.approx(sum(errs3) / len(errs3), rel=1e-12)
    assert report["accuracy_2d"] == pytest.approx(sum(e <= 20 for e in errs2) / len(errs2))
    assert report["accuracy_3d"] == pytest.approx(sum(e <= 0.05 for e in errs3) / len(errs3))


def test_evaluate_reconstruction_and_heatmaps(dataset, seq, tmp_path):
    preds = tmp_path / "pred" / "seq"
    assert main(["reconstruct", "--sequence", str(seq), "--out", str(preds), "--frames", "5",
                 "--solver.gn_iterations", "3"]) == 0
    shutil.copytree(seq / "heatmaps", preds / "heatmaps")
    out = tmp_path / "report"
    assert main(["evaluate", "--dataset", str(dataset), "--predictions", str(preds.parent), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert all(report[k] is not None for k in METRIC_FIELDS)
    # zero-noise oracle heatmaps peak on the rounded ground-truth pixel
    assert report["mean_2d_error_px"] <= 0.75 and report["accuracy_2d"] == 1.0
    assert report["deformation_error_cm"] < 2.0


def test_losses_eval_and_export(seq, tmp_path, capsys):
    assert main(["losses", "eval", "--heatmaps", str(seq / "heatmaps"), "--sequence", str(seq),
                 "--out", str(tmp_path / "l.json")]) == 0
    losses = json.loads((tmp_path / "l.json").read_text())
    assert losses["count"] > 0 and all(np.isfinite(losses[k]) for k in ("L_H", "L_D", "L_V", "L"))
    assert losses["L"] == pytest.approx(losses["L_H"] + 100 * losses["L_D"] + losses["L_V"], rel=1e-9)
    out = tmp_path / "hm"
    assert main(["export-heatmaps", "--sequence", str(seq), "--out", str(out), "--downsample", "2"]) == 0
    entries = json.loads((out / "manifest.json").read_text())["entries"]
    assert len(entries) == len(json.loads((seq / "heatmaps" / "manifest.json").read_text())["entries"])
