import csv
import shutil
import subprocess
import time

import numpy as np
import pytest

from anomaly_nav import cli
from anomaly_nav.dataset import PatchDataset, SyntheticSceneConfig, load_frame, render_frame, save_frame
from anomaly_nav.dense import read_mask_pgm
from anomaly_nav.models import Detector
from anomaly_nav.runconfig import parse_config_text, read_manifest


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def sortie(work):
    """Default 20-frame labelled synthetic set plus its frames on disk."""
    out = work / "sun.ands"
    assert run("synth", "--out", out, "--seed", 1, "--frames-dir", work / "frames") == 0
    return out


@pytest.fixture(scope="module")
def train_set(work):
    out = work / "sun_train.ands"
    assert run("synth", "--out", out, "--seed", 2, "--positives-only") == 0
    return out


@pytest.fixture(scope="module")
def ae_ckpt(work, train_set):
    out = work / "ae.ckpt"
    assert run("train", "--dataset", train_set, "--out", out, "--method", "ae", "--modalities", "RGB+D", "--pretrain-epochs", 1) == 0
    return out


@pytest.fixture(scope="module")
def nvp_ckpt(work, train_set, ae_ckpt):
    out = work / "nvp.ckpt"
    code = run(
        "train", "--dataset", train_set, "--out", out, "--regime", "fixed-features", "--pretrained", ae_ckpt,
        "--modalities", "RGB+D", "--epochs", 2, "--lr", 1e-2,
    )
    assert code == 0
    return out


# ---------------------------------------------------------------- synth


def test_synth_counts_and_manifest(sortie, capsys):
    ds = PatchDataset.load(sortie)
    assert int(np.sum(ds.labels == 1)) >= 500 and int(np.sum(ds.labels == 2)) >= 500
    man = read_manifest(sortie.with_name(sortie.name + ".manifest.json"))
    assert man.command == "synth" and man.seed == 1 and str(sortie) in man.outputs
    assert man.started <= man.finished


def test_synth_same_seed_same_file(work):
    a, b = work / "a.ands", work / "b.ands"
    for p in (a, b):
        assert run("synth", "--out", p, "--seed", 9, "--frames", 2) == 0
    assert a.read_bytes() == b.read_bytes()
    assert run("synth", "--out", work / "c.ands", "--seed", 10, "--frames", 2) == 0
    assert (work / "c.ands").read_bytes() != a.read_bytes()


def test_synth_without_anomalies(work, capsys):
    assert run("synth", "--out", work / "clean.ands", "--frames", 2, "--anomalies", "none") == 0
    assert "negatives=0" in capsys.readouterr().out
    assert not np.any(PatchDataset.load(work / "clean.ands").labels == 2)


def test_synth_rerun_from_manifest(work):
    first = work / "m1.ands"
    assert run("synth", "--out", first, "--seed", 4, "--frames", 2, "--condition", "rain") == 0
    man = read_manifest(first.with_name(first.name + ".manifest.json"))
    lines = []
    for k, v in man.config.items():
        if v is None:
            continue
        lines.append(f"{k} = {','.join(map(str, v)) if isinstance(v, list) else v}")
    (work / "m.cfg").write_text("\n".join(lines) + "\n")
    second = work / "m2.ands"
    assert run("synth", "--out", second, "--config", work / "m.cfg") == 0
    assert second.read_bytes() == first.read_bytes()


def test_synth_usage_errors(work):
    assert run("synth", "--out", work / "x.ands", "--anomalies", "dragon") == 2
    assert run("synth", "--out", work / "x.ands", "--condition", "snow") == 2
    assert run("synth", "--out", work / "x.ands", "--frames", 0) == 2


# ---------------------------------------------------------------- train


def test_regime_needs_pretrained(work, train_set):
    assert run("train", "--dataset", train_set, "--out", work / "n.ckpt", "--regime", "fixed-features") == 2
    assert not (work / "n.ckpt").exists()


def test_trained_checkpoint_readable(ae_ckpt, nvp_ckpt):
    det = Detector.load(nvp_ckpt)
    assert det.method == "nvp" and det.modality == "RGB+D"
    assert det.meta["config.regime"] == "fixed-features"
    assert (nvp_ckpt.with_suffix(".csv")).read_text().startswith("epoch,loss,seconds")
    assert nvp_ckpt.with_suffix(".png").stat().st_size > 0
    assert Detector.load(ae_ckpt).method == "ae"


def test_one_epoch_smoke_run(work, train_set):
    t0 = time.perf_counter()
    code = run("train", "--dataset", train_set, "--out", work / "smoke.ckpt", "--regime", "no-pretrain", "--epochs", 1)
    assert code == 0
    assert time.perf_counter() - t0 < 60


def test_config_file_and_flag_precedence(work, train_set):
    (work / "t.cfg").write_text("method = svdd-soft\nregime = no-pretrain\nepochs = 3\nmodalities = D\n")
    out = work / "cfg.ckpt"
    assert run("train", "--config", work / "t.cfg", "--dataset", train_set, "--out", out, "--epochs", 1) == 0
    det = Detector.load(out)
    assert (det.method, det.modality, det.meta["epochs_run"]) == ("svdd-soft", "D", "1")
    (work / "bad.cfg").write_text("colour = red\n")
    assert run("train", "--config", work / "bad.cfg", "--dataset", train_set, "--out", out) == 2
    (work / "junk.cfg").write_text("no equals sign here\n")
    assert run("train", "--config", work / "junk.cfg", "--dataset", train_set, "--out", out) == 3


def test_train_rejects_negatives_and_missing_data(work, sortie, train_set):
    assert run("train", "--dataset", sortie, "--out", work / "z.ckpt", "--method", "ae") == 2
    assert run("train", "--dataset", work / "nope.ands", "--out", work / "z.ckpt") == 2
    ds = PatchDataset.load(train_set)
    assert len(ds) >= 500 and np.all(ds.labels == 1)


def test_data_dir_env(work, train_set, monkeypatch):
    monkeypatch.setenv("ANAV_DATA_DIR", str(work))
    out = work / "env.ckpt"
    assert run("train", "--dataset", train_set.name, "--out", out, "--method", "ae", "--pretrain-epochs", 1, "--modalities", "D") == 0


def test_incremental_stages(work, train_set, ae_ckpt):
    rain = work / "rain.ands"
    assert run("synth", "--out", rain, "--frames", 2, "--condition", "rain", "--seed", 3, "--positives-only") == 0
    out = work / "inc"
    code = run(
        "train", "--dataset", train_set, "--out", out, "--incremental", rain, rain, "--regime", "fixed-features",
        "--pretrained", ae_ckpt, "--modalities", "RGB+D", "--batch", 100,
    )
    assert code == 0
    assert sorted(p.name for p in out.glob("stage*.ckpt")) == ["stage0.ckpt", "stage1.ckpt", "stage2.ckpt"]
    assert (out / "training.png").exists()


# ---------------------------------------------------------------- eval


def test_eval_single_checkpoint(work, sortie, nvp_ckpt, capsys):
    out = work / "report.csv"
    assert run("eval", "--checkpoint", nvp_ckpt, "--test", sortie, "--out", out, "--roc") == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "method,regime,modality,seed_count,auroc_mean,auroc_std,tpr_at_5fpr_mean,tpr_at_5fpr_std"
    assert len(lines) == 2
    row = dict(zip(lines[0].split(","), lines[1].split(",")))
    assert row["seed_count"] == "1" and float(row["auroc_std"]) == 0.0
    (roc,) = list(work.glob("report_roc_*.csv"))
    arr = np.loadtxt(roc, delimiter=",", skiprows=1)
    area = np.sum(np.diff(arr[:, 1]) * (arr[1:, 2] + arr[:-1, 2]) / 2)
    assert abs(area - float(row["auroc_mean"])) < 1e-9
    assert out.with_suffix(".png").exists()
    assert out.with_name(out.name + ".manifest.json").exists()


def test_eval_matrix_cell(work, sortie, train_set):
    out = work / "matrix.csv"
    code = run(
        "eval", "--matrix", "--dataset", train_set, "--test", sortie, "--out", out, "--rows", "D",
        "--columns", "ae", "--repeats", 1, "--pretrain-epochs", 1,
    )
    assert code == 0
    (row,) = list(csv.DictReader(out.read_text().splitlines()))
    assert (row["method"], row["regime"], row["modality"], row["seed_count"]) == ("ae", "none", "D", "1")


def test_eval_needs_inputs(work, sortie):
    assert run("eval", "--test", sortie, "--out", work / "e.csv") == 2
    assert run("eval", "--matrix", "--test", sortie, "--out", work / "e.csv") == 2


def test_damaged_checkpoint_exit_code(work, sortie, nvp_ckpt):
    bad = work / "bad.ckpt"
    bad.write_bytes(nvp_ckpt.read_bytes()[:100])
    assert run("eval", "--checkpoint", bad, "--test", sortie, "--out", work / "e.csv") == 3


# ---------------------------------------------------------------- infer and map


def test_small_frame_gives_one_cell(work, nvp_ckpt):
    fr = render_frame(SyntheticSceneConfig(seed=2, width=32, height=32, anomalies=()), 0)
    fp = save_frame(fr, work / "tiny.npz")
    assert run("infer", "--checkpoint", nvp_ckpt, "--frames", fp, "--out-dir", work / "tiny", "--threshold", 0) == 0
    mask = read_mask_pgm(work / "tiny" / "tiny.pgm")
    assert mask.shape == (1, 1)
    assert (work / "tiny" / "tiny.png").exists() and (work / "tiny" / "tiny.pgm.manifest.json").exists()


def test_infer_needs_intrinsics(work, nvp_ckpt):
    np.savez(work / "noK.npz", rgb=np.zeros((32, 32, 3)), depth=np.ones((32, 32)), R=np.eye(3))
    assert run("infer", "--checkpoint", nvp_ckpt, "--frames", work / "noK.npz", "--out-dir", work / "o", "--threshold", 1) == 2


def test_infer_needs_threshold(work, nvp_ckpt):
    frame = sorted((work / "frames").glob("*.npz"))[0]
    assert run("infer", "--checkpoint", nvp_ckpt, "--frames", frame, "--out-dir", work / "o") == 2


def test_infer_calibrated_then_map(work, sortie, nvp_ckpt, capsys):
    frames = sorted((work / "frames").glob("*.npz"))[:2]
    out_dir = work / "masks"
    assert run("infer", "--checkpoint", nvp_ckpt, "--frames", *frames, "--out-dir", out_dir, "--calibrate", sortie) == 0
    masks = [out_dir / f"{f.stem}.pgm" for f in frames]
    man = read_manifest(masks[0].with_name(masks[0].name + ".manifest.json"))
    assert isinstance(man.config["threshold"], float)
    h, w = load_frame(frames[0]).depth.shape
    assert read_mask_pgm(masks[0]).shape == ((h - 32) // 4 + 1, (w - 32) // 4 + 1)
    grid = work / "grid.csv"
    code = run("map", "--masks", *masks, "--frames", *frames, "--out", grid, "--cell-size", 0.25, "--xyz", work / "pts.xyz")
    assert code == 0
    lines = grid.read_text().splitlines()
    assert lines[0] == "x_index,y_index,score,count"
    known = [l for l in lines[1:] if not l.split(",")[2] == "nan"]
    assert known and all(int(l.split(",")[3]) > 0 for l in known)
    assert (work / "pts.xyz").stat().st_size > 0 and grid.with_suffix(".png").exists()
    assert run("map", "--masks", masks[0], "--frames", *frames, "--out", grid) == 2


# ---------------------------------------------------------------- verify


def test_verify_flow_suite(capsys):
    assert run("verify", "--suite", "flow") == 0
    out = capsys.readouterr().out
    assert "flow" in out and "grad" not in out.split("checks passed")[0].lower().replace("flow", "")


def test_verify_failure_exit(monkeypatch, capsys):
    from anomaly_nav import verify

    def broken(suites, seed=0):
        return [verify.Check("flow", "forced", False, "injected failure")]

    monkeypatch.setattr(verify, "run", broken)
    assert run("verify") == 1
    assert "0/1 checks passed" in capsys.readouterr().out


def test_console_entry_point():
    exe = shutil.which("anomaly-nav")
    if exe is None:
        pytest.skip("console script not installed")
    res = subprocess.run([exe, "--version"], capture_output=True, text=True, timeout=60)
    assert res.returncode == 0 and "anomaly-nav" in res.stdout
    res = subprocess.run([exe, "train"], capture_output=True, text=True, timeout=60)
    assert res.returncode == 2


def test_config_parser():
    assert parse_config_text("# c\nlr = 0.1  # inline\npretrain-epochs=3\n") == {"lr": "0.1", "pretrain_epochs": "3"}
