"""``anomaly-nav``: synthesize data, train, evaluate, infer masks, build maps, verify.

Settings come from built-in defaults, then an optional ``--config`` file of
flat ``key=value`` lines, then command-line flags (highest precedence).
Exit codes: 0 success, 1 failed verification, 2 usage, 3 data/format, 4 numeric.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
import warnings
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import AnomalyNavError, UsageError
from .runconfig import RunManifest, load_config, resolve_input

log = logging.getLogger("anomaly_nav")


# --------------------------------------------------------------------------
# argument plumbing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value file; flags override its values")
    p.add_argument("--seed", type=int, help="run seed (default 0)")
    p.add_argument("--workers", type=int, help="worker processes for parallel parts (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=("ae", "svdd-soft", "svdd-hard", "nvp"))
    p.add_argument("--regime", choices=("no-pretrain", "pretrained", "fixed-features"))
    p.add_argument("--modalities", help='modality code, e.g. "RGB+G+N"')
    p.add_argument("--epochs", type=int)
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--nu", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="anomaly-nav", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic sortie and write its patch container")
    _common(p)
    p.add_argument("--out", required=True, help="output dataset container (.ands)")
    p.add_argument("--frames", type=int, help="number of frames (default 20)")
    p.add_argument("--condition", help="sun, twilight, rain, wet or fire (default sun)")
    p.add_argument("--anomalies", help='comma list of anomaly kinds, or "none"')
    p.add_argument("--positives-per-frame", type=int)
    p.add_argument("--negatives-per-frame", type=int)
    p.add_argument("--frame-offset", type=int, help="index of the first frame (default 0)")
    p.add_argument("--modalities", help="channels to store (default all)")
    p.add_argument("--frames-dir", help="also save every frame as .npz here")
    p.add_argument("--positives-only", action="store_true", default=None, help="write a training container (no negatives)")

    p = sub.add_parser("train", help="train a detector (or the autoencoder) on positive patches")
    _common(p)
    _train_flags(p)
    p.add_argument("--dataset", required=True, help="training container")
    p.add_argument("--out", required=True, help="checkpoint path (a directory with --incremental)")
    p.add_argument("--pretrained", help="autoencoder checkpoint for pretrained / fixed-features")
    p.add_argument("--incremental", nargs="+", metavar="SET", help="condition containers added one stage at a time")

    p = sub.add_parser("eval", help="evaluate checkpoints, or train-and-evaluate a modality x method matrix")
    _common(p)
    _train_flags(p)
    p.add_argument("--checkpoint", nargs="+", help="checkpoints to score")
    p.add_argument("--test", required=True, help="labelled test container")
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--roc", action="store_true", help="also dump threshold,fpr,tpr CSVs")
    p.add_argument("--matrix", action="store_true", help="train every cell instead of loading checkpoints")
    p.add_argument("--dataset", help="training container (with --matrix)")
    p.add_argument("--repeats", type=int, help="seeds per matrix cell (default 10)")
    p.add_argument("--rows", help='comma list of modality codes for --matrix (default: all 13 rows)')
    p.add_argument("--columns", help='comma list of method:regime for --matrix (default: all 8)')

    p = sub.add_parser("infer", help="dense anomaly masks for full frames")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", nargs="+", required=True, help="frame archives (.npz)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--calibrate", help="container whose positives set the threshold")
    p.add_argument("--target-fpr", type=float, help="calibration false-alarm rate (default 0.05)")

    p = sub.add_parser("map", help="project masks to 3D and rasterize a 2D grid")
    _common(p)
    p.add_argument("--masks", nargs="+", required=True, help="PGM masks written by infer")
    p.add_argument("--frames", nargs="+", required=True, help="matching frame archives, same order")
    p.add_argument("--out", required=True, help="grid CSV")
    p.add_argument("--cell-size", type=float, help="metres (default 0.1)")
    p.add_argument("--aggregation", choices=("max", "mean"))
    p.add_argument("--xyz", help="also write the scored point cloud here")

    p = sub.add_parser("verify", help="run the built-in oracle suites")
    _common(p)
    p.add_argument("--suite", action="append", choices=("grad", "flow", "auroc", "geometry"))
    return ap


def resolve(args: argparse.Namespace, defaults: dict[str, object], skip=()) -> dict[str, object]:
    """defaults < config file < flags, keyed by snake_case option names."""
    out = dict(defaults)
    if getattr(args, "config", None):
        for k, v in load_config(args.config).items():
            if k not in out:
                raise UsageError(f"config key {k!r} is not valid for {args.command}")
            out[k] = v
    for k, v in vars(args).items():
        if k in out and k not in skip and v is not None:
            out[k] = v
    return out


def _manifest(args, cfg, inputs, outputs) -> RunManifest:
    seed = cfg.get("seed")
    return RunManifest(
        command=args.command,
        argv=list(sys.argv),
        config={k: v for k, v in cfg.items()},
        seed=int(seed) if seed is not None else None,
        inputs=[str(p) for p in inputs],
        outputs=[str(p) for p in outputs],
    )


def _load_dataset(path):
    from .dataset import PatchDataset

    p = resolve_input(path)
    if not p.exists():
        raise UsageError(f"dataset {path} not found (ANAV_DATA_DIR is consulted for relative paths)")
    return PatchDataset.load(p), p


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .dataset import ANOMALIES, SyntheticSceneConfig, save_frame, synth_generate
    from .modalities import ALL

    scene_defaults = {f.name: getattr(SyntheticSceneConfig(), f.name) for f in fields(SyntheticSceneConfig)}
    defaults = dict(scene_defaults, frames=20, frame_offset=0, modalities=ALL, frames_dir=None, positives_only=False, workers=1)
    cfg = resolve(args, defaults)
    anomalies = cfg["anomalies"]
    if isinstance(anomalies, str):
        anomalies = () if anomalies.strip().lower() in ("", "none") else tuple(a.strip() for a in anomalies.split(","))
    bad = [a for a in anomalies if a not in ANOMALIES + ("fire",)]
    if bad:
        raise UsageError(f"unknown anomaly kind(s) {bad}; valid: {', '.join(ANOMALIES + ('fire',))}")
    cfg["anomalies"] = tuple(anomalies)
    scene_kw = {}
    for f in fields(SyntheticSceneConfig):
        v = cfg[f.name]
        d = scene_defaults[f.name]
        if isinstance(d, tuple) and isinstance(v, str):
            v = tuple(type(d[0])(x) for x in v.split(",")) if d else tuple(x for x in v.split(",") if x)
        elif isinstance(d, bool):
            v = str(v).lower() in ("1", "true", "yes")
        elif isinstance(d, (int, float)) and not isinstance(v, (int, float)):
            try:
                v = type(d)(v)
            except ValueError:
                raise UsageError(f"{f.name}: cannot parse {v!r}") from None
        scene_kw[f.name] = v
    condition = str(scene_kw.pop("condition"))
    explicit = {k for k in scene_kw if scene_kw[k] != scene_defaults[k]}
    try:
        scene = SyntheticSceneConfig.for_condition(condition, **{k: scene_kw[k] for k in explicit})
    except KeyError:
        raise UsageError(f"unknown condition {condition!r}") from None
    scene = scene.replace(seed=int(cfg["seed"]))
    n = int(cfg["frames"])
    if n < 1:
        raise UsageError("--frames must be >= 1")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sortie = synth_generate(scene, n, int(cfg["frame_offset"]))
    positives_only = str(cfg["positives_only"]).lower() in ("1", "true", "yes")
    cfg["positives_only"] = positives_only
    ds = sortie.dataset(include_negatives=not positives_only)
    if cfg["modalities"] != ALL:
        ds = ds.select_modality(str(cfg["modalities"]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save(out)
    outputs = [out]
    if cfg["frames_dir"]:
        fd = Path(cfg["frames_dir"])
        fd.mkdir(parents=True, exist_ok=True)
        for fr in sortie.frames:
            p = save_frame(fr, fd / f"frame_{fr.frame_id:05d}.npz")
            outputs.append(p)
    cfg["anomalies"] = ",".join(cfg["anomalies"]) or "none"
    _manifest(args, cfg, [], outputs).write_beside(out)
    print(f"positives={len(sortie.positives)} negatives={len(sortie.negatives)} records={len(ds)} -> {out}")
    return 0


def _train_config(cfg):
    from .trainer import TrainConfig

    keys = {f.name for f in fields(TrainConfig)}
    values = {k: cfg[k] for k in keys if k in cfg and cfg[k] is not None}
    if "modalities" in cfg and cfg["modalities"] is not None:
        values["modality"] = cfg["modalities"]
    return TrainConfig.from_mapping(values)


def _train_defaults():
    from .trainer import TrainConfig

    d = asdict(TrainConfig())
    d["regime"] = None
    d["modalities"] = d.pop("modality")
    d["workers"] = 1
    return d


def cmd_train(args) -> int:
    from .models import Detector
    from .plotting import plot_training
    from .trainer import incremental_train, train

    defaults = dict(_train_defaults(), pretrained=None)
    cfg = resolve(args, defaults)
    tc = _train_config(cfg)
    ds, ds_path = _load_dataset(args.dataset)
    inputs = [ds_path]
    pre = None
    if cfg["pretrained"]:
        pp = resolve_input(cfg["pretrained"])
        pre = Detector.load(pp)
        inputs.append(pp)
    elif tc.needs_pretrained:
        raise UsageError(f"--regime {tc.regime} requires --pretrained CHECKPOINT")
    cfg_out = dict(cfg, **{k: v for k, v in asdict(tc).items()})
    t0 = time.perf_counter()
    if args.incremental:
        sets = []
        for s in args.incremental:
            d, p = _load_dataset(s)
            sets.append(d)
            inputs.append(p)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        stages = incremental_train(ds, sets, tc, pre, out_dir)
        for det, rep in stages:
            _manifest(args, cfg_out, inputs, [rep.checkpoint]).write_beside(rep.checkpoint)
        plot_training({r.label: r.losses for _, r in stages}, out_dir / "training.png", "mean NLL")
        print(f"{len(stages)} stage checkpoints -> {out_dir} ({time.perf_counter() - t0:.1f}s)")
        return 0
    out = Path(args.out)
    det, rep = train(ds, tc, pre, out)
    png = plot_training({f"{tc.method} {tc.regime}": rep.losses}, out.with_suffix(".png"))
    _manifest(args, cfg_out, inputs, [out, out.with_suffix(".csv"), png]).write_beside(out)
    final = rep.losses[-1] if rep.losses else float("nan")
    print(f"trained {tc.method}/{tc.regime}/{tc.modality}: {rep.epochs} epochs, final loss {final:.6g} -> {out} ({time.perf_counter() - t0:.1f}s)")
    return 0


def _regime_of(det) -> str:
    return det.meta.get("config.regime", "none" if det.method == "ae" else "unknown")


def cmd_eval(args) -> int:
    from .eval import METHOD_COLUMNS, MODALITY_ROWS, CellResult, auroc, eval_matrix, report_csv, roc_points, score_dataset, tpr_at_fpr
    from .models import Detector
    from .plotting import plot_matrix, plot_roc

    defaults = dict(_train_defaults(), repeats=10, rows=None, columns=None)
    cfg = resolve(args, defaults)
    test, test_path = _load_dataset(args.test)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    inputs, outputs = [test_path], [out]
    if args.matrix:
        if not args.dataset:
            raise UsageError("--matrix needs --dataset (training container)")
        train_set, tp = _load_dataset(args.dataset)
        inputs.append(tp)
        rows = MODALITY_ROWS if not cfg["rows"] else tuple(r.strip() for r in str(cfg["rows"]).split(","))
        cols = METHOD_COLUMNS
        if cfg["columns"]:
            cols = tuple(tuple(c.strip().split(":", 1)) if ":" in c else (c.strip(), "none") for c in str(cfg["columns"]).split(","))
        tc = _train_config({**cfg, "method": "nvp", "regime": None})
        cells = eval_matrix(train_set, test, tc, rows, cols, int(cfg["repeats"]), int(cfg["workers"] or 1))
        out.write_text(report_csv(cells))
        outputs.append(plot_matrix(cells, out.with_suffix(".png")))
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint (or --matrix with --dataset)")
        groups: dict[tuple[str, str, str], CellResult] = {}
        curves = {}
        for i, ck in enumerate(args.checkpoint):
            cp = resolve_input(ck)
            det = Detector.load(cp)
            inputs.append(cp)
            s, l = score_dataset(det, test)
            key = (det.method, _regime_of(det), det.modality)
            cell = groups.setdefault(key, CellResult(*key, [], []))
            cell.aurocs.append(auroc(s, l))
            cell.tprs.append(tpr_at_fpr(s, l))
            curve = roc_points(s, l)
            curves[f"{Path(ck).stem}: {'/'.join(key)}"] = curve
            if args.roc:
                rp = out.with_name(f"{out.stem}_roc_{i}_{Path(ck).stem}.csv")
                rp.write_text(curve.to_csv())
                outputs.append(rp)
        out.write_text(report_csv(groups.values()))
        outputs.append(plot_roc(curves, out.with_suffix(".png")))
    _manifest(args, cfg, inputs, outputs).write_beside(out)
    print(out.read_text(), end="")
    return 0


def cmd_infer(args) -> int:
    from .dataset import load_frame
    from .dense import calibrate_threshold, infer_mask, upsample_mask, write_mask_pgm
    from .eval import score_dataset
    from .modalities import build_stack
    from .models import Detector
    from .plotting import plot_mask

    cfg = resolve(args, {"threshold": None, "calibrate": None, "target_fpr": 0.05, "seed": None, "workers": 1})
    ck = resolve_input(args.checkpoint)
    det = Detector.load(ck)
    inputs = [ck]
    if cfg["calibrate"]:
        cal, cp = _load_dataset(cfg["calibrate"])
        inputs.append(cp)
        safe = cal.positives()
        s, _ = score_dataset(det, safe)
        threshold = calibrate_threshold(s, float(cfg["target_fpr"]))
        log.info("calibrated threshold %.6g at target FPR %s on %d safe patches", threshold, cfg["target_fpr"], len(s))
    elif cfg["threshold"] is not None:
        threshold = float(cfg["threshold"])
    else:
        raise UsageError("infer needs --threshold or --calibrate")
    cfg["threshold"] = threshold
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ck_id = ck.name
    for f in args.frames:
        fp = resolve_input(f)
        if not fp.exists():
            raise UsageError(f"frame {f} not found")
        frame = load_frame(fp)
        t0 = time.perf_counter()
        stack = build_stack(frame.rgb, frame.depth, frame.K, frame.R, det.modality, frame.valid)
        mask = infer_mask(stack, det, threshold, frame_id=str(frame.frame_id), checkpoint_id=ck_id)
        dt = time.perf_counter() - t0
        pgm = write_mask_pgm(mask, out_dir / f"{fp.stem}.pgm")
        h, w = frame.depth.shape
        png = plot_mask(frame.rgb, upsample_mask(mask.scores, h, w), upsample_mask(mask.binary, h, w), pgm.with_suffix(".png"))
        _manifest(args, cfg, inputs + [fp], [pgm, pgm.with_suffix(".meta"), png]).write_beside(pgm)
        print(f"{fp.name}: {mask.shape[0]}x{mask.shape[1]} cells, {int(mask.binary.sum())} above {threshold:.6g} ({dt:.2f}s) -> {pgm}")
    return 0


def cmd_map(args) -> int:
    from .dataset import load_frame
    from .dense import PointScoreCloud, project_points, rasterize, read_mask_pgm, upsample_mask, write_grid_csv, write_xyz
    from .plotting import plot_grid

    cfg = resolve(args, {"cell_size": 0.1, "aggregation": "max", "xyz": None, "seed": None, "workers": 1})
    if len(args.masks) != len(args.frames):
        raise UsageError(f"{len(args.masks)} masks but {len(args.frames)} frames")
    pts, scs, inputs = [], [], []
    for m, f in zip(args.masks, args.frames):
        mp, fp = resolve_input(m), resolve_input(f)
        mask = read_mask_pgm(mp)
        frame = load_frame(fp)
        h, w = frame.depth.shape
        cloud = project_points(upsample_mask(mask.scores, h, w), frame.depth, frame.K, frame.R, frame.valid)
        pts.append(cloud.points)
        scs.append(cloud.scores)
        inputs += [mp, fp]
    cloud = PointScoreCloud(np.concatenate(pts), np.concatenate(scs))
    grid = rasterize(cloud, float(cfg["cell_size"]), str(cfg["aggregation"]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    outputs = [write_grid_csv(grid, out), plot_grid(grid, out.with_suffix(".png"))]
    if cfg["xyz"]:
        outputs.append(write_xyz(cloud, Path(cfg["xyz"])))
    _manifest(args, cfg, inputs, outputs).write_beside(out)
    ny, nx = grid.score.shape
    print(f"{len(cloud)} points -> {nx}x{ny} grid, {int(grid.known.sum())} known cells -> {out}")
    return 0


def cmd_verify(args) -> int:
    from . import verify

    cfg = resolve(args, {"seed": 0, "workers": 1, "suite": None}, skip=("suite",))
    suites = tuple(dict.fromkeys(args.suite)) if args.suite else verify.SUITES
    checks = verify.run(suites, seed=int(cfg["seed"]))
    print(verify.format_table(checks))
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return 1 if failed else 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "map": cmd_map,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except AnomalyNavError as e:
        print(f"anomaly-nav {args.command}: error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"anomaly-nav {args.command}: error: {e}", file=sys.stderr)
        return UsageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
