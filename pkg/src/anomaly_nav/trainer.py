"""Training regimes, autoencoder pretraining and staged (incremental) training.

All randomness flows from ``TrainConfig.seed`` through one ``SeedSequence``:
the first child initialises weights, the second shuffles batches.  With a
single BLAS thread the same config and data reproduce every checkpoint byte.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import grad as G
from .dataset import NEGATIVE, PatchDataset
from .errors import TrainingError, UsageError
from .models import FEATURE_DIM, METHODS, Detector, fit_normalization, initial_radius, svdd_init_center
from .modalities import canonical, channel_count

log = logging.getLogger(__name__)

REGIMES = ("no-pretrain", "pretrained", "fixed-features")
INCREMENTAL_EPOCHS = 10


@dataclass
class TrainConfig:
    method: str = "nvp"
    regime: str | None = None  # resolved: "none" for ae, "pretrained" otherwise
    modality: str = "RGB+G+N"
    pretrain_epochs: int = 350
    epochs: int = 150
    lr: float = 1e-4
    batch: int = 200
    seed: int = 0
    nu: float = 0.1
    incremental_epochs: int = INCREMENTAL_EPOCHS

    def __post_init__(self):
        self.validate()

    def validate(self) -> "TrainConfig":
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.method == "ae":
            if self.regime not in (None, "none"):
                raise UsageError("the autoencoder has no training regime; drop --regime")
            self.regime = "none"
        else:
            if self.regime is None or self.regime == "none":
                self.regime = "pretrained"
            if self.regime not in REGIMES:
                raise UsageError(f"unknown regime {self.regime!r}; choose from {', '.join(REGIMES)}")
        if self.method == "svdd-hard" and self.regime == "fixed-features":
            raise UsageError("svdd-hard with fixed features has no trainable parameters")
        self.modality = canonical(self.modality)
        for name in ("pretrain_epochs", "epochs", "incremental_epochs"):
            if int(getattr(self, name)) < 0:
                raise UsageError(f"{name} must be >= 0")
        if int(self.batch) < 1:
            raise UsageError("batch must be >= 1")
        if not float(self.lr) > 0:
            raise UsageError("lr must be positive")
        if not 0.0 < float(self.nu) <= 1.0:
            raise UsageError("nu must lie in (0, 1]")
        return self

    @property
    def needs_pretrained(self) -> bool:
        return self.regime in ("pretrained", "fixed-features")

    def replace(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d.update(kw)
        if "method" in kw and "regime" not in kw:
            d["regime"] = None
        return TrainConfig(**d)

    def as_meta(self) -> dict[str, str]:
        return {f"config.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "TrainConfig":
        """Build from flat string values (config files, CLI); unknown keys are errors."""
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            name = key.replace("-", "_")
            if name not in types:
                raise UsageError(f"unknown training config key {key!r}")
            if raw is None:
                continue
            kind = types[name]
            try:
                if "int" in str(kind):
                    kw[name] = int(raw)
                elif "float" in str(kind):
                    kw[name] = float(raw)
                else:
                    kw[name] = str(raw)
            except ValueError:
                raise UsageError(f"config key {key!r}: cannot parse {raw!r}") from None
        return cls(**kw)


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    checkpoint: Path | None = None
    label: str = "train"

    @property
    def epochs(self) -> int:
        return len(self.losses)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "seconds"])
        for i, (l, s) in enumerate(zip(self.losses, self.seconds), start=1):
            w.writerow([i, repr(float(l)), f"{s:.3f}"])
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(self.to_csv())
        tmp.replace(path)
        return path

    @classmethod
    def read_csv(cls, path) -> "TrainReport":
        rows = list(csv.DictReader(Path(path).read_text().splitlines()))
        return cls([float(r["loss"]) for r in rows], [float(r["seconds"]) for r in rows])


# --------------------------------------------------------------------------


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init, shuffle = np.random.SeedSequence(int(seed)).spawn(2)
    return np.random.default_rng(init), np.random.default_rng(shuffle)


def _training_data(dataset: PatchDataset, modality: str) -> np.ndarray:
    if len(dataset) == 0:
        raise UsageError("training set is empty")
    if np.any(dataset.labels == NEGATIVE):
        raise UsageError("training set contains negative records; one-class training uses positives only")
    if dataset.modality != modality:
        dataset = dataset.select_modality(modality)
    return dataset.data


def run_epochs(
    params: Mapping[str, G.Tensor],
    loss_fn: Callable[[np.ndarray], G.Tensor],
    data: np.ndarray,
    epochs: int,
    batch: int,
    lr: float,
    rng: np.random.Generator,
    report: TrainReport,
    optimizer: G.Adam | None = None,
    label: str = "train",
) -> G.Adam:
    """Minibatch Adam over ``data`` with a fresh permutation every epoch.

    The mean batch loss of each epoch is appended to ``report``.  A non-finite
    loss or gradient aborts with the epoch and batch where it happened.
    """
    opt = optimizer or G.Adam(params, lr=lr)
    n = len(data)
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, batch), start=1):
            idx = perm[start : start + batch]
            opt.zero_grad()
            loss = loss_fn(data[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"{label}: non-finite loss {value} at epoch {epoch}, batch {b}")
            G.backward(loss)
            try:
                opt.step()
            except TrainingError as e:
                raise TrainingError(f"{label}: {e} at epoch {epoch}, batch {b}") from None
            total += value * len(idx)
            count += len(idx)
        report.losses.append(total / count)
        report.seconds.append(time.perf_counter() - t0)
        log.info("%s epoch %d/%d loss %.6g (%.1fs)", label, epoch, epochs, report.losses[-1], report.seconds[-1])
    return opt


def _finish(det: Detector, cfg: TrainConfig, report: TrainReport, out, extra: dict | None = None):
    det.meta.update(cfg.as_meta())
    det.meta["epochs_run"] = str(report.epochs)
    if extra:
        det.meta.update(extra)
    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        report.checkpoint = det.save(out)
        report.write_csv(out.with_suffix(".csv"))
    return det, report


def pretrain_autoencoder(dataset: PatchDataset, config: TrainConfig, out=None) -> tuple[Detector, TrainReport]:
    """Train encoder and decoder on reconstruction for ``pretrain_epochs``."""
    cfg = config.replace(method="ae")
    x = _training_data(dataset, cfg.modality)
    init_rng, shuffle_rng = _streams(cfg.seed)
    det = Detector.create("ae", cfg.modality, channel_count(cfg.modality), init_rng)
    report = TrainReport(label="pretrain")
    run_epochs(det.trainable(), det.loss, x, cfg.pretrain_epochs, cfg.batch, cfg.lr, shuffle_rng, report, label="pretrain")
    return _finish(det, cfg, report, out)


def _as_detector(pretrained) -> Detector:
    if isinstance(pretrained, Detector):
        return pretrained
    return Detector.load(pretrained)


def _init_head(det: Detector, features: np.ndarray) -> None:
    if det.method in ("svdd-soft", "svdd-hard"):
        det.center = svdd_init_center(features)
    if det.method == "svdd-soft":
        det.radius.data[...] = initial_radius(features, det.center, det.nu)
    if det.method == "nvp":
        fit_normalization(det.flow, features)


def _feature_loss(det: Detector) -> Callable[[np.ndarray], G.Tensor]:
    return lambda f: det.head_loss(G.Tensor(f))


def train(
    dataset: PatchDataset, config: TrainConfig, pretrained=None, out=None
) -> tuple[Detector, TrainReport]:
    """Train one detector under ``config.regime``.

    ``no-pretrain`` starts from a random encoder, ``pretrained`` copies the
    autoencoder's encoder and trains it jointly with the head, and
    ``fixed-features`` freezes that encoder and trains only the head on
    features computed once.  The autoencoder itself is trained for
    ``pretrain_epochs`` like the pretraining phase.
    """
    cfg = config.validate()
    if cfg.method == "ae":
        return pretrain_autoencoder(dataset, cfg, out)
    if cfg.needs_pretrained and pretrained is None:
        raise UsageError(f"regime {cfg.regime} needs a pretrained autoencoder checkpoint")
    x = _training_data(dataset, cfg.modality)
    init_rng, shuffle_rng = _streams(cfg.seed)
    det = Detector.create(cfg.method, cfg.modality, channel_count(cfg.modality), init_rng, nu=cfg.nu)
    extra = {}
    if cfg.needs_pretrained:
        src = _as_detector(pretrained)
        if src.modality != cfg.modality or src.channels != det.channels:
            raise UsageError(f"pretrained checkpoint is {src.modality}, config asks for {cfg.modality}")
        for k, v in src.encoder.items():
            det.encoder[k].data[...] = v.data
        extra["pretrained.method"] = src.method
    features = det.features(x)
    _init_head(det, features)
    report = TrainReport()
    if cfg.regime == "fixed-features":
        run_epochs(det.head_params(), _feature_loss(det), features, cfg.epochs, cfg.batch, cfg.lr, shuffle_rng, report)
    else:
        run_epochs(det.trainable(), det.loss, x, cfg.epochs, cfg.batch, cfg.lr, shuffle_rng, report)
    return _finish(det, cfg, report, out, extra)


def incremental_train(
    base: PatchDataset,
    condition_sets: Sequence[PatchDataset],
    config: TrainConfig,
    pretrained,
    out_dir=None,
) -> list[tuple[Detector, TrainReport]]:
    """Stage 0 trains on ``base``; stage k adds ``condition_sets[k-1]`` to the
    pool and continues from stage k-1's parameters for ``incremental_epochs``.

    Returns one ``(detector, report)`` per stage; with ``out_dir`` each stage
    is also written as ``stage<k>.ckpt`` plus its CSV report.
    """
    cfg = config.validate()
    if cfg.method != "nvp" or cfg.regime != "fixed-features":
        raise UsageError("incremental training runs the NVP head on fixed features")
    if pretrained is None:
        raise UsageError("incremental training needs a pretrained autoencoder checkpoint")
    src = _as_detector(pretrained)
    if src.modality != cfg.modality:
        raise UsageError(f"pretrained checkpoint is {src.modality}, config asks for {cfg.modality}")
    init_rng, shuffle_rng = _streams(cfg.seed)
    det = Detector.create("nvp", cfg.modality, channel_count(cfg.modality), init_rng)
    for k, v in src.encoder.items():
        det.encoder[k].data[...] = v.data
    pool = [det.features(_training_data(base, cfg.modality))]
    _init_head(det, pool[0])
    stages = []
    opt = None
    for stage in range(len(condition_sets) + 1):
        if stage > 0:
            pool.append(det.features(_training_data(condition_sets[stage - 1], cfg.modality)))
        feats = np.concatenate(pool)
        report = TrainReport(label=f"stage{stage}")
        opt = run_epochs(
            det.head_params(),
            _feature_loss(det),
            feats,
            cfg.incremental_epochs,
            cfg.batch,
            cfg.lr,
            shuffle_rng,
            report,
            optimizer=opt,
            label=f"stage{stage}",
        )
        snapshot = Detector.from_bytes(det.to_bytes())
        out = None if out_dir is None else Path(out_dir) / f"stage{stage}.ckpt"
        stages.append(_finish(snapshot, cfg, report, out, {"stage": str(stage), "stage_records": str(len(feats))}))
    return stages


__all__ = [
    "FEATURE_DIM",
    "INCREMENTAL_EPOCHS",
    "REGIMES",
    "TrainConfig",
    "TrainReport",
    "incremental_train",
    "pretrain_autoencoder",
    "run_epochs",
    "train",
]
