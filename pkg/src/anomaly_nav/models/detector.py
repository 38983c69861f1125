"""One object per trained detector, with a uniform scoring contract.

Every detector scores patches (and dense frames) so that a larger score means
more anomalous; callers decide ``score > threshold => anomaly``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import grad as G
from ..errors import FormatError, UsageError
from ..grad import checkpoint
from .autoencoder import ae_loss, ae_score, ae_score_map
from .encoder import (
    FEATURE_DIM,
    encode,
    in_channels,
    init_decoder,
    init_encoder,
    patch_features,
)
from .flow import init_flow, nvp_loss, nvp_score
from .svdd import DEFAULT_NU, svdd_hard_loss, svdd_score, svdd_soft_loss

METHODS = ("ae", "svdd-soft", "svdd-hard", "nvp")


@dataclass
class Detector:
    method: str
    modality: str
    encoder: dict[str, G.Tensor]
    decoder: dict[str, G.Tensor] | None = None
    center: np.ndarray | None = None
    radius: G.Tensor | None = None
    nu: float = DEFAULT_NU
    flow: dict[str, G.Tensor] | None = None
    meta: dict[str, str] = field(default_factory=dict)

    @classmethod
    def create(
        cls, method: str, modality: str, channels: int, rng: np.random.Generator, nu: float = DEFAULT_NU
    ) -> "Detector":
        if method not in METHODS:
            raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
        det = cls(method, modality, init_encoder(channels, rng), nu=nu)
        if method == "ae":
            det.decoder = init_decoder(channels, rng)
        elif method == "nvp":
            det.flow = init_flow(rng, FEATURE_DIM)
        elif method == "svdd-soft":
            det.radius = G.Tensor(np.zeros(()), requires_grad=True, name="svdd.radius")
        return det

    @property
    def channels(self) -> int:
        return in_channels(self.encoder)

    # ------------------------------------------------------------------ training

    def head_params(self) -> dict[str, G.Tensor]:
        if self.method == "nvp":
            return dict(self.flow)
        if self.method == "svdd-soft":
            return {"svdd.radius": self.radius}
        if self.method == "ae":
            return dict(self.decoder)
        return {}

    def trainable(self, freeze_encoder: bool = False) -> dict[str, G.Tensor]:
        params = {} if freeze_encoder else dict(self.encoder)
        params.update(self.head_params())
        return params

    def head_loss(self, y) -> G.Tensor:
        """Loss given encoder features ``y`` of shape ``(N, 128)``."""
        if self.method == "nvp":
            return nvp_loss(y, self.flow)
        if self.method == "svdd-soft":
            return svdd_soft_loss(y, self.center, self.radius, self.nu)
        if self.method == "svdd-hard":
            return svdd_hard_loss(y, self.center)
        raise UsageError("the autoencoder has no feature-space head")

    def loss(self, x: np.ndarray) -> G.Tensor:
        if self.method == "ae":
            return ae_loss(x, self.encoder, self.decoder)
        y = encode(x, self.encoder)
        return self.head_loss(G.reshape(y, (y.shape[0], FEATURE_DIM)))

    # ------------------------------------------------------------------- scoring

    def features(self, x: np.ndarray) -> np.ndarray:
        return patch_features(np.asarray(x, dtype=np.float32), self.encoder)

    def score_features(self, y: np.ndarray) -> np.ndarray:
        if self.method == "nvp":
            return nvp_score(y, self.flow)
        if self.method in ("svdd-soft", "svdd-hard"):
            return svdd_score(y, self.center)
        raise UsageError("autoencoder scores live in image space")

    def score(self, x: np.ndarray) -> np.ndarray:
        """Anomaly score per patch for ``N x 32 x 32 x c`` input."""
        x = np.asarray(x, dtype=np.float32)
        self._check_channels(x)
        if self.method == "ae":
            return ae_score(x, self.encoder, self.decoder)
        return self.score_features(self.features(x))

    def score_map(self, frame: np.ndarray) -> np.ndarray:
        """Dense ``j x k`` score grid for a full ``H x W x c`` frame."""
        frame = np.asarray(frame, dtype=np.float32)
        self._check_channels(frame)
        if self.method == "ae":
            return ae_score_map(frame, self.encoder, self.decoder)
        with G.no_grad():
            y = encode(frame, self.encoder).data
        j, k, d = y.shape
        return self.score_features(y.reshape(-1, d)).reshape(j, k)

    def _check_channels(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.channels:
            raise UsageError(
                f"input has {x.shape[-1]} channels but the {self.modality} model expects {self.channels}"
            )

    # -------------------------------------------------------------- persistence

    def tensors(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.encoder.items()}
        for group in (self.decoder, self.flow):
            if group:
                out.update({k: v.data for k, v in group.items()})
        if self.center is not None:
            out["svdd.center"] = self.center
        if self.radius is not None:
            out["svdd.radius"] = self.radius.data
        return out

    def checkpoint_meta(self) -> dict[str, str]:
        meta = dict(self.meta)
        meta.update(method=self.method, modality=self.modality, nu=repr(self.nu))
        return meta

    def to_bytes(self) -> bytes:
        return checkpoint.dumps(self.tensors(), self.checkpoint_meta())

    def save(self, path) -> Path:
        return checkpoint.save(path, self.tensors(), self.checkpoint_meta())

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], meta: dict[str, str]) -> "Detector":
        try:
            method, modality = meta["method"], meta["modality"]
        except KeyError as e:
            raise FormatError(f"checkpoint metadata lacks {e.args[0]!r}") from None
        if method not in METHODS:
            raise FormatError(f"checkpoint has unknown method {method!r}")

        def group(prefix):
            g = {k: G.Tensor(v.copy(), requires_grad=True, name=k) for k, v in tensors.items() if k.startswith(prefix)}
            return g or None

        enc = group("enc.")
        if enc is None:
            raise FormatError("checkpoint holds no encoder tensors")
        det = cls(method, modality, enc, nu=float(meta.get("nu", DEFAULT_NU)))
        det.decoder = group("dec.")
        det.flow = group("flow.")
        if "svdd.center" in tensors:
            det.center = tensors["svdd.center"].copy()
        if "svdd.radius" in tensors:
            det.radius = G.Tensor(tensors["svdd.radius"].copy(), requires_grad=True, name="svdd.radius")
        det.meta = {k: v for k, v in meta.items() if k not in ("method", "modality", "nu")}
        missing = {
            "ae": det.decoder is None,
            "nvp": det.flow is None,
            "svdd-soft": det.center is None or det.radius is None,
            "svdd-hard": det.center is None,
        }[method]
        if missing:
            raise FormatError(f"checkpoint for {method} is missing head tensors")
        return det

    @classmethod
    def load(cls, path) -> "Detector":
        return cls.from_tensors(*checkpoint.load(path))

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Detector":
        return cls.from_tensors(*checkpoint.loads(raw))
