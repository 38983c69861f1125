"""Patch records, the in-memory patch dataset and its binary container.

Container layout (little-endian)::

    b"ANDS"  u32 version  u32 manifest_len  manifest (utf-8 key=value lines)
    record_count x ( u8 label, u8 condition, u32 frame_id, u16 u, u16 v,
                     f32 payload[32 * 32 * c] )

``record_count``, ``modality`` and ``patch`` are mandatory manifest keys.
"""

from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import FormatError, UsageError
from ..grad.checkpoint import decode_meta, encode_meta
from ..modalities import ChannelStack, canonical, channel_count, channel_index

MAGIC = b"ANDS"
VERSION = 1
PATCH = 32
MIN_VALID_FRACTION = 0.75

UNLABELED, POSITIVE, NEGATIVE = 0, 1, 2
LABELS = {"unlabeled": UNLABELED, "positive": POSITIVE, "negative": NEGATIVE}
CONDITIONS = ("sun", "fire", "rain", "wet", "twilight", "synthetic")


def condition_code(name: str) -> int:
    try:
        return CONDITIONS.index(name)
    except ValueError:
        raise UsageError(f"unknown condition {name!r}; valid: {', '.join(CONDITIONS)}") from None


class PatchSkipWarning(UserWarning):
    pass


@dataclass
class PatchRecord:
    data: np.ndarray  # 32 x 32 x c
    label: int = UNLABELED
    condition: int = 0
    frame_id: int = 0
    center: tuple[int, int] = (0, 0)  # (u, v) pixel coordinates


def _record_dtype(c: int, patch: int = PATCH) -> np.dtype:
    return np.dtype(
        [
            ("label", "u1"),
            ("condition", "u1"),
            ("frame_id", "<u4"),
            ("center", "<u2", (2,)),
            ("payload", "<f4", (patch, patch, c)),
        ]
    )


class PatchDataset:
    """Column-oriented store of same-modality patches plus a manifest."""

    def __init__(
        self,
        data: np.ndarray,
        labels,
        conditions,
        frame_ids,
        centers,
        modality: str,
        manifest: dict[str, str] | None = None,
    ):
        self.modality = canonical(modality)
        data = np.asarray(data, dtype=np.float32)
        c = channel_count(self.modality)
        if data.ndim != 4 or data.shape[1:] != (PATCH, PATCH, c):
            raise UsageError(f"patch array {data.shape} does not match N x 32 x 32 x {c} ({self.modality})")
        n = len(data)
        self.data = data
        self.labels = np.asarray(labels, dtype=np.uint8).reshape(n)
        self.conditions = np.asarray(conditions, dtype=np.uint8).reshape(n)
        self.frame_ids = np.asarray(frame_ids, dtype=np.uint32).reshape(n)
        self.centers = np.asarray(centers, dtype=np.uint16).reshape(n, 2)
        self.manifest = dict(manifest or {})

    def __len__(self) -> int:
        return len(self.data)

    def __getitem__(self, i: int) -> PatchRecord:
        return PatchRecord(
            self.data[i],
            int(self.labels[i]),
            int(self.conditions[i]),
            int(self.frame_ids[i]),
            (int(self.centers[i, 0]), int(self.centers[i, 1])),
        )

    @classmethod
    def from_records(cls, records: Sequence[PatchRecord], modality: str, manifest=None) -> "PatchDataset":
        c = channel_count(modality)
        if not records:
            return cls(np.zeros((0, PATCH, PATCH, c), np.float32), [], [], [], np.zeros((0, 2)), modality, manifest)
        return cls(
            np.stack([r.data for r in records]),
            [r.label for r in records],
            [r.condition for r in records],
            [r.frame_id for r in records],
            [r.center for r in records],
            modality,
            manifest,
        )

    @classmethod
    def concat(cls, parts: Iterable["PatchDataset"]) -> "PatchDataset":
        parts = list(parts)
        if not parts:
            raise UsageError("nothing to concatenate")
        codes = {p.modality for p in parts}
        if len(codes) != 1:
            raise UsageError(f"cannot concatenate datasets of modalities {sorted(codes)}")
        manifest = {}
        for p in parts:
            manifest.update(p.manifest)
        return cls(
            np.concatenate([p.data for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.conditions for p in parts]),
            np.concatenate([p.frame_ids for p in parts]),
            np.concatenate([p.centers for p in parts]),
            parts[0].modality,
            manifest,
        )

    def subset(self, idx) -> "PatchDataset":
        idx = np.asarray(idx)
        return PatchDataset(
            self.data[idx],
            self.labels[idx],
            self.conditions[idx],
            self.frame_ids[idx],
            self.centers[idx],
            self.modality,
            self.manifest,
        )

    def where(self, label: int | None = None, condition: int | str | None = None) -> "PatchDataset":
        keep = np.ones(len(self), dtype=bool)
        if label is not None:
            keep &= self.labels == label
        if condition is not None:
            code = condition_code(condition) if isinstance(condition, str) else condition
            keep &= self.conditions == code
        return self.subset(np.flatnonzero(keep))

    def positives(self) -> "PatchDataset":
        return self.where(label=POSITIVE)

    def select_modality(self, code: str) -> "PatchDataset":
        idx = channel_index(self.modality, code)
        out = PatchDataset(
            np.ascontiguousarray(self.data[..., idx]),
            self.labels,
            self.conditions,
            self.frame_ids,
            self.centers,
            code,
            self.manifest,
        )
        out.manifest["modality"] = out.modality
        return out

    def equals(self, other: "PatchDataset") -> bool:
        """Bitwise comparison of every record field."""
        return (
            self.modality == other.modality
            and self.data.tobytes() == other.data.tobytes()
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.conditions, other.conditions)
            and np.array_equal(self.frame_ids, other.frame_ids)
            and np.array_equal(self.centers, other.centers)
        )

    # -------------------------------------------------------------- container

    def full_manifest(self) -> dict[str, str]:
        m = dict(self.manifest)
        m.update(modality=self.modality, patch=str(PATCH), record_count=str(len(self)))
        return m

    def to_bytes(self) -> bytes:
        rec = np.empty(len(self), dtype=_record_dtype(channel_count(self.modality)))
        rec["label"] = self.labels
        rec["condition"] = self.conditions
        rec["frame_id"] = self.frame_ids
        rec["center"] = self.centers
        rec["payload"] = self.data
        meta = encode_meta(self.full_manifest())
        return MAGIC + struct.pack("<II", VERSION, len(meta)) + meta + rec.tobytes()

    def save(self, path) -> Path:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)
        return path

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PatchDataset":
        if len(raw) < 12 or raw[:4] != MAGIC:
            raise FormatError("not a patch dataset container (bad magic)")
        version, mlen = struct.unpack("<II", raw[4:12])
        if version != VERSION:
            raise FormatError(f"unsupported dataset container version {version}")
        if 12 + mlen > len(raw):
            raise FormatError("truncated dataset container: manifest cut short")
        manifest = decode_meta(raw[12 : 12 + mlen])
        try:
            modality = canonical(manifest["modality"])
            count = int(manifest["record_count"])
            patch = int(manifest.get("patch", PATCH))
        except (KeyError, ValueError, UsageError) as e:
            raise FormatError(f"dataset manifest is incomplete or invalid: {e}") from None
        if patch != PATCH:
            raise FormatError(f"unsupported patch size {patch}")
        dt = _record_dtype(channel_count(modality))
        body = len(raw) - 12 - mlen
        if body != count * dt.itemsize:
            raise FormatError(
                f"dataset container holds {body} record bytes, manifest promises {count} x {dt.itemsize}"
            )
        rec = np.frombuffer(raw, dtype=dt, count=count, offset=12 + mlen)
        return cls(
            rec["payload"].astype(np.float32),
            rec["label"].copy(),
            rec["condition"].copy(),
            rec["frame_id"].astype(np.uint32),
            rec["center"].astype(np.uint16),
            modality,
            manifest,
        )

    @classmethod
    def load(cls, path) -> "PatchDataset":
        return cls.from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------


def extract_patches(
    frame: ChannelStack,
    centers,
    label: int = UNLABELED,
    condition: int = 0,
    frame_id: int = 0,
    min_valid: float = MIN_VALID_FRACTION,
) -> list[PatchRecord]:
    """Copy the 32x32 window around each ``(u, v)`` centre.

    A window spans ``[c - 16, c + 16)`` on both axes.  Windows that leave the
    frame or are less than ``min_valid`` valid are skipped; the number skipped
    is reported through a ``PatchSkipWarning``.
    """
    h, w = frame.shape
    r = PATCH // 2
    out, skipped = [], 0
    for u, v in centers:
        u, v = int(u), int(v)
        if u - r < 0 or v - r < 0 or u + r > w or v + r > h:
            skipped += 1
            continue
        win = (slice(v - r, v + r), slice(u - r, u + r))
        if frame.valid[win].mean() < min_valid:
            skipped += 1
            continue
        out.append(PatchRecord(frame.data[win].copy(), label, condition, frame_id, (u, v)))
    if skipped:
        warnings.warn(f"skipped {skipped} patch window(s) (out of bounds or too invalid)", PatchSkipWarning, stacklevel=2)
    return out


def split(dataset: PatchDataset, seed: int, fractions=(0.9, 0.1)) -> tuple[PatchDataset, PatchDataset]:
    """Seeded disjoint train/validation split."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 2 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise UsageError(f"split fractions must be two non-negative numbers summing to 1, got {fractions}")
    n = len(dataset)
    if n == 0:
        raise UsageError("cannot split an empty dataset")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    parts = (perm[:n_train], perm[n_train:])
    for f, p in zip(fractions, parts):
        if f > 0 and len(p) == 0:
            raise UsageError(f"split fraction {f} of {n} records leaves an empty subset")
    return dataset.subset(np.sort(parts[0])), dataset.subset(np.sort(parts[1]))
