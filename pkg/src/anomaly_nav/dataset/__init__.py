from .container import (
    CONDITIONS,
    LABELS,
    MIN_VALID_FRACTION,
    NEGATIVE,
    PATCH,
    POSITIVE,
    UNLABELED,
    PatchDataset,
    PatchRecord,
    PatchSkipWarning,
    condition_code,
    extract_patches,
    split,
)
from .frames import load_frame, save_frame
from .synth import (
    ANOMALIES,
    Frame,
    Sortie,
    SyntheticSceneConfig,
    camera_rotation,
    default_intrinsics,
    render_frame,
    synth_generate,
)

__all__ = [
    "ANOMALIES",
    "CONDITIONS",
    "LABELS",
    "MIN_VALID_FRACTION",
    "NEGATIVE",
    "PATCH",
    "POSITIVE",
    "UNLABELED",
    "Frame",
    "PatchDataset",
    "PatchRecord",
    "PatchSkipWarning",
    "Sortie",
    "SyntheticSceneConfig",
    "camera_rotation",
    "condition_code",
    "default_intrinsics",
    "extract_patches",
    "load_frame",
    "render_frame",
    "save_frame",
    "split",
    "synth_generate",
]
