"""Image quality score (Minkowski contrast terms + feature count) and modality gate."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.ndimage import maximum_filter, minimum_filter


class Modality(str, enum.Enum):
    FEATURE_VO = "FeatureVO"
    PLANE_VO = "PlaneVO"


@dataclass(frozen=True)
class GateConfig:
    threshold: float = 0.45
    max_features: int = 100
    hysteresis: float = 0.0
    pre_average_mdm: bool = False

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.max_features <= 0:
            raise ValueError("max_features must be positive")


@dataclass(frozen=True)
class IqaScore:
    mdm: tuple
    feature_norm: float
    average: float
    timestamp: float = 0.0

    def row(self, choice: Modality | None = None) -> str:
        c = choice.value if choice is not None else ""
        return (f"{self.timestamp:.3f},{self.mdm[0]:.6f},{self.mdm[1]:.6f},{self.mdm[2]:.6f},"
                f"{self.feature_norm:.6f},{self.average:.6f},{c}")


CSV_HEADER = "t,mdm1,mdm2,mdm3,feat,avg,choice"


def _raw_terms(img: np.ndarray) -> np.ndarray:
    shifted = img - img.flat[0]  # exact zeros for constant images
    dev = shifted - shifted.mean()
    m1 = np.mean(np.abs(dev))
    m2 = np.sqrt(np.mean(dev ** 2))
    local_range = maximum_filter(img, size=3, mode="nearest") - minimum_filter(img, size=3, mode="nearest")
    return np.array([m1, m2, local_range.max()])


@lru_cache(maxsize=32)
def _reference_terms(height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[:height, :width]
    return _raw_terms(((xx + yy) % 2).astype(float))


def mdm_score(img) -> tuple:
    """Three contrast terms in [0, 1] (1 = checkerboard-level contrast).

    Mean absolute deviation, RMS deviation and the largest 3x3 local range,
    each normalized by its value on a full-contrast checkerboard of the
    same size.
    """
    arr = np.asarray(getattr(img, "intensities", img), dtype=float)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError("image must be a non-empty 2-D array")
    if arr.size == 1:
        return (0.0, 0.0, 0.0)
    ref = _reference_terms(*arr.shape)
    terms = np.clip(_raw_terms(arr) / ref, 0.0, 1.0)
    return tuple(float(v) for v in terms)


def feature_score(tracked: int, cfg: GateConfig | None = None) -> float:
    cfg = cfg or GateConfig()
    if tracked < 0:
        raise ValueError("tracked feature count must be non-negative")
    return min(tracked / cfg.max_features, 1.0)


def aggregate(mdm, feature_norm: float, t: float = 0.0, cfg: GateConfig | None = None) -> IqaScore:
    mdm = tuple(float(v) for v in mdm)
    if cfg is not None and cfg.pre_average_mdm:
        avg = 0.5 * (sum(mdm) / 3.0 + feature_norm)
    else:
        avg = (sum(mdm) + feature_norm) / 4.0
    return IqaScore(mdm, float(feature_norm), float(avg), float(t))


def score_image(img, cfg: GateConfig | None = None) -> IqaScore:
    cfg = cfg or GateConfig()
    return aggregate(mdm_score(img), feature_score(img.trackable_feature_count, cfg),
                     img.timestamp, cfg)


def select_modality(score: IqaScore, cfg: GateConfig | None = None,
                    previous: Modality | None = None) -> Modality:
    """FeatureVO when the averaged quality reaches the threshold, else PlaneVO.

    With ``cfg.hysteresis > 0`` and a previous decision the threshold moves by
    that band away from the current choice.
    """
    cfg = cfg or GateConfig()
    thr = cfg.threshold
    if cfg.hysteresis > 0 and previous is not None:
        thr = thr - cfg.hysteresis if previous is Modality.FEATURE_VO else thr + cfg.hysteresis
    return Modality.FEATURE_VO if score.average >= thr else Modality.PLANE_VO
