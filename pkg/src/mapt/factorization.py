"""Input/output factorizations: per-view depth scale, pose scale, log encodings
and the norm scaling factors used by every scale-invariant loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyDepthError, InvalidValueError
from .geometry import DepthAlongRay, MetricScale, PointMap

POSE_SCALE_EPS = 1e-9
LOG_SCALE_MIN = 1e-6
LOG_SCALE_MAX = 1e6


@dataclass
class DepthFactors:
    """Mean valid ray depth and the depth map normalized to mean 1."""

    z_d: float
    normalized: DepthAlongRay


@dataclass
class PoseScaleFactors:
    """Mean translation norm and translations divided by it.

    ``degenerate`` flags the all-near-zero case, where z_p is reported as 0 and
    the translations are passed through unchanged.
    """

    z_p: float
    normalized_translations: np.ndarray  # (N, 3)
    degenerate: bool = False


@dataclass
class NormScale:
    """Mean Euclidean norm of valid points pooled across views."""

    value: float

    def __post_init__(self):
        v = float(self.value)
        if not np.isfinite(v) or v <= 0.0:
            raise InvalidValueError("norm scale must be finite and > 0")
        self.value = v


def factor_depth(d: DepthAlongRay) -> DepthFactors:
    """Split a depth map into its mean valid depth and a mean-1 normalized map."""
    if not np.any(d.validity):
        raise EmptyDepthError("cannot factor a depth map with no valid pixels")
    z_d = float(np.mean(d.values[d.validity]))
    return DepthFactors(z_d=z_d, normalized=DepthAlongRay(d.values / z_d, d.validity.copy()))


def factor_pose_scale(translations: np.ndarray) -> PoseScaleFactors:
    """Split translations into their mean norm and unit-mean-norm directions."""
    t = np.asarray(translations, dtype=np.float64).reshape(-1, 3)
    if t.shape[0] == 0:
        raise InvalidValueError("pose scale requires at least one translation")
    z_p = float(np.mean(np.linalg.norm(t, axis=1)))
    if z_p <= POSE_SCALE_EPS:
        return PoseScaleFactors(z_p=0.0, normalized_translations=t.copy(), degenerate=True)
    return PoseScaleFactors(z_p=z_p, normalized_translations=t / z_p)


def encode_log_scale(s: float) -> float:
    """ln of the scale after clamping to [1e-6, 1e6]."""
    s = float(s)
    if not np.isfinite(s):
        raise InvalidValueError("scale must be finite")
    return float(np.log(np.clip(s, LOG_SCALE_MIN, LOG_SCALE_MAX)))


def decode_log_scale(y: float) -> float:
    y = float(y)
    if not np.isfinite(y):
        raise InvalidValueError("encoded scale must be finite")
    return float(np.clip(np.exp(y), LOG_SCALE_MIN, LOG_SCALE_MAX))


def f_log(x, axis: int | None = None):
    """Log-space squashing map x -> (x / |x|) * log(1 + |x|).

    With ``axis=None`` the map is applied elementwise (the 1-D specialization
    sign(x) * log(1 + |x|)); with an ``axis`` the norm is taken along it and the
    direction is preserved. Zero maps to zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if axis is None:
        return np.sign(x) * np.log1p(np.abs(x))
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    factor = np.ones_like(n)
    nz = n > 0.0
    factor[nz] = np.log1p(n[nz]) / n[nz]
    return x * factor


def f_log_jacobian(x: np.ndarray) -> np.ndarray:
    """Analytic 3x3 Jacobian of the vector f_log at a nonzero point."""
    x = np.asarray(x, dtype=np.float64).reshape(3)
    n = np.linalg.norm(x)
    if n == 0.0:
        return np.eye(3)
    u = x / n
    outer = np.outer(u, u)
    return (np.log1p(n) / n) * (np.eye(3) - outer) + outer / (1.0 + n)


def norm_scale(pointmaps: list[PointMap]) -> NormScale:
    """Mean norm of all valid points pooled over the given views."""
    total = 0.0
    count = 0
    for pm in pointmaps:
        pts = pm.points[pm.validity]
        total += float(np.sum(np.linalg.norm(pts, axis=1)))
        count += pts.shape[0]
    if count == 0:
        raise EmptyDepthError("norm scale requires at least one valid point")
    return NormScale(total / count)


def metric_norm_scale(m: MetricScale, z_pred: NormScale) -> NormScale:
    """Metric norm scale m * z_pred.

    Contract: the scale loss treats z_pred as a constant (stop-gradient), so
    its analytic derivative with respect to any geometry prediction is zero.
    """
    return NormScale(m.value * z_pred.value)
