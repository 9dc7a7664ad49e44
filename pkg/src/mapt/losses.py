"""Training-loss suite: robust kernel, factored regression losses and the
weighted total.

Conventions (fixed for this artifact):
  * every summed loss is reduced as a mean over views / valid pixels, pooled
    across views in row-major view order;
  * the robust kernel is applied to the per-pixel residual *norm*;
  * the top-fraction exclusion applies to the depth and local-pointmap losses
    only, pooled across all views of a sample;
  * the confidence-weighted pointmap loss has no exclusion (confidence plays
    that role).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyDepthError, InvalidValueError, ShapeError
from .factorization import NormScale, f_log, metric_norm_scale, norm_scale
from .geometry import (
    DepthAlongRay,
    FactoredScene,
    MetricScale,
    PointMap,
    RayMap,
    local_pointmap,
    world_pointmap,
)

# Loss weighting of the total objective: the global pointmap term is
# up-weighted and the mask term down-weighted; everything else is 1.
WEIGHT_POINTMAP = 10.0
WEIGHT_MASK = 0.1

DEFAULT_ALPHA_CONF = 0.2
DEFAULT_EXCLUDE_TOP = 0.05
BCE_CLAMP = 1e-7


@dataclass
class RobustKernelParams:
    """Shape/scale of the general robust loss; defaults alpha=0.5, c=0.05."""

    alpha: float = 0.5
    c: float = 0.05

    def __post_init__(self):
        if not np.isfinite(self.c) or self.c <= 0.0:
            raise InvalidValueError("robust kernel scale c must be > 0")
        if not np.isfinite(self.alpha) or self.alpha > 2.0:
            raise InvalidValueError("robust kernel alpha must lie in (-inf, 2]")


DEFAULT_KERNEL = RobustKernelParams()


def robust_kernel(x, p: RobustKernelParams = DEFAULT_KERNEL):
    """General robust loss rho(x) = (|a-2|/a) * (((x/c)^2 / |a-2| + 1)^(a/2) - 1).

    The limits a -> 2 (quadratic) and a -> 0 (Cauchy) are handled explicitly.
    Even in x, zero at zero, monotone in |x|.
    """
    t = np.asarray(x, dtype=np.float64) / p.c
    a = p.alpha
    if a == 2.0:
        return 0.5 * t * t
    if a == 0.0:
        return np.log1p(0.5 * t * t)
    b = abs(a - 2.0)
    return (b / a) * (np.power(t * t / b + 1.0, a / 2.0) - 1.0)


def robust_kernel_grad(x, p: RobustKernelParams = DEFAULT_KERNEL):
    """d rho / d x; one expression covers all alpha <= 2 cases."""
    x = np.asarray(x, dtype=np.float64)
    t = x / p.c
    b = abs(p.alpha - 2.0) if p.alpha != 2.0 else 1.0
    if p.alpha == 2.0:
        return x / (p.c * p.c)
    return (x / (p.c * p.c)) * np.power(t * t / b + 1.0, p.alpha / 2.0 - 1.0)


@dataclass
class LossReport:
    """Per-term loss values and the weighted total."""

    pointmap: float
    rays: float
    rot: float
    translation: float
    depth: float
    lpm: float
    scale: float
    normal: float
    gm: float
    mask: float
    total: float

    @classmethod
    def from_terms(cls, **terms) -> "LossReport":
        total = (
            WEIGHT_POINTMAP * terms["pointmap"]
            + terms["rays"]
            + terms["rot"]
            + terms["translation"]
            + terms["depth"]
            + terms["lpm"]
            + terms["scale"]
            + terms["normal"]
            + terms["gm"]
            + WEIGHT_MASK * terms["mask"]
        )
        return cls(total=float(total), **{k: float(v) for k, v in terms.items()})

    def as_dict(self) -> dict:
        return {
            "pointmap": self.pointmap,
            "rays": self.rays,
            "rot": self.rot,
            "translation": self.translation,
            "depth": self.depth,
            "lpm": self.lpm,
            "scale": self.scale,
            "normal": self.normal,
            "gm": self.gm,
            "mask": self.mask,
            "total": self.total,
        }


def loss_weights() -> dict:
    """The weights applied to each term in the total."""
    return {
        "pointmap": WEIGHT_POINTMAP,
        "rays": 1.0,
        "rot": 1.0,
        "translation": 1.0,
        "depth": 1.0,
        "lpm": 1.0,
        "scale": 1.0,
        "normal": 1.0,
        "gm": 1.0,
        "mask": WEIGHT_MASK,
    }


# ---------------------------------------------------------------------------
# reduction helpers


def _excluded_mean(values: np.ndarray, exclude_top: float) -> float:
    """Mean after dropping the floor(exclude_top * n) largest entries."""
    n = values.size
    if n == 0:
        raise EmptyDepthError("no valid pixels to reduce")
    n_drop = int(np.floor(exclude_top * n))
    if n_drop == 0:
        return float(np.mean(values))
    kept = np.sort(values)[: n - n_drop]
    return float(np.mean(kept))


def _check_views(pred: list, gt: list, what: str):
    if len(pred) != len(gt):
        raise ShapeError(f"{what}: view counts differ ({len(pred)} vs {len(gt)})")


# ---------------------------------------------------------------------------
# per-term losses


def loss_rays(pred: list[RayMap], gt: list[RayMap], p: RobustKernelParams = DEFAULT_KERNEL) -> float:
    """Kernel of the per-pixel direction residual norm, mean over all pixels."""
    _check_views(pred, gt, "rays loss")
    chunks = []
    for rp, rg in zip(pred, gt):
        if rp.directions.shape != rg.directions.shape:
            raise ShapeError("rays loss: resolution mismatch")
        res = np.linalg.norm(rp.directions - rg.directions, axis=2)
        chunks.append(robust_kernel(res, p).ravel())
    return float(np.mean(np.concatenate(chunks)))


def loss_rot(pred_quats, gt_quats, p: RobustKernelParams = DEFAULT_KERNEL) -> float:
    """Sign-invariant quaternion chord distance, kernelized, mean over views."""
    qp = np.asarray(pred_quats, dtype=np.float64).reshape(-1, 4)
    qg = np.asarray(gt_quats, dtype=np.float64).reshape(-1, 4)
    if qp.shape != qg.shape:
        raise ShapeError("rot loss: quaternion counts differ")
    for q in (qp, qg):
        if np.max(np.abs(np.linalg.norm(q, axis=1) - 1.0)) > 1e-6:
            raise InvalidValueError("rot loss requires unit quaternions")
    res = np.minimum(np.linalg.norm(qg - qp, axis=1), np.linalg.norm(qg + qp, axis=1))
    return float(np.mean(robust_kernel(res, p)))


def loss_translation(
    pred_t, gt_t, z_pred: NormScale, z_gt: NormScale, p: RobustKernelParams = DEFAULT_KERNEL
) -> float:
    """Scale-invariant translation loss: residual of gt/z_gt vs pred/z_pred."""
    tp = np.asarray(pred_t, dtype=np.float64).reshape(-1, 3)
    tg = np.asarray(gt_t, dtype=np.float64).reshape(-1, 3)
    if tp.shape != tg.shape:
        raise ShapeError("translation loss: counts differ")
    res = np.linalg.norm(tg / z_gt.value - tp / z_pred.value, axis=1)
    return float(np.mean(robust_kernel(res, p)))


def loss_depth(
    pred: list[DepthAlongRay],
    gt: list[DepthAlongRay],
    z_pred: NormScale,
    z_gt: NormScale,
    p: RobustKernelParams = DEFAULT_KERNEL,
    exclude_top: float = DEFAULT_EXCLUDE_TOP,
) -> float:
    """Log-space scale-invariant ray depth loss with top-fraction exclusion.

    Pixels are selected by the ground-truth validity masks and pooled across
    views before the exclusion quantile is applied.
    """
    _check_views(pred, gt, "depth loss")
    chunks = []
    for dp, dg in zip(pred, gt):
        if dp.values.shape != dg.values.shape:
            raise ShapeError("depth loss: resolution mismatch")
        m = dg.validity
        res = np.abs(f_log(dg.values[m] / z_gt.value) - f_log(dp.values[m] / z_pred.value))
        chunks.append(robust_kernel(res, p))
    return _excluded_mean(np.concatenate(chunks), exclude_top)


def loss_local_pointmap(
    pred: list[PointMap],
    gt: list[PointMap],
    z_pred: NormScale,
    z_gt: NormScale,
    p: RobustKernelParams = DEFAULT_KERNEL,
    exclude_top: float = DEFAULT_EXCLUDE_TOP,
) -> float:
    """As the depth loss but on 3D points: kernel of the f_log residual norm."""
    _check_views(pred, gt, "local pointmap loss")
    chunks = []
    for pp, pg in zip(pred, gt):
        if pp.points.shape != pg.points.shape:
            raise ShapeError("local pointmap loss: resolution mismatch")
        m = pg.validity
        res = np.linalg.norm(
            f_log(pg.points[m] / z_gt.value, axis=1) - f_log(pp.points[m] / z_pred.value, axis=1),
            axis=1,
        )
        chunks.append(robust_kernel(res, p))
    return _excluded_mean(np.concatenate(chunks), exclude_top)


def loss_pointmap_conf(
    pred: list[PointMap],
    gt: list[PointMap],
    conf: list[np.ndarray],
    z_pred: NormScale,
    z_gt: NormScale,
    p: RobustKernelParams = DEFAULT_KERNEL,
    alpha_conf: float = DEFAULT_ALPHA_CONF,
) -> float:
    """Confidence-weighted world pointmap loss: mean of C * rho(res) - a * log C."""
    _check_views(pred, gt, "pointmap loss")
    chunks = []
    for pp, pg, c in zip(pred, gt, conf):
        if pp.points.shape != pg.points.shape:
            raise ShapeError("pointmap loss: resolution mismatch")
        c = np.asarray(c, dtype=np.float64)
        if c.shape != pg.validity.shape:
            raise ShapeError("pointmap loss: confidence resolution mismatch")
        if np.min(c) < 1.0:
            raise InvalidValueError("confidence must be >= 1")
        m = pg.validity
        res = np.linalg.norm(
            f_log(pg.points[m] / z_gt.value, axis=1) - f_log(pp.points[m] / z_pred.value, axis=1),
            axis=1,
        )
        cm = c[m]
        chunks.append(cm * robust_kernel(res, p) - alpha_conf * np.log(cm))
    pooled = np.concatenate(chunks)
    if pooled.size == 0:
        raise EmptyDepthError("pointmap loss: no valid pixels")
    return float(np.mean(pooled))


def loss_scale(
    z_gt: NormScale, m: MetricScale, z_pred: NormScale, p: RobustKernelParams = DEFAULT_KERNEL
) -> float:
    """Factored metric scale loss on log-space norm scales.

    Gradient contract: z_pred is treated as a constant (stop-gradient), so the
    loss only back-propagates into the metric scale m.
    """
    z_bar = metric_norm_scale(m, z_pred)
    r = abs(float(f_log(z_gt.value)) - float(f_log(z_bar.value)))
    return float(robust_kernel(r, p))


def loss_scale_grad_m(
    z_gt: NormScale, m: MetricScale, z_pred: NormScale, p: RobustKernelParams = DEFAULT_KERNEL
) -> float:
    """Analytic d loss_scale / d m (z_pred held constant)."""
    inner = float(np.log1p(z_gt.value) - np.log1p(m.value * z_pred.value))
    r = abs(inner)
    dr_dm = -np.sign(inner) * z_pred.value / (1.0 + m.value * z_pred.value)
    return float(robust_kernel_grad(r, p) * dr_dm)


def _forward_normals(pm: PointMap) -> tuple[np.ndarray, np.ndarray]:
    """Unit normals from forward differences; valid where the 2x2 patch is valid."""
    pts, v = pm.points, pm.validity
    dx = pts[:-1, 1:, :] - pts[:-1, :-1, :]
    dy = pts[1:, :-1, :] - pts[:-1, :-1, :]
    n = np.cross(dx, dy)
    norms = np.linalg.norm(n, axis=2)
    ok = (v[:-1, :-1] & v[:-1, 1:] & v[1:, :-1] & v[1:, 1:]) & (norms > 1e-12)
    n = np.where(ok[:, :, None], n / np.where(norms[:, :, None] > 1e-12, norms[:, :, None], 1.0), 0.0)
    return n, ok


def loss_normal(pred: list[PointMap], gt: list[PointMap]) -> float:
    """Mean (1 - cos) between forward-difference normals of local pointmaps.

    Pixels need a fully valid 2x2 neighborhood in both maps; if none qualify
    anywhere the loss is 0.
    """
    _check_views(pred, gt, "normal loss")
    chunks = []
    for pp, pg in zip(pred, gt):
        if pp.points.shape != pg.points.shape:
            raise ShapeError("normal loss: resolution mismatch")
        if pp.height < 2 or pp.width < 2:
            raise ShapeError("normal loss requires at least 2x2 maps")
        npred, okp = _forward_normals(pp)
        ngt, okg = _forward_normals(pg)
        ok = okp & okg
        if np.any(ok):
            dots = np.sum(npred[ok] * ngt[ok], axis=1)
            chunks.append(1.0 - dots)
    if not chunks:
        return 0.0
    return float(np.mean(np.concatenate(chunks)))


def _pool_half(d: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Factor-2 average pooling over valid pixels; a cell is valid if any pixel is."""
    h, w = d.shape
    h2, w2 = (h + 1) // 2, (w + 1) // 2
    dp = np.zeros((h2 * 2, w2 * 2))
    vp = np.zeros((h2 * 2, w2 * 2), dtype=bool)
    dp[:h, :w] = np.where(valid, d, 0.0)
    vp[:h, :w] = valid
    counts = vp.reshape(h2, 2, w2, 2).sum(axis=(1, 3))
    sums = dp.reshape(h2, 2, w2, 2).sum(axis=(1, 3))
    out_valid = counts > 0
    out = np.where(out_valid, sums / np.maximum(counts, 1), 0.0)
    return out, out_valid


def loss_gradient_matching(
    pred_z: list[np.ndarray], gt_z: list[np.ndarray], validity: list[np.ndarray], n_scales: int = 4
) -> float:
    """Multi-scale gradient matching on the log z-depth difference.

    At each scale the x- and y-forward-difference magnitudes of
    d = log(pred) - log(gt) are averaged over pairs whose both endpoints are
    valid, pooled across views; the per-scale terms are summed.
    """
    _check_views(pred_z, gt_z, "gradient matching loss")
    per_view = []
    for zp, zg, m in zip(pred_z, gt_z, validity):
        zp = np.asarray(zp, dtype=np.float64)
        zg = np.asarray(zg, dtype=np.float64)
        m = np.asarray(m, dtype=bool)
        if zp.shape != zg.shape or m.shape != zg.shape:
            raise ShapeError("gradient matching loss: resolution mismatch")
        if np.any(zp[m] <= 0.0) or np.any(zg[m] <= 0.0):
            raise InvalidValueError("gradient matching loss requires positive depths")
        d = np.zeros_like(zg)
        d[m] = np.log(zp[m]) - np.log(zg[m])
        per_view.append((d, m))

    total = 0.0
    for _ in range(n_scales):
        gx, gy = [], []
        nxt = []
        for d, m in per_view:
            vx = m[:, 1:] & m[:, :-1]
            vy = m[1:, :] & m[:-1, :]
            gx.append(np.abs(d[:, 1:] - d[:, :-1])[vx])
            gy.append(np.abs(d[1:, :] - d[:-1, :])[vy])
            nxt.append(_pool_half(d, m))
        gx = np.concatenate(gx)
        gy = np.concatenate(gy)
        if gx.size:
            total += float(np.mean(gx))
        if gy.size:
            total += float(np.mean(gy))
        per_view = nxt
    return total


def loss_mask(pred_prob: list[np.ndarray], gt: list[np.ndarray]) -> float:
    """Mean binary cross entropy over all pixels of all views."""
    _check_views(pred_prob, gt, "mask loss")
    chunks = []
    for p, g in zip(pred_prob, gt):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ShapeError("mask loss: resolution mismatch")
        if np.min(p) < 0.0 or np.max(p) > 1.0:
            raise InvalidValueError("mask probabilities must lie in [0, 1]")
        pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
        chunks.append(-(g * np.log(pc) + (1.0 - g) * np.log(1.0 - pc)).ravel())
    return float(np.mean(np.concatenate(chunks)))


# ---------------------------------------------------------------------------
# total


def total_loss(
    pred: FactoredScene,
    gt,
    synthetic: bool = False,
    p: RobustKernelParams = DEFAULT_KERNEL,
    alpha_conf: float = DEFAULT_ALPHA_CONF,
    exclude_top: float = DEFAULT_EXCLUDE_TOP,
) -> LossReport:
    """Full weighted objective of a predicted factored scene against ground truth.

    ``gt`` is a ground-truth scene sample (see mapt.synth.SceneSample). The
    normal and gradient-matching terms are forced to 0 unless ``synthetic``
    is set. Pixels enter the dense losses through the ground-truth validity
    masks; the prediction normalizer z_pred uses the same masks.
    """
    if pred.n_views != len(gt.views):
        raise ShapeError(f"view counts differ: pred {pred.n_views} vs gt {len(gt.views)}")

    gt_rays, gt_depths, gt_local, gt_world = [], [], [], []
    pr_rays, pr_depths, pr_local, pr_world, pr_world_masked = [], [], [], [], []
    confs, mask_probs, gt_masks = [], [], []
    for i, (pv, gv) in enumerate(zip(pred.views, gt.views)):
        if (pv.rays.height, pv.rays.width) != (gv.rays.height, gv.rays.width):
            raise ShapeError(
                f"total loss: view {i} resolution mismatch "
                f"(pred {pv.rays.width}x{pv.rays.height}, gt {gv.rays.width}x{gv.rays.height})"
            )
        gt_rays.append(gv.rays)
        gt_depths.append(gv.depth)
        gl = local_pointmap(gv.rays, gv.depth)
        gt_local.append(gl)
        gt_world.append(world_pointmap(gl, gv.pose))
        pr_rays.append(pv.rays)
        pr_depths.append(pv.depth)
        pl = local_pointmap(pv.rays, pv.depth)
        pr_local.append(pl)
        pw = world_pointmap(pl, pv.pose)
        pr_world.append(pw)
        pr_world_masked.append(PointMap(pw.points, gv.depth.validity & pw.validity))
        confs.append(pv.confidence if pv.confidence is not None else np.ones_like(gv.depth.values))
        mask_probs.append(pv.mask_prob)
        gt_masks.append(gv.mask)

    z_gt = norm_scale(gt_world)
    z_pred = norm_scale(pr_world_masked)

    gt_quats = np.stack([v.pose.rotation for v in gt.views])
    pr_quats = np.stack([v.pose.rotation for v in pred.views])
    gt_trans = np.stack([v.pose.translation for v in gt.views])
    pr_trans = np.stack([v.pose.translation for v in pred.views])

    terms = {
        "pointmap": loss_pointmap_conf(pr_world, gt_world, confs, z_pred, z_gt, p, alpha_conf),
        "rays": loss_rays(pr_rays, gt_rays, p),
        "rot": loss_rot(pr_quats, gt_quats, p),
        "translation": loss_translation(pr_trans, gt_trans, z_pred, z_gt, p),
        "depth": loss_depth(pr_depths, gt_depths, z_pred, z_gt, p, exclude_top),
        "lpm": loss_local_pointmap(pr_local, gt_local, z_pred, z_gt, p, exclude_top),
        "scale": loss_scale(z_gt, pred.scale, z_pred, p),
    }
    if synthetic:
        terms["normal"] = loss_normal(pr_local, gt_local)
        terms["gm"] = loss_gradient_matching(
            [pm.points[:, :, 2] for pm in pr_local],
            [pm.points[:, :, 2] for pm in gt_local],
            [d.validity for d in gt_depths],
        )
    else:
        terms["normal"] = 0.0
        terms["gm"] = 0.0
    if all(mp is not None for mp in mask_probs):
        terms["mask"] = loss_mask(mask_probs, [m.astype(np.float64) for m in gt_masks])
    else:
        terms["mask"] = 0.0
    return LossReport.from_terms(**terms)
