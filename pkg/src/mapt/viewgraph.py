"""Covisibility graphs, random-walk view sampling and the probabilistic
geometric-input configuration sampler used for training-style conditioning."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientComponentError, InvalidValueError, ShapeError
from .geometry import DepthAlongRay, quat_to_rot
from .synth import SceneSample

# Training-time conditioning probabilities.
GEOMETRIC_INPUT_PROB = 0.9
FACTOR_INPUT_PROB = 0.5
DENSE_VS_SPARSE_PROB = 0.5
PER_VIEW_INPUT_PROB = 0.95
METRIC_WITHHOLD_PROB = 0.05
SPARSE_KEEP_FRACTION = 0.1

DEFAULT_COVIS_THRESHOLD = 0.25
DEFAULT_REL_DEPTH_TOL = 0.05


@dataclass
class CovisGraph:
    """Directed covisibility fractions: entry (i, j) is the fraction of view i's
    valid pixels that reproject consistently into view j. Diagonal is 1."""

    fraction: np.ndarray  # (n, n) float64 in [0, 1]

    def __post_init__(self):
        f = np.asarray(self.fraction, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] != f.shape[1]:
            raise ShapeError("covisibility matrix must be square")
        if np.min(f) < 0.0 or np.max(f) > 1.0:
            raise InvalidValueError("covisibility fractions must lie in [0, 1]")
        if not np.all(np.diag(f) == 1.0):
            raise InvalidValueError("covisibility diagonal must be exactly 1")
        self.fraction = f

    @property
    def n(self) -> int:
        return self.fraction.shape[0]


@dataclass
class InputConfig:
    """Which factored quantities are fed to the network, per view plus globals.

    The sample-level draw record (geometric_enabled, *_selected,
    depth_sparse_mode, metric_withheld) is kept so the sampler's marginal
    probabilities are directly measurable.
    """

    rays_given: list[bool]
    pose_given: list[bool]
    depth_given: list[bool]
    depth_sparse: list[bool]
    metric_pose_scale_given: bool = False
    metric_depth_scale_given: bool = False
    geometric_enabled: bool = False
    rays_selected: bool = False
    pose_selected: bool = False
    depth_selected: bool = False
    depth_sparse_mode: bool = False
    metric_withheld: bool = False

    def __post_init__(self):
        n = len(self.rays_given)
        if not (len(self.pose_given) == len(self.depth_given) == len(self.depth_sparse) == n):
            raise ShapeError("per-view flag lists must have equal length")
        for s, g in zip(self.depth_sparse, self.depth_given):
            if s and not g:
                raise InvalidValueError("depth_sparse requires depth_given")

    @property
    def n_views(self) -> int:
        return len(self.rays_given)

    @classmethod
    def images_only(cls, n_views: int) -> "InputConfig":
        off = [False] * n_views
        return cls(rays_given=list(off), pose_given=list(off), depth_given=list(off), depth_sparse=list(off))

    @classmethod
    def from_modalities(
        cls,
        n_views: int,
        rays: bool = False,
        pose: bool = False,
        depth: bool = False,
        depth_sparse: bool = False,
        metric_pose_scale: bool | None = None,
        metric_depth_scale: bool | None = None,
    ) -> "InputConfig":
        """All-view configuration from modality switches (the CLI path)."""
        depth = depth or depth_sparse
        return cls(
            rays_given=[rays] * n_views,
            pose_given=[pose] * n_views,
            depth_given=[depth] * n_views,
            depth_sparse=[depth_sparse] * n_views,
            metric_pose_scale_given=pose if metric_pose_scale is None else metric_pose_scale,
            metric_depth_scale_given=depth if metric_depth_scale is None else metric_depth_scale,
            geometric_enabled=rays or pose or depth,
            rays_selected=rays,
            pose_selected=pose,
            depth_selected=depth,
            depth_sparse_mode=depth_sparse,
        )


# ---------------------------------------------------------------------------
# covisibility


def _view_tables(scene: SceneSample):
    tables = []
    for v in scene.views:
        rot = quat_to_rot(v.pose.rotation)
        d = v.rays.directions
        m = v.depth.validity
        tables.append(
            {
                "dx": d[:, :, 0][m],
                "dy": d[:, :, 1][m],
                "dz": d[:, :, 2][m],
                "depth": v.depth.values[m],
                "rot": rot,
                "t": v.pose.translation,
                "validity": m,
                "values": v.depth.values,
                "k": v.intrinsics,
                "w": v.rays.width,
                "h": v.rays.height,
            }
        )
    # group target views by resolution so one source row is evaluated against
    # a whole stack of targets in a few vectorized passes
    groups = {}
    for j, t in enumerate(tables):
        groups.setdefault((t["h"], t["w"]), []).append(j)
    stacks = []
    for (h, w), idxs in groups.items():
        stacks.append(
            {
                "idxs": np.array(idxs, dtype=np.int64),
                "h": h,
                "w": w,
                "rot": np.stack([tables[j]["rot"] for j in idxs]),
                "t": np.stack([tables[j]["t"] for j in idxs]),
                "fx": np.array([tables[j]["k"].fx for j in idxs]),
                "fy": np.array([tables[j]["k"].fy for j in idxs]),
                "cx": np.array([tables[j]["k"].cx for j in idxs]),
                "cy": np.array([tables[j]["k"].cy for j in idxs]),
                "validity": np.stack([tables[j]["validity"] for j in idxs]),
                "values": np.stack([tables[j]["values"] for j in idxs]),
            }
        )
    return tables, stacks


def _covis_row(i: int, tables: list, stacks: list, tol: float) -> np.ndarray:
    """Covisible fractions of view i's valid pixels into every other view.

    Arithmetic is written out component-wise (broadcast over a stack of target
    views) so a naive per-pixel reference computes bit-identical values.
    """
    n = len(tables)
    src = tables[i]
    row = np.zeros(n)
    row[i] = 1.0
    n_valid = src["depth"].shape[0]
    if n_valid == 0:
        return row
    lx = src["dx"] * src["depth"]
    ly = src["dy"] * src["depth"]
    lz = src["dz"] * src["depth"]
    ri, ti = src["rot"], src["t"]
    wx = ri[0, 0] * lx + ri[0, 1] * ly + ri[0, 2] * lz + ti[0]
    wy = ri[1, 0] * lx + ri[1, 1] * ly + ri[1, 2] * lz + ti[1]
    wz = ri[2, 0] * lx + ri[2, 1] * ly + ri[2, 2] * lz + ti[2]
    for st in stacks:
        keep = st["idxs"] != i
        if not np.any(keep):
            continue
        idxs = st["idxs"][keep]
        rot = st["rot"][keep]  # (V, 3, 3)
        t = st["t"][keep]
        ax = wx[None, :] - t[:, 0, None]
        ay = wy[None, :] - t[:, 1, None]
        az = wz[None, :] - t[:, 2, None]
        cx = rot[:, 0, 0, None] * ax + rot[:, 1, 0, None] * ay + rot[:, 2, 0, None] * az
        cy = rot[:, 0, 1, None] * ax + rot[:, 1, 1, None] * ay + rot[:, 2, 1, None] * az
        cz = rot[:, 0, 2, None] * ax + rot[:, 1, 2, None] * ay + rot[:, 2, 2, None] * az
        front = cz > 0.0
        safe_z = np.where(front, cz, 1.0)
        u = st["fx"][keep][:, None] * (cx / safe_z) + st["cx"][keep][:, None]
        v = st["fy"][keep][:, None] * (cy / safe_z) + st["cy"][keep][:, None]
        inb = front & (u >= 0.0) & (u < st["w"]) & (v >= 0.0) & (v < st["h"])
        if not np.any(inb):
            continue
        rows = np.broadcast_to(np.arange(idxs.size)[:, None], u.shape)[inb]
        px = np.floor(u[inb]).astype(np.int64)
        py = np.floor(v[inb]).astype(np.int64)
        ok = st["validity"][keep][rows, py, px]
        if not np.any(ok):
            continue
        dj = st["values"][keep][rows, py, px][ok]
        sel = inb.copy()
        sel[inb] = ok
        cxs, cys, czs = cx[sel], cy[sel], cz[sel]
        rd = np.sqrt(cxs * cxs + cys * cys + czs * czs)
        cov = np.abs(rd - dj) / dj <= tol
        counts = np.bincount(rows[ok][cov], minlength=idxs.size)
        for slot, j in enumerate(idxs):
            row[j] = counts[slot] / n_valid
    return row


def covisibility(scene: SceneSample, rel_depth_tol: float = DEFAULT_REL_DEPTH_TOL, jobs: int | None = None) -> CovisGraph:
    """Pairwise covisibility via lift-and-reproject with a relative depth check.

    A valid pixel of view i is covisible in view j when its world point lands
    in front of j, projects inside j's image, the nearest pixel is valid, and
    the reprojected ray depth matches the sampled one within rel_depth_tol.
    Rows (source views) are evaluated in parallel.
    """
    if any(v.intrinsics is None for v in scene.views):
        raise InvalidValueError("covisibility requires ground-truth intrinsics")
    tables, stacks = _view_tables(scene)
    n = len(tables)
    out = np.zeros((n, n))
    if jobs is None or jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = pool.map(lambda i: _covis_row(i, tables, stacks, rel_depth_tol), range(n))
            for i, row in enumerate(rows):
                out[i] = row
    else:
        for i in range(n):
            out[i] = _covis_row(i, tables, stacks, rel_depth_tol)
    return CovisGraph(out)


def build_adjacency(g: CovisGraph, threshold: float = DEFAULT_COVIS_THRESHOLD) -> np.ndarray:
    """Undirected adjacency: edge when either directed fraction reaches the threshold."""
    sym = np.maximum(g.fraction, g.fraction.T)
    adj = sym >= threshold
    np.fill_diagonal(adj, False)
    return adj


# ---------------------------------------------------------------------------
# sampling


def _components(adj: np.ndarray) -> list[list[int]]:
    n = adj.shape[0]
    seen = np.zeros(n, dtype=bool)
    comps = []
    for s in range(n):
        if seen[s]:
            continue
        stack, comp = [s], []
        seen[s] = True
        while stack:
            u = stack.pop()
            comp.append(u)
            for w in np.flatnonzero(adj[u]):
                if not seen[w]:
                    seen[w] = True
                    stack.append(int(w))
        comps.append(sorted(comp))
    return comps


def random_walk_sample(adj: np.ndarray, n_views: int, rng_seed: int) -> list[int]:
    """Random walk over an undirected adjacency collecting n_views distinct nodes.

    Start node is uniform over nodes whose component is large enough; each step
    moves to a uniform neighbor of the current node (added if new), restarting
    at a random visited node on dead ends. The induced subgraph of the result
    is connected by construction. Deterministic per seed.
    """
    adj = np.asarray(adj, dtype=bool)
    n = adj.shape[0]
    if n_views < 1:
        raise InvalidValueError("n_views must be >= 1")
    comps = _components(adj)
    eligible = [u for comp in comps if len(comp) >= n_views for u in comp]
    if not eligible:
        raise InsufficientComponentError(
            f"no connected component of size >= {n_views} at this threshold"
        )
    rng = np.random.default_rng(rng_seed)
    nbrs = [np.flatnonzero(adj[u]) for u in range(n)]
    start = int(eligible[rng.integers(len(eligible))])
    visited = [start]
    vset = {start}
    current = start
    budget = 1000 + 50 * n * max(n_views, 2)
    while len(visited) < n_views and budget > 0:
        budget -= 1
        cand = nbrs[current]
        if cand.size == 0:
            current = visited[int(rng.integers(len(visited)))]
            continue
        nxt = int(cand[rng.integers(cand.size)])
        if nxt not in vset:
            visited.append(nxt)
            vset.add(nxt)
        current = nxt
    # the walk almost surely finishes well inside the budget; complete
    # deterministically from the frontier if it ever does not
    while len(visited) < n_views:
        ext = sorted({int(w) for u in visited for w in nbrs[u] if int(w) not in vset})
        visited.append(ext[0])
        vset.add(ext[0])
    return visited


def sample_input_config(n_views: int, metric_gt_available: bool, rng_seed: int) -> InputConfig:
    """Draw one training-style input configuration.

    Draw order (fixed): geometric master (p=0.9); per-factor selection for
    rays/depth/pose (p=0.5 each); dense-vs-sparse mode when depth is selected
    (p=0.5); per-view application per selected factor (p=0.95); metric-scale
    withholding when metric ground truth exists (p=0.05).
    """
    if n_views < 1:
        raise InvalidValueError("n_views must be >= 1")
    rng = np.random.default_rng(rng_seed)
    geometric = bool(rng.random() < GEOMETRIC_INPUT_PROB)
    rays_sel = depth_sel = pose_sel = False
    sparse_mode = False
    off = [False] * n_views
    rays_given, depth_given, pose_given = list(off), list(off), list(off)
    if geometric:
        rays_sel = bool(rng.random() < FACTOR_INPUT_PROB)
        depth_sel = bool(rng.random() < FACTOR_INPUT_PROB)
        pose_sel = bool(rng.random() < FACTOR_INPUT_PROB)
        if depth_sel:
            sparse_mode = bool(rng.random() < DENSE_VS_SPARSE_PROB)
        if rays_sel:
            rays_given = [bool(u) for u in rng.random(n_views) < PER_VIEW_INPUT_PROB]
        if depth_sel:
            depth_given = [bool(u) for u in rng.random(n_views) < PER_VIEW_INPUT_PROB]
        if pose_sel:
            pose_given = [bool(u) for u in rng.random(n_views) < PER_VIEW_INPUT_PROB]
    withheld = False
    if metric_gt_available:
        withheld = bool(rng.random() < METRIC_WITHHOLD_PROB)
    give_metric = metric_gt_available and not withheld
    return InputConfig(
        rays_given=rays_given,
        pose_given=pose_given,
        depth_given=depth_given,
        depth_sparse=[sparse_mode and g for g in depth_given],
        metric_pose_scale_given=give_metric and pose_sel,
        metric_depth_scale_given=give_metric and depth_sel,
        geometric_enabled=geometric,
        rays_selected=rays_sel,
        pose_selected=pose_sel,
        depth_selected=depth_sel,
        depth_sparse_mode=sparse_mode,
        metric_withheld=withheld,
    )


def sparsify_depth(d: DepthAlongRay, keep_fraction: float = SPARSE_KEEP_FRACTION, rng_seed: int = 0) -> DepthAlongRay:
    """Keep floor(keep_fraction * valid) uniformly random valid pixels, invalidate
    the rest. Retained values are bit-equal to the originals."""
    if not (0.0 < keep_fraction <= 1.0):
        raise InvalidValueError("keep_fraction must lie in (0, 1]")
    rng = np.random.default_rng(rng_seed)
    idx = np.flatnonzero(d.validity.ravel())
    k = int(np.floor(keep_fraction * idx.size))
    chosen = rng.choice(idx, size=k, replace=False) if idx.size else idx
    validity = np.zeros_like(d.validity).ravel()
    validity[chosen] = True
    validity = validity.reshape(d.validity.shape)
    return DepthAlongRay(np.where(validity, d.values, 0.0), validity)
