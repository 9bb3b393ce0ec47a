"""Geometry primitives over label grids.

Connected components, the aorta centerline (geodesic endpoints + distance
transform ridge path), orthogonal cross-sections with maximum-diameter
measurement, direct least-squares ellipse fitting and axis extents.

All functions are pure: they never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import ConvexHull, QhullError

from .errors import (
    DegenerateConic,
    DegenerateShape,
    EmptyMask,
    MultipleComponents,
    TooFewPoints,
)


class Connectivity(Enum):
    SIX = 6
    TWENTY_SIX = 26


@dataclass
class ComponentSet:
    """Dense labeling of foreground components (ids 1..K)."""

    labels: np.ndarray          # int32 grid, 0 = background
    counts: np.ndarray          # voxel count per component, index 0 unused
    bboxes: list                # per-component tuple of slices
    connectivity: Connectivity

    @property
    def n_components(self) -> int:
        return len(self.bboxes)


@dataclass
class Centerline:
    """Arc-length parameterized polyline through a tubular mask."""

    points: np.ndarray          # (K, 3) mm
    arc_length_mm: float

    @property
    def endpoint_r(self):
        return self.points[0]

    @property
    def endpoint_e(self):
        return self.points[-1]

    @property
    def chord_mm(self) -> float:
        return float(np.linalg.norm(self.points[-1] - self.points[0]))


@dataclass
class CrossSection:
    """Planar sample of a mask orthogonal to the centerline."""

    center: np.ndarray          # (3,) mm
    tangent: np.ndarray         # (3,) unit
    grid: np.ndarray            # 2D bool, in-plane samples
    pitch_mm: float
    max_diameter_mm: float


@dataclass
class EllipseFit:
    center: tuple[float, float]
    semi_major_mm: float
    semi_minor_mm: float
    rotation_rad: float


def _structure(connectivity: Connectivity):
    order = 1 if connectivity is Connectivity.SIX else 3
    return ndimage.generate_binary_structure(3, order)


def connected_components(mask: np.ndarray,
                         connectivity: Connectivity = Connectivity.TWENTY_SIX
                         ) -> ComponentSet:
    """Label maximal connected foreground components of a binary grid."""
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=_structure(connectivity))
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    bboxes = ndimage.find_objects(labels) if n else []
    return ComponentSet(labels=labels.astype(np.int32), counts=counts,
                        bboxes=bboxes, connectivity=connectivity)


# --- centerline -------------------------------------------------------------

def _neighbor_offsets():
    offs = [(dx, dy, dz)
            for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
            if (dx, dy, dz) != (0, 0, 0)]
    return np.array(offs, dtype=np.int64)


def _foreground_graph(coords, dims, edge_weights):
    """Sparse 26-neighbor graph over foreground voxels.

    edge_weights(i, j, step_mm) maps index pairs plus physical step length to
    edge costs; indices refer to rows of `coords`.
    """
    nx, ny, nz = dims
    flat = coords[:, 0] + nx * (coords[:, 1] + ny * coords[:, 2])
    index_of = -np.ones(nx * ny * nz, dtype=np.int64)
    index_of[flat] = np.arange(len(coords))

    rows, cols, data = [], [], []
    for off in _neighbor_offsets():
        nb = coords + off
        ok = np.all((nb >= 0) & (nb < np.array(dims)), axis=1)
        nb_flat = nb[ok, 0] + nx * (nb[ok, 1] + ny * nb[ok, 2])
        j = index_of[nb_flat]
        valid = j >= 0
        i = np.nonzero(ok)[0][valid]
        j = j[valid]
        step = np.linalg.norm(off * edge_weights["spacing"])
        rows.append(i)
        cols.append(j)
        data.append(edge_weights["cost"](i, j, step))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    data = np.concatenate(data)
    n = len(coords)
    return coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()


def _moving_average(points, window=5):
    if len(points) < window:
        return points
    kernel = np.ones(window) / window
    sm = np.stack([np.convolve(points[:, k], kernel, mode="valid")
                   for k in range(3)], axis=1)
    # keep the original endpoints, smooth the interior
    head = points[:window // 2]
    tail = points[-(window // 2):]
    return np.vstack([head, sm, tail])


def _resample_polyline(points, interval_mm):
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total <= 0:
        return points[:1].copy()
    targets = np.arange(0.0, total, interval_mm)
    targets = np.append(targets, total)
    out = np.empty((len(targets), 3))
    for k in range(3):
        out[:, k] = np.interp(targets, s, points[:, k])
    return out


_STRUCT_2D = ndimage.generate_binary_structure(2, 2)


def _path_tangents(pts, h=4):
    n = len(pts)
    out = np.empty_like(pts)
    for i in range(n):
        a, b = max(0, i - h), min(n - 1, i + h)
        out[i] = pts[b] - pts[a]
    return out


def _recenter_once(maskf, spacing, pts, window_mm, pitch_mm=0.5):
    """Move each point to the centroid of its orthogonal in-plane component."""
    tg = _path_tangents(pts)
    out = pts.copy()
    for i in range(len(pts)):
        if np.linalg.norm(tg[i]) == 0:
            continue
        _, u, v = _plane_basis(tg[i])
        grid = _sample_plane(maskf, spacing, pts[i], u, v, window_mm, pitch_mm)
        mid = grid.shape[0] // 2
        if not grid[mid, mid]:
            continue
        labels, _ = ndimage.label(grid, structure=_STRUCT_2D)
        comp = labels == labels[mid, mid]
        ii, jj = np.nonzero(comp)
        out[i] = (pts[i]
                  + (ii.mean() - mid) * pitch_mm * u
                  + (jj.mean() - mid) * pitch_mm * v)
    return out


def _trim_ends(pts, mm):
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    keep = (s >= mm) & (s <= s[-1] - mm)
    return pts[keep] if keep.sum() >= 5 else pts


def _extend_end(mask, spacing, pts, headfirst, cap_mm, step=0.25):
    dims = np.array(mask.shape)
    p = pts[0] if headfirst else pts[-1]
    ref = pts[min(8, len(pts) - 1)] if headfirst else pts[-min(9, len(pts))]
    t = p - ref
    norm = np.linalg.norm(t)
    if norm == 0:
        return pts
    t /= norm
    ext = []
    cur = p.copy()
    while len(ext) * step < cap_mm:
        cur = cur + step * t
        idx = np.round(cur / spacing).astype(int)
        if np.any(idx < 0) or np.any(idx >= dims) or not mask[tuple(idx)]:
            break
        ext.append(cur.copy())
    if not ext:
        return pts
    ext = np.array(ext)
    return np.vstack([ext[::-1], pts]) if headfirst else np.vstack([pts, ext])


def extract_centerline(mask: np.ndarray, spacing) -> Centerline:
    """Centerline of a single tubular component.

    Pipeline: double-sweep geodesic endpoint detection, minimal-cost path
    pulled onto the ridge of the interior distance transform, iterative
    cross-sectional recentering (which also removes the off-axis ramps that
    the voxel path picks up near the tube ends), end extrapolation to the
    mask boundary, 5-point moving-average smoothing and 1 mm arc-length
    resampling.
    """
    mask = np.asarray(mask, dtype=bool)
    spacing = np.asarray(spacing, dtype=float)
    total = int(mask.sum())
    if total == 0:
        raise EmptyMask("centerline of an empty mask")

    comps = connected_components(mask, Connectivity.TWENTY_SIX)
    big = [k for k in range(1, comps.n_components + 1)
           if comps.counts[k] > 0.05 * total]
    if len(big) > 1:
        raise MultipleComponents(
            f"{len(big)} components above 5% of foreground")
    main = int(np.argmax(comps.counts[1:])) + 1
    mask = comps.labels == main
    if mask.sum() < 50:
        raise DegenerateShape(f"component has {int(mask.sum())} voxels (< 50)")

    # work on the component bounding box (1-voxel margin) for speed
    occ = np.argwhere(mask)
    lo = np.maximum(occ.min(axis=0) - 1, 0)
    hi = np.minimum(occ.max(axis=0) + 2, mask.shape)
    mask = mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    offset_mm = lo * spacing

    dt_mm = ndimage.distance_transform_edt(mask, sampling=spacing)
    if dt_mm.max() < min(spacing):
        raise DegenerateShape("distance transform everywhere < 1 voxel")

    coords = np.argwhere(mask)
    dt_max = float(dt_mm[mask].max())
    dt_vals = dt_mm[tuple(coords.T)]

    # plain geodesic metric for endpoint detection (double sweep)
    plain = {"spacing": spacing,
             "cost": lambda i, j, step: np.full(len(i), step)}
    graph = _foreground_graph(coords, mask.shape, plain)
    d0 = dijkstra(graph, indices=0)
    r_idx = int(np.argmax(np.where(np.isfinite(d0), d0, -1)))
    d1 = dijkstra(graph, indices=r_idx)
    e_idx = int(np.argmax(np.where(np.isfinite(d1), d1, -1)))

    # ridge metric: penalize distance from the medial axis
    beta = 3.0
    penalty = 1.0 + beta * (1.0 - dt_vals / dt_max)

    def ridge_cost(i, j, step):
        return step * 0.5 * (penalty[i] + penalty[j])

    rgraph = _foreground_graph(coords, mask.shape,
                               {"spacing": spacing, "cost": ridge_cost})
    _, pred = dijkstra(rgraph, indices=r_idx, return_predecessors=True)

    path = [e_idx]
    while path[-1] != r_idx:
        p = pred[path[-1]]
        if p < 0:
            raise DegenerateShape("endpoints are not connected")
        path.append(int(p))
    path.reverse()

    pts = coords[path].astype(float) * spacing
    pts = _moving_average(pts, window=5)
    pts = _resample_polyline(pts, 1.0)

    maskf = mask.astype(np.float32)
    window = float(min(60.0, 5 * dt_max))
    for _ in range(3):
        pts = _recenter_once(maskf, spacing, pts, window)
        pts = _moving_average(pts, window=5)
        pts = _resample_polyline(pts, 1.0)

    pts = _trim_ends(pts, 2 * dt_max)
    pts = _extend_end(mask, spacing, pts, True, cap_mm=5 * dt_max)
    pts = _extend_end(mask, spacing, pts, False, cap_mm=5 * dt_max)
    pts = _moving_average(pts, window=5)
    pts = _resample_polyline(pts, 1.0)

    pts = pts + offset_mm
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return Centerline(points=pts, arc_length_mm=float(seg.sum()))


# --- cross sections ---------------------------------------------------------

def _plane_basis(tangent):
    t = tangent / np.linalg.norm(tangent)
    helper = np.array([1.0, 0.0, 0.0])
    if abs(np.dot(helper, t)) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    u = np.cross(t, helper)
    u /= np.linalg.norm(u)
    v = np.cross(t, u)
    return t, u, v


def _sample_plane(maskf, spacing, center, u, v, window_mm, pitch_mm):
    half = window_mm / 2.0
    ticks = np.arange(-half, half + pitch_mm / 2, pitch_mm)
    uu, vv = np.meshgrid(ticks, ticks, indexing="ij")
    pts = (center[None, None, :]
           + uu[..., None] * u[None, None, :]
           + vv[..., None] * v[None, None, :])
    # voxel centers sit at index * spacing (same convention as the centerline);
    # trilinear interpolation keeps the in-plane boundary at sub-voxel accuracy
    coords = (pts / spacing).reshape(-1, 3).T
    vals = ndimage.map_coordinates(maskf, coords,
                                   order=1, mode="constant", cval=0.0)
    return (vals >= 0.5).reshape(uu.shape)


def _max_pairwise_distance(points_2d):
    if len(points_2d) < 2:
        return 0.0
    if len(points_2d) > 4:
        try:
            hull = ConvexHull(points_2d)
            points_2d = points_2d[hull.vertices]
        except QhullError:
            pass
    diff = points_2d[:, None, :] - points_2d[None, :, :]
    return float(np.sqrt((diff ** 2).sum(-1)).max())


def cross_sections(mask: np.ndarray, spacing, centerline: Centerline,
                   interval_mm: float = 1.0,
                   window_mm: float = 100.0,
                   pitch_mm: float = 0.5) -> list[CrossSection]:
    """Orthogonal sections at fixed arc-length intervals.

    Yields exactly floor(arc_length / interval) + 1 sections. The maximum
    diameter is the largest pairwise distance between boundary samples of the
    in-plane component containing the section center (0 if the center misses
    the mask).
    """
    if interval_mm <= 0:
        raise ValueError("interval_mm must be positive")
    maskf = np.asarray(mask, dtype=bool).astype(np.float32)
    spacing = np.asarray(spacing, dtype=float)

    n_sections = int(np.floor(centerline.arc_length_mm / interval_mm)) + 1
    pts = centerline.points
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])

    out = []
    struct = ndimage.generate_binary_structure(2, 2)
    for k in range(n_sections):
        target = min(k * interval_mm, s[-1])
        j = int(np.searchsorted(s, target, side="right")) - 1
        j = min(max(j, 0), len(pts) - 2) if len(pts) > 1 else 0
        if len(pts) > 1:
            t_frac = 0.0 if seg[j] == 0 else (target - s[j]) / seg[j]
            center = pts[j] + t_frac * (pts[j + 1] - pts[j])
            tangent = pts[min(j + 1, len(pts) - 1)] - pts[j]
        else:
            center = pts[0]
            tangent = np.array([0.0, 0.0, 1.0])
        t, u, v = _plane_basis(tangent)
        grid = _sample_plane(maskf, spacing, center, u, v, window_mm, pitch_mm)

        mid = grid.shape[0] // 2
        diameter = 0.0
        if grid[mid, mid]:
            labels, _ = ndimage.label(grid, structure=struct)
            comp = labels == labels[mid, mid]
            boundary = comp & ~ndimage.binary_erosion(comp, structure=struct)
            ii, jj = np.nonzero(boundary)
            pts2d = np.stack([ii, jj], axis=1).astype(float) * pitch_mm
            diameter = _max_pairwise_distance(pts2d)
        out.append(CrossSection(center=center, tangent=t, grid=grid,
                                pitch_mm=pitch_mm, max_diameter_mm=diameter))
    return out


# --- ellipse fitting --------------------------------------------------------

def fit_ellipse(points) -> EllipseFit:
    """Direct least-squares conic fit constrained to ellipses.

    Uses the numerically stable partitioned formulation (scatter-matrix
    blocks), then converts conic coefficients to geometric center, semi-axes
    and rotation.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 6:
        raise TooFewPoints(f"need >= 6 2D points, got {pts.shape}")

    x = pts[:, 0]
    y = pts[:, 1]
    # center the data for conditioning
    mx, my = x.mean(), y.mean()
    xc, yc = x - mx, y - my

    d1 = np.stack([xc * xc, xc * yc, yc * yc], axis=1)
    d2 = np.stack([xc, yc, np.ones_like(xc)], axis=1)
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    c1_inv = np.array([[0.0, 0.0, 0.5], [0.0, -1.0, 0.0], [0.5, 0.0, 0.0]])
    try:
        t_mat = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError as exc:
        raise DegenerateConic("singular scatter matrix (collinear points?)") from exc
    m = c1_inv @ (s1 + s2 @ t_mat)
    eigval, eigvec = np.linalg.eig(m)
    cond = 4 * eigvec[0] * eigvec[2] - eigvec[1] ** 2
    candidates = np.nonzero((cond > 0) & np.isreal(eigval))[0]
    if len(candidates) == 0:
        raise DegenerateConic("no elliptical solution")
    a1 = np.real(eigvec[:, candidates[0]])
    a2 = t_mat @ a1
    a, b, c = a1
    d, e, f = a2

    # shift back to original coordinates
    d_full = d - 2 * a * mx - b * my
    e_full = e - 2 * c * my - b * mx
    f_full = f + a * mx * mx + b * mx * my + c * my * my - d * mx - e * my
    return _conic_to_ellipse(a, b, c, d_full, e_full, f_full)


def _conic_to_ellipse(a, b, c, d, e, f) -> EllipseFit:
    """Geometric parameters of the conic ax^2 + bxy + cy^2 + dx + ey + f = 0."""
    den = b * b - 4 * a * c
    if den >= 0:
        raise DegenerateConic("conic is not an ellipse")
    x0 = (2 * c * d - b * e) / den
    y0 = (2 * a * e - b * d) / den
    # value of the conic at the center; radius along direction w is
    # sqrt(-f0 / (w^T M w)) with M the quadratic-form matrix
    f0 = a * x0 * x0 + b * x0 * y0 + c * y0 * y0 + d * x0 + e * y0 + f
    m = np.array([[a, b / 2.0], [b / 2.0, c]])
    eigval, eigvec = np.linalg.eigh(m)
    with np.errstate(invalid="ignore", divide="ignore"):
        radii = np.sqrt(-f0 / eigval)
    if not np.all(np.isfinite(radii)) or np.any(radii <= 0):
        raise DegenerateConic("degenerate axes")
    major = int(np.argmax(radii))
    theta = float(np.arctan2(eigvec[1, major], eigvec[0, major]))
    theta = (theta + np.pi / 2) % np.pi - np.pi / 2
    return EllipseFit(center=(float(x0), float(y0)),
                      semi_major_mm=float(radii.max()),
                      semi_minor_mm=float(radii.min()),
                      rotation_rad=theta)


# --- extents ----------------------------------------------------------------

def axial_extent_mm(mask: np.ndarray, spacing, labels, axis: int,
                    restrict=None) -> float:
    """(max index - min index + 1) * spacing along `axis` over matching voxels.

    `restrict` optionally limits the measurement to a boolean sub-grid
    (e.g. a single axial slice). Returns 0 for an empty selection.
    """
    mask = np.asarray(mask)
    sel = np.isin(mask, list(labels))
    if restrict is not None:
        sel &= restrict
    if not sel.any():
        return 0.0
    idx = np.nonzero(np.any(sel, axis=tuple(k for k in range(3) if k != axis)))[0]
    return float((idx.max() - idx.min() + 1) * np.asarray(spacing, float)[axis])
