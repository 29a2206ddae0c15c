"""Planar homography estimation and image warping between the two cameras.

Points are ``(x, y)`` pixel coordinates with ``x`` along columns. A
homography ``H`` maps a point in image A to its location in image B.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import combinations
from pathlib import Path

import numpy as np


class DegenerateConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Homography:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if m[2, 2] == 0:
            raise DegenerateConfigurationError("homography has h33 == 0 and cannot be normalized")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-9:
            raise DegenerateConfigurationError(f"homography is singular (det={np.linalg.det(m):.3g})")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, dx: float, dy: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]]))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def compose(self, other: "Homography") -> "Homography":
        """``self`` applied after ``other``."""
        return Homography(self.matrix @ other.matrix)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        hom = np.hstack([pts, np.ones((len(pts), 1))]) @ self.matrix.T
        return hom[:, :2] / hom[:, 2:3]


# linear algebra -----------------------------------------------------------------


def jacobi_svd(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """One-sided Jacobi: returns singular values (descending) and right singular vectors as columns."""
    u = np.array(a, dtype=np.float64, copy=True)
    n = u.shape[1]
    v = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = u[:, p] @ u[:, p]
                beta = u[:, q] @ u[:, q]
                gamma = u[:, p] @ u[:, q]
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                # a denormal gamma can overflow zeta; t -> 0 is the right limit there
                with np.errstate(over="ignore"):
                    zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.hypot(1.0, zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                up, uq = u[:, p].copy(), u[:, q]
                u[:, p] = c * up - s * uq
                u[:, q] = s * up + c * uq
                vp, vq = v[:, p].copy(), v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        if not rotated:
            break
    sv = np.linalg.norm(u, axis=0)
    order = np.argsort(-sv, kind="stable")
    return sv[order], v[:, order]


def _normalizer(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    dist = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    if dist == 0:
        raise DegenerateConfigurationError("all points coincide")
    s = np.sqrt(2.0) / dist
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def _collinear(p: np.ndarray, tol: float) -> bool:
    a, b, c = p
    area = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
    scale = max(np.ptp(p[:, 0]), np.ptp(p[:, 1]), 1e-300) ** 2
    return area <= tol * scale


def _check_geometry(src: np.ndarray, dst: np.ndarray) -> None:
    for name, pts in (("A", src), ("B", dst)):
        centered = pts - pts.mean(axis=0)
        sv = np.linalg.svd(centered, compute_uv=False)
        if sv[-1] <= 1e-9 * max(sv[0], 1e-300):
            raise DegenerateConfigurationError(f"points in image {name} are collinear")
        if len(pts) == 4:
            for tri in combinations(range(4), 3):
                if _collinear(pts[list(tri)], 1e-9):
                    raise DegenerateConfigurationError(f"three of the four points in image {name} are collinear")


def estimate_homography(points: np.ndarray) -> Homography:
    """Normalized DLT from rows ``(xA, yA, xB, yB)``; returns H with B ~ H A."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise ValueError(f"expected an (N, 4) correspondence array, got shape {pts.shape}")
    if len(pts) < 4:
        raise DegenerateConfigurationError(f"need at least 4 correspondences, got {len(pts)}")
    src, dst = pts[:, :2], pts[:, 2:]
    _check_geometry(src, dst)
    ta, tb = _normalizer(src), _normalizer(dst)
    sa = np.hstack([src, np.ones((len(src), 1))]) @ ta.T
    sb = np.hstack([dst, np.ones((len(dst), 1))]) @ tb.T
    rows = []
    for (x, y, _), (u, v, _) in zip(sa, sb):
        rows.append([-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u])
        rows.append([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v])
    system = np.asarray(rows)
    sv, vecs = jacobi_svd(system)
    if sv[-2] <= 1e-10 * sv[0]:
        raise DegenerateConfigurationError("correspondence system is rank deficient")
    h_norm = vecs[:, -1].reshape(3, 3)
    h = np.linalg.inv(tb) @ h_norm @ ta
    if abs(h[2, 2]) < 1e-12 * np.abs(h).max():
        raise DegenerateConfigurationError("estimated homography maps the origin to infinity")
    return Homography(h / h[2, 2])


def reprojection_error(h: Homography, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return np.linalg.norm(h.apply(pts[:, :2]) - pts[:, 2:], axis=1)


# warping ----------------------------------------------------------------------------


def sample_bilinear(image: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill: float) -> np.ndarray:
    """Sample ``image`` [C,H,W] at float coords; out-of-bounds points take ``fill``."""
    c, h, w = image.shape
    eps = 1e-9
    valid = (xs >= -eps) & (xs <= w - 1 + eps) & (ys >= -eps) & (ys <= h - 1 + eps)
    x = np.clip(xs, 0, w - 1)
    y = np.clip(ys, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    out = (
        image[:, y0, x0] * ((1 - fx) * (1 - fy))
        + image[:, y0, x1] * (fx * (1 - fy))
        + image[:, y1, x0] * ((1 - fx) * fy)
        + image[:, y1, x1] * (fx * fy)
    )
    return np.where(valid, out, fill)


def warp(image: np.ndarray, H: Homography, fill: float = 0.0) -> np.ndarray:
    """Output pixel p takes the input value at ``H^-1 p`` (bilinear)."""
    if not isinstance(H, Homography):
        H = Homography(np.asarray(H))
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[None]
    _, h, w = image.shape
    if np.array_equal(H.matrix, np.eye(3)):
        out = image.copy()
        return out[0] if squeeze else out
    inv = np.linalg.inv(H.matrix)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    hom = inv @ np.stack([xx.ravel(), yy.ravel(), np.ones(h * w)])
    xs = (hom[0] / hom[2]).reshape(h, w)
    ys = (hom[1] / hom[2]).reshape(h, w)
    out = sample_bilinear(image, xs, ys, fill)
    return out[0] if squeeze else out


def register_pair(sample, H: Homography, fill: float | None = None):
    """Warp the B image of a PairSample into A's frame, leaving residual (object/temporal) misalignment."""
    if fill is None:
        fill = float(np.median(sample.imgB))
    img_b = warp(sample.imgB, H.inverse(), fill=fill)
    residual = replace(sample.misalign, homography=None)
    return replace(sample, imgB=img_b, misalign=residual)


# file formats -------------------------------------------------------------------------


def read_correspondences(path: str | Path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 'xA yA xB yB', got {len(parts)} fields")
        rows.append([float(v) for v in parts])
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def write_correspondences(path: str | Path, points: np.ndarray, comment: str = "") -> None:
    lines = [f"# {comment}"] if comment else []
    lines += [" ".join(f"{v:.10f}" for v in row) for row in np.asarray(points)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_homography(path: str | Path, H: Homography) -> None:
    Path(path).write_text(" ".join(repr(float(v)) for v in H.matrix.ravel()) + "\n")


def read_homography(path: str | Path) -> Homography:
    vals = [float(v) for v in Path(path).read_text().split()]
    if len(vals) != 9:
        raise ValueError(f"{path}: expected 9 numbers, got {len(vals)}")
    return Homography(np.asarray(vals).reshape(3, 3))


def checkerboard_points(rows: int = 6, cols: int = 8, height: int = 96, width: int = 96,
                        margin: float = 10.0) -> np.ndarray:
    """Board corner positions in image A (corner detection itself happens elsewhere)."""
    xs = np.linspace(margin, width - 1 - margin, cols)
    ys = np.linspace(margin, height - 1 - margin, rows)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def synth_correspondences(H: Homography, pts_a: np.ndarray, noise: float = 0.0,
                          rng: np.random.Generator | None = None) -> np.ndarray:
    pts_b = H.apply(pts_a)
    if noise > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        pts_b = pts_b + rng.normal(0.0, noise, size=pts_b.shape)
    return np.hstack([pts_a, pts_b])
