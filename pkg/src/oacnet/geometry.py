"""Parametric global transformations, grids, warping, the grid-distance loss,
and the correct-keypoint metric.

Coordinate convention: normalized [-1,1]^2 with (-1,-1) at the top-left pixel
center; x is the column axis, y the row axis. Every transform, grid, and warp
in the library shares this frame.
"""

from __future__ import annotations

import numpy as np

from .tensor import NumericError, ShapeError, assert_finite


class AffineParams:
    """Six parameters (a11, a12, tx, a21, a22, ty) acting on normalized coords."""

    family = "affine"
    Q = 6

    def __init__(self, theta):
        self.theta = np.asarray(theta, dtype=np.float64).reshape(6)
        assert_finite(self.theta, "affine params")

    @staticmethod
    def identity():
        return AffineParams([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])

    @staticmethod
    def identity_vector():
        return np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])

    @property
    def matrix(self):
        a11, a12, tx, a21, a22, ty = self.theta
        return np.array([[a11, a12], [a21, a22]]), np.array([tx, ty])

    def transform(self, pts):
        A, t = self.matrix
        return pts @ A.T + t

    def jacobian(self, pts):
        """d(transformed point)/d(theta): shape (n, 2, 6)."""
        n = pts.shape[0]
        J = np.zeros((n, 2, 6))
        J[:, 0, 0] = pts[:, 0]
        J[:, 0, 1] = pts[:, 1]
        J[:, 0, 2] = 1.0
        J[:, 1, 3] = pts[:, 0]
        J[:, 1, 4] = pts[:, 1]
        J[:, 1, 5] = 1.0
        return J


def _tps_radial(r2):
    # U(r) = r^2 log(r^2) with U(0) = 0
    out = np.zeros_like(r2)
    mask = r2 > 0
    out[mask] = r2[mask] * np.log(r2[mask])
    return out


class _TpsSolver:
    """Precomputed linear system for a fixed control lattice."""

    _cache = {}

    def __init__(self, grid_n):
        xs = np.linspace(-1.0, 1.0, grid_n)
        cx, cy = np.meshgrid(xs, xs, indexing="xy")
        self.controls = np.stack([cx.reshape(-1), cy.reshape(-1)], axis=1)  # (K,2)
        K = self.controls.shape[0]
        d2 = np.sum((self.controls[:, None, :] - self.controls[None, :, :]) ** 2, axis=2)
        L = np.zeros((K + 3, K + 3))
        L[:K, :K] = _tps_radial(d2)
        P = np.concatenate([np.ones((K, 1)), self.controls], axis=1)
        L[:K, K:] = P
        L[K:, :K] = P.T
        try:
            self.L_inv = np.linalg.inv(L)
        except np.linalg.LinAlgError as e:  # unreachable with a regular lattice
            raise NumericError(f"singular TPS system for {grid_n}x{grid_n} lattice") from e

    @classmethod
    def get(cls, grid_n):
        if grid_n not in cls._cache:
            cls._cache[grid_n] = cls(grid_n)
        return cls._cache[grid_n]

    def basis(self, pts):
        """Rows [U(|p-c_k|), 1, x, y] folded through L^-1: returns (n, K) weights
        mapping control displacements to evaluated displacements."""
        K = self.controls.shape[0]
        d2 = np.sum((pts[:, None, :] - self.controls[None, :, :]) ** 2, axis=2)
        A = np.concatenate([_tps_radial(d2), np.ones((pts.shape[0], 1)), pts], axis=1)
        return A @ self.L_inv[:, :K]


class TpsParams:
    """Thin-plate spline on a fixed regular control lattice.

    theta holds the x displacements of all anchors followed by the y
    displacements (Q = 2 * grid_n^2; 18 for the default 3x3 lattice). Zero
    displacements give the identity map, and the interpolant maps each anchor
    exactly to anchor + displacement.
    """

    family = "tps"

    def __init__(self, theta, grid_n=3):
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        k = grid_n * grid_n
        if theta.size != 2 * k:
            raise ShapeError(f"TPS with {grid_n}x{grid_n} lattice needs {2*k} params, got {theta.size}")
        assert_finite(theta, "tps params")
        self.theta = theta
        self.grid_n = grid_n
        self.Q = 2 * k

    @staticmethod
    def identity(grid_n=3):
        return TpsParams(np.zeros(2 * grid_n * grid_n), grid_n)

    @property
    def controls(self):
        return _TpsSolver.get(self.grid_n).controls

    def transform(self, pts):
        B = _TpsSolver.get(self.grid_n).basis(pts)
        k = self.grid_n * self.grid_n
        dx = B @ self.theta[:k]
        dy = B @ self.theta[k:]
        return pts + np.stack([dx, dy], axis=1)

    def jacobian(self, pts):
        B = _TpsSolver.get(self.grid_n).basis(pts)
        n, k = B.shape
        J = np.zeros((n, 2, 2 * k))
        J[:, 0, :k] = B
        J[:, 1, k:] = B
        return J


def params_from_vector(family, vec, grid_n=3):
    if family == "affine":
        return AffineParams(vec)
    if family == "tps":
        return TpsParams(vec, grid_n)
    raise ValueError(f"unknown transform family {family!r}")


def identity_vector(family, grid_n=3):
    if family == "affine":
        return AffineParams.identity_vector()
    if family == "tps":
        return np.zeros(2 * grid_n * grid_n)
    raise ValueError(f"unknown transform family {family!r}")


class ComposedTransform:
    """Sequential application: second(first(p)). Usable by tgd/pck/warp."""

    family = "composed"

    def __init__(self, first, second):
        self.first = first
        self.second = second

    def transform(self, pts):
        return self.second.transform(self.first.transform(pts))


def compose_affine_tps(theta_aff, theta_tps):
    return ComposedTransform(theta_aff, theta_tps)


# ---------------------------------------------------------------------------
# Grids and the training loss


def make_regular_grid(n_per_side):
    if n_per_side < 2:
        raise ValueError("grid needs at least 2 points per side")
    xs = np.linspace(-1.0, 1.0, n_per_side)
    gx, gy = np.meshgrid(xs, xs, indexing="xy")
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def tgd(theta, theta_gt, grid):
    """Mean squared distance between grids transformed by prediction vs truth.

    Returns (loss, gradient wrt theta's parameter vector); theta_gt is constant.
    """
    if grid.shape[0] == 0:
        raise ValueError("empty grid")
    if theta.family != theta_gt.family:
        raise ValueError(f"family mismatch: {theta.family} vs {theta_gt.family}")
    p = theta.transform(grid)
    q = theta_gt.transform(grid)
    diff = p - q  # (n,2)
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    J = theta.jacobian(grid)  # (n,2,Q)
    grad = 2.0 * np.einsum("nd,ndq->q", diff, J) / grid.shape[0]
    return loss, grad


def tgd_value(theta, theta_gt, grid):
    return tgd(theta, theta_gt, grid)[0]


# ---------------------------------------------------------------------------
# PCK


def normalize_points(pix, image_hw):
    """Pixel coords (x,y) to normalized [-1,1]; pixel centers at the extremes."""
    h, w = image_hw
    out = np.empty_like(pix, dtype=np.float64)
    out[:, 0] = -1.0 + 2.0 * pix[:, 0] / (w - 1)
    out[:, 1] = -1.0 + 2.0 * pix[:, 1] / (h - 1)
    return out


def denormalize_points(norm, image_hw):
    h, w = image_hw
    out = np.empty_like(norm, dtype=np.float64)
    out[:, 0] = (norm[:, 0] + 1.0) * (w - 1) / 2.0
    out[:, 1] = (norm[:, 1] + 1.0) * (h - 1) / 2.0
    return out


def pck(pairs, predicted, alpha_pck, image_hw):
    """Pooled fraction of keypoints transformed to within alpha*max(h,w) of target.

    pairs: dict pair_id -> {src (n,2) pixel, trg (n,2) pixel, bbox_h, bbox_w};
    predicted: dict pair_id -> transform params.
    """
    if alpha_pck <= 0:
        raise ValueError("alpha must be positive")
    total = 0
    correct = 0
    for pid, rec in pairs.items():
        theta = predicted[pid]
        src_n = normalize_points(rec["src"], image_hw)
        mapped = denormalize_points(theta.transform(src_n), image_hw)
        dist = np.sqrt(np.sum((mapped - rec["trg"]) ** 2, axis=1))
        thresh = alpha_pck * max(rec["bbox_h"], rec["bbox_w"])
        correct += int(np.sum(dist < thresh))
        total += dist.size
    if total == 0:
        raise ValueError("empty keypoint set")
    return correct / total


# ---------------------------------------------------------------------------
# Warping


def _reflect_index(idx, n):
    """Fold arbitrary integer indices into [0, n-1] by edge-excluding reflection."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def bilinear_sample(image, pix_x, pix_y, snap_tol=1e-9):
    """Sample (C,H,W) image at fractional pixel coords; reflection outside.

    Coordinates within snap_tol of an integer are snapped so that identity
    resampling is bit-exact.
    """
    C, H, W = image.shape
    rx = np.rint(pix_x)
    ry = np.rint(pix_y)
    pix_x = np.where(np.abs(pix_x - rx) < snap_tol, rx, pix_x)
    pix_y = np.where(np.abs(pix_y - ry) < snap_tol, ry, pix_y)
    x0 = np.floor(pix_x).astype(np.int64)
    y0 = np.floor(pix_y).astype(np.int64)
    fx = pix_x - x0
    fy = pix_y - y0
    x0r = _reflect_index(x0, W)
    x1r = _reflect_index(x0 + 1, W)
    y0r = _reflect_index(y0, H)
    y1r = _reflect_index(y0 + 1, H)
    v00 = image[:, y0r, x0r]
    v01 = image[:, y0r, x1r]
    v10 = image[:, y1r, x0r]
    v11 = image[:, y1r, x1r]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


def bilinear_warp(image, theta):
    """Output at normalized grid point g samples the input at T_theta(g)."""
    C, H, W = image.shape
    xs = np.linspace(-1.0, 1.0, W)
    ys = np.linspace(-1.0, 1.0, H)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    pts = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
    mapped = theta.transform(pts)
    pix = denormalize_points(mapped, (H, W))
    out = bilinear_sample(image, pix[:, 0].reshape(H, W), pix[:, 1].reshape(H, W))
    return assert_finite(out, "warped image")


def mirror_pad(image, pad):
    if pad < 1:
        raise ValueError("pad must be >= 1")
    if pad >= min(image.shape[1], image.shape[2]):
        raise ValueError("reflection pad must be smaller than the image")
    return np.pad(image, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")


def max_border_displacement(theta, n_probe=41):
    """Largest |T(g) - g| (per axis, normalized units) over the crop border."""
    ts = np.linspace(-1.0, 1.0, n_probe)
    border = np.concatenate(
        [
            np.stack([ts, np.full_like(ts, -1.0)], axis=1),
            np.stack([ts, np.full_like(ts, 1.0)], axis=1),
            np.stack([np.full_like(ts, -1.0), ts], axis=1),
            np.stack([np.full_like(ts, 1.0), ts], axis=1),
        ]
    )
    mapped = theta.transform(border)
    over = np.maximum(np.abs(mapped) - 1.0, 0.0)
    return float(over.max())


def mirror_pad_center_crop(image, pad, theta):
    """Reflect-pad, then produce (center crop, warp of padded image cropped back).

    The transform acts in the crop's normalized frame; samples land in the
    padded image. Raises when the transform can reach outside the padded extent.
    """
    C, H, W = image.shape
    padded = mirror_pad(image, pad)
    # slack available beyond the crop, in crop-normalized units
    slack_x = 2.0 * pad / (W - 1)
    slack_y = 2.0 * pad / (H - 1)
    excess = max_border_displacement(theta)
    if excess > min(slack_x, slack_y) + 1e-12:
        raise ValueError(
            f"pad {pad} too small: transform exceeds crop frame by {excess:.4f}, "
            f"slack is {min(slack_x, slack_y):.4f}"
        )
    source_crop = padded[:, pad : pad + H, pad : pad + W].copy()
    xs = np.linspace(-1.0, 1.0, W)
    ys = np.linspace(-1.0, 1.0, H)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    pts = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
    mapped = theta.transform(pts)
    # crop-normalized -> padded-image pixel coords
    pix_x = pad + (mapped[:, 0] + 1.0) * (W - 1) / 2.0
    pix_y = pad + (mapped[:, 1] + 1.0) * (H - 1) / 2.0
    target_crop = bilinear_sample(padded, pix_x.reshape(H, W), pix_y.reshape(H, W))
    return source_crop, assert_finite(target_crop, "target crop")


# ---------------------------------------------------------------------------
# Random transform sampling

AFFINE_MAX_ROTATION = np.deg2rad(15.0)
AFFINE_SCALE_RANGE = (0.75, 1.25)
AFFINE_MAX_SHEAR = 0.15
AFFINE_MAX_TRANSLATION = 0.25
TPS_MAX_DISPLACEMENT = 0.4
MIN_ABS_DET = 0.1


def sample_random_transform(family, rng, grid_n=3):
    """Draw transform params near identity; deterministic given the generator state."""
    if family == "affine":
        while True:
            rot = rng.uniform(-AFFINE_MAX_ROTATION, AFFINE_MAX_ROTATION)
            sx = rng.uniform(*AFFINE_SCALE_RANGE)
            sy = rng.uniform(*AFFINE_SCALE_RANGE)
            shear = rng.uniform(-AFFINE_MAX_SHEAR, AFFINE_MAX_SHEAR)
            tx = rng.uniform(-AFFINE_MAX_TRANSLATION, AFFINE_MAX_TRANSLATION)
            ty = rng.uniform(-AFFINE_MAX_TRANSLATION, AFFINE_MAX_TRANSLATION)
            c, s = np.cos(rot), np.sin(rot)
            R = np.array([[c, -s], [s, c]])
            Sh = np.array([[1.0, shear], [0.0, 1.0]])
            Sc = np.array([[sx, 0.0], [0.0, sy]])
            A = R @ Sh @ Sc
            if abs(np.linalg.det(A)) >= MIN_ABS_DET:
                return AffineParams([A[0, 0], A[0, 1], tx, A[1, 0], A[1, 1], ty])
    if family == "tps":
        k = grid_n * grid_n
        disp = rng.uniform(-TPS_MAX_DISPLACEMENT, TPS_MAX_DISPLACEMENT, size=2 * k)
        return TpsParams(disp, grid_n)
    raise ValueError(f"unknown transform family {family!r}")
