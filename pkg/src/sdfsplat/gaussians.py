"""Gaussian scene model: primitives, cameras, covariance, and projection.

Single-primitive operations (``covariance``, ``evaluate_gaussian``,
``shortest_axis``, ``project_primitive``) are plain numpy and serve as the
contract surface and test oracles.  The batched, tape-compatible versions
(``cloud_*``, ``project_cloud``) drive the differentiable renderer and are
cross-checked against the single-primitive path in the tests.

Activation conventions (3DGS-style, so raw parameters are unconstrained):
opacity/albedo/roughness/metallicity decode through a sigmoid, per-axis
standard deviations through exp.  The shading normal is the camera-facing
shortest covariance axis plus a world-space learned residual, renormalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .linalg import InvalidInputError, quat_to_rotmat, rotmats_from_quat_components

# low-pass floor added to projected 2D covariance diagonals (pixels^2)
COV2D_LOWPASS = 0.3
# cull splats whose 3-sigma pixel extent misses the image entirely
CULL_SIGMA = 3.0

PARAM_FIELDS = (
    "means",
    "quats",
    "log_scales",
    "opacity_logits",
    "albedo_logits",
    "roughness_logits",
    "metallic_logits",
    "normal_residuals",
)


@dataclass
class GaussianPrimitive:
    """One anisotropic Gaussian with opacity and BRDF attributes."""

    mean: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float = 0.0
    albedo_logit: np.ndarray = field(default_factory=lambda: np.zeros(3))
    roughness_logit: float = 0.0
    metallic_logit: float = 0.0
    normal_residual: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def opacity(self):
        return float(ad.value_of(ad.sigmoid(np.asarray(self.opacity_logit))))

    def scales(self):
        return np.exp(np.asarray(self.log_scale, dtype=np.float64))


@dataclass
class Camera:
    """Pinhole camera; `rotation`/`translation` map world to camera space
    (x_cam = R x_world + t), +z looks into the scene."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if not self.near < self.far:
            raise InvalidInputError("near plane must be closer than far plane")
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-6:
            raise InvalidInputError("camera rotation is not orthonormal")

    @property
    def origin(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self):
        """World-space view axis (+z of the camera frame)."""
        return self.rotation[2]

    def pixel_rays(self, pixels):
        """World-space unit ray directions through pixel centers (N, 2) -> (N, 3)."""
        px = np.asarray(pixels, dtype=np.float64)
        d_cam = np.stack(
            [
                (px[:, 0] - self.cx) / self.fx,
                (px[:, 1] - self.cy) / self.fy,
                np.ones(len(px)),
            ],
            axis=-1,
        )
        d_world = d_cam @ self.rotation  # R^T applied row-wise
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)

    def all_pixel_rays(self):
        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        pixels = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=-1)
        return self.pixel_rays(pixels)

    @staticmethod
    def look_at(origin, target, up, fx, fy, cx, cy, width, height, near=0.05, far=100.0):
        origin = np.asarray(origin, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - origin
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd], axis=0)
        return Camera(rot, -rot @ origin, fx, fy, cx, cy, width, height, near, far)


class GaussianCloud:
    """Structure-of-arrays storage for a set of primitives."""

    def __init__(self, **arrays):
        for name in PARAM_FIELDS:
            setattr(self, name, np.asarray(arrays[name]))
        n = len(self.means)
        assert all(len(getattr(self, f)) == n for f in PARAM_FIELDS)

    def __len__(self):
        return len(self.means)

    def primitive(self, i):
        return GaussianPrimitive(
            mean=self.means[i],
            quat=self.quats[i],
            log_scale=self.log_scales[i],
            opacity_logit=float(self.opacity_logits[i]),
            albedo_logit=self.albedo_logits[i],
            roughness_logit=float(self.roughness_logits[i]),
            metallic_logit=float(self.metallic_logits[i]),
            normal_residual=self.normal_residuals[i],
        )

    def params(self):
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def subset(self, keep):
        return GaussianCloud(**{f: getattr(self, f)[keep] for f in PARAM_FIELDS})

    def concatenated(self, other):
        return GaussianCloud(
            **{
                f: np.concatenate([getattr(self, f), getattr(other, f)], axis=0)
                for f in PARAM_FIELDS
            }
        )

    @staticmethod
    def from_primitives(prims):
        return GaussianCloud(
            means=np.stack([p.mean for p in prims]),
            quats=np.stack([p.quat for p in prims]),
            log_scales=np.stack([p.log_scale for p in prims]),
            opacity_logits=np.array([p.opacity_logit for p in prims], dtype=np.float64),
            albedo_logits=np.stack([np.broadcast_to(p.albedo_logit, (3,)) for p in prims]),
            roughness_logits=np.array([p.roughness_logit for p in prims], dtype=np.float64),
            metallic_logits=np.array([p.metallic_logit for p in prims], dtype=np.float64),
            normal_residuals=np.stack([p.normal_residual for p in prims]),
        )

    @staticmethod
    def random(n, bbox, rng, scale_factor=1.0, dtype=np.float64):
        """Uniform means inside bbox; scales sized to the mean point spacing."""
        lo, hi = np.asarray(bbox[0], dtype=np.float64), np.asarray(bbox[1], dtype=np.float64)
        means = rng.uniform(lo, hi, size=(n, 3))
        quats = rng.normal(size=(n, 4))
        quats /= np.linalg.norm(quats, axis=-1, keepdims=True)
        volume = float(np.prod(hi - lo))
        spacing = (volume / max(n, 1)) ** (1.0 / 3.0) * scale_factor
        cloud = GaussianCloud(
            means=means,
            quats=quats,
            log_scales=np.full((n, 3), np.log(spacing)),
            opacity_logits=np.full(n, _logit(0.1)),
            albedo_logits=np.zeros((n, 3)),
            roughness_logits=np.zeros(n),
            metallic_logits=np.zeros(n),
            normal_residuals=np.zeros((n, 3)),
        )
        for f in PARAM_FIELDS:
            setattr(cloud, f, getattr(cloud, f).astype(dtype))
        return cloud


def _logit(p):
    return float(np.log(p / (1.0 - p)))


@dataclass
class Scene:
    cloud: GaussianCloud
    bbox: np.ndarray  # (2, 3) lower/upper corners

    @property
    def extent(self):
        return float(np.max(self.bbox[1] - self.bbox[0]))

    @property
    def diameter(self):
        return float(np.linalg.norm(self.bbox[1] - self.bbox[0]))


# ---------------------------------------------------------------------------
# single-primitive operations (numpy; contract surface and test oracles)


def covariance(p: GaussianPrimitive):
    """World-space covariance R S S^T R^T (SPD for any finite log-scale)."""
    rot = quat_to_rotmat(p.quat)
    m = rot * np.exp(np.asarray(p.log_scale, dtype=np.float64))[None, :]
    return m @ m.T


def evaluate_gaussian(p: GaussianPrimitive, x):
    """Unnormalized density exp(-0.5 (x-mu)^T Sigma^-1 (x-mu)), in (0, 1]."""
    d = np.asarray(x, dtype=np.float64) - p.mean
    q = d @ np.linalg.solve(covariance(p), d)
    return float(np.exp(-0.5 * q))


def shortest_axis(p: GaussianPrimitive, view_dir):
    """Column of R for the minimal scale, flipped to face the viewer.

    Ties pick the lowest axis index.  `view_dir` points from the camera
    toward the primitive; the returned axis has a non-positive dot with it.
    """
    rot = quat_to_rotmat(p.quat)
    axis = int(np.argmin(p.log_scale))
    u = rot[:, axis]
    if np.dot(u, np.asarray(view_dir, dtype=np.float64)) > 0.0:
        u = -u
    return u


@dataclass
class Splat2D:
    center: np.ndarray  # pixel coordinates
    cov2d: np.ndarray  # (2, 2), low-pass floor included
    depth: float  # camera-space z
    culled: bool = False


def perspective_jacobian(mc, fx, fy):
    """First-order (EWA) Jacobian of perspective projection at camera-space mc."""
    x, y, z = mc
    return np.array(
        [
            [fx / z, 0.0, -fx * x / (z * z)],
            [0.0, fy / z, -fy * y / (z * z)],
        ]
    )


def project_primitive(p: GaussianPrimitive, cam: Camera):
    """EWA projection of one primitive; behind-near-plane returns a culled marker."""
    mc = cam.rotation @ p.mean + cam.translation
    if mc[2] <= cam.near:
        return Splat2D(np.zeros(2), np.eye(2), float(mc[2]), culled=True)
    center = np.array([cam.fx * mc[0] / mc[2] + cam.cx, cam.fy * mc[1] / mc[2] + cam.cy])
    jac = perspective_jacobian(mc, cam.fx, cam.fy)
    cov_cam = cam.rotation @ covariance(p) @ cam.rotation.T
    cov2d = jac @ cov_cam @ jac.T + COV2D_LOWPASS * np.eye(2)
    radius = CULL_SIGMA * np.sqrt(max(np.linalg.eigvalsh(cov2d).max(), 0.0))
    off_image = (
        center[0] + radius < 0
        or center[1] + radius < 0
        or center[0] - radius > cam.width
        or center[1] - radius > cam.height
    )
    return Splat2D(center, cov2d, float(mc[2]), culled=bool(off_image))


# ---------------------------------------------------------------------------
# batched, tape-compatible cloud operations


def cloud_rotmats(params):
    q = params["quats"]
    return rotmats_from_quat_components(q[:, 0], q[:, 1], q[:, 2], q[:, 3])


def cloud_covariances(params):
    """(N,3,3) world covariances from raw parameters (tape or ndarray)."""
    rot = cloud_rotmats(params)
    scales = ad.exp(params["log_scales"])
    m = ad.mul(rot, ad.reshape(scales, (-1, 1, 3)))
    return ad.matmul(m, _transpose_last2(m))


def _transpose_last2(a):
    if isinstance(a, ad.Var):
        val = np.swapaxes(a.value, -1, -2)
        return a.tape._record(val, (a,), lambda g: (np.swapaxes(g, -1, -2),))
    return np.swapaxes(a, -1, -2)


def cloud_normals(params, cam: Camera):
    """Per-primitive world shading normals for one view: camera-facing
    shortest axis plus the learned residual, renormalized."""
    rot = cloud_rotmats(params)
    log_scales = ad.value_of(params["log_scales"])
    n = len(log_scales)
    axis = np.argmin(log_scales, axis=1)  # ties -> lowest index
    flat = ad.reshape(rot, (n * 9,))
    row = np.arange(n) * 9
    idx = np.stack([row + axis, row + 3 + axis, row + 6 + axis], axis=-1).reshape(-1)
    u = ad.reshape(ad.gather(flat, idx), (n, 3))

    means = ad.value_of(params["means"])
    view = means - cam.origin[None, :]
    view /= np.maximum(np.linalg.norm(view, axis=-1, keepdims=True), 1e-12)
    sign = np.where(np.sum(ad.value_of(u) * view, axis=-1) > 0.0, -1.0, 1.0)[:, None]
    return ad.normalize_last(ad.mul(u, sign) + params["normal_residuals"])


def project_cloud(params, cam: Camera):
    """Project all primitives for one camera.

    Returns (proj, keep) where `keep` is a constant boolean mask of
    primitives in front of the near plane whose 3-sigma footprint touches
    the image, and `proj` holds tape-compatible per-kept-primitive values:
    centers (M,2), inverse 2D covariance entries, depth (M,), and the
    constant pixel-space radius used for tiling.
    """
    means = params["means"]
    w = cam.rotation
    mc = ad.add(ad.matmul(means, w.T), cam.translation[None, :])
    mc_val = ad.value_of(mc)
    front = mc_val[:, 2] > cam.near

    cov = cloud_covariances(params)
    cov_cam = ad.matmul(np.ascontiguousarray(w[None, :, :]), ad.matmul(cov, w.T))

    z = mc[:, 2]
    x = mc[:, 0]
    y = mc[:, 1]
    inv_z = ad.div(1.0, z)
    px = ad.mul(x, inv_z) * cam.fx + cam.cx
    py = ad.mul(y, inv_z) * cam.fy + cam.cy
    center = ad.stack([px, py], axis=-1)

    zero = np.zeros(len(mc_val))
    j0 = ad.stack([inv_z * cam.fx, zero, ad.mul(ad.mul(x, ad.square(inv_z)), -cam.fx)], axis=-1)
    j1 = ad.stack([zero, inv_z * cam.fy, ad.mul(ad.mul(y, ad.square(inv_z)), -cam.fy)], axis=-1)
    jac = ad.stack([j0, j1], axis=-2)  # (N, 2, 3)
    cov2d = ad.add(
        ad.matmul(jac, ad.matmul(cov_cam, _transpose_last2(jac))),
        COV2D_LOWPASS * np.eye(2),
    )

    c2v = ad.value_of(cov2d)
    tr = c2v[:, 0, 0] + c2v[:, 1, 1]
    det = c2v[:, 0, 0] * c2v[:, 1, 1] - c2v[:, 0, 1] * c2v[:, 1, 0]
    lam_max = 0.5 * tr + np.sqrt(np.maximum(0.25 * tr * tr - det, 0.0))
    radius = CULL_SIGMA * np.sqrt(np.maximum(lam_max, 0.0))

    cv = ad.value_of(center)
    on_image = (
        (cv[:, 0] + radius >= 0)
        & (cv[:, 1] + radius >= 0)
        & (cv[:, 0] - radius <= cam.width)
        & (cv[:, 1] - radius <= cam.height)
    )
    keep = front & on_image
    keep_idx = np.nonzero(keep)[0]

    center_k = ad.gather(center, keep_idx)
    cov2d_k = ad.gather(cov2d, keep_idx)
    depth_k = ad.gather(z, keep_idx)

    a = cov2d_k[:, 0, 0]
    b = cov2d_k[:, 0, 1]
    c = cov2d_k[:, 1, 1]
    det_k = ad.maximum(a * c - ad.square(b), 1e-12)
    inv_det = ad.div(1.0, det_k)
    return (
        {
            "center": center_k,
            "depth": depth_k,
            "inv_a": ad.mul(c, inv_det),
            "inv_b": ad.mul(ad.neg(b), inv_det),
            "inv_c": ad.mul(a, inv_det),
            "radius": radius[keep_idx],
        },
        keep_idx,
    )
