"""Deferred attribute splatting into per-pixel G-buffer planes.

``render_gbuffer`` is the production path: a single global depth sort,
vectorized fragment emission from per-splat pixel bounding boxes, and
segmented front-to-back alpha blending of all attributes at once.  It is
tape-compatible, so gradients flow to every primitive parameter including
the mean (through the projected 2D Gaussian).

``naive_render_gbuffer`` re-implements blending per pixel with explicit
Python loops over primitives and serves as the independent oracle in the
tests; keep the two paths separate.

Depth is alpha-blended camera-space z.  Blended normals are stored raw
(unnormalized); shading normalizes once per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .gaussians import Camera, GaussianCloud, PARAM_FIELDS, cloud_normals, project_cloud, project_primitive, shortest_axis

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
EARLY_STOP = 1e-4


class NonFiniteParameterError(RuntimeError):
    def __init__(self, field, index):
        super().__init__(f"non-finite value in '{field}' at primitive {index}")
        self.field = field
        self.index = index


def validate_finite(params):
    for name, arr in params.items():
        vals = ad.value_of(arr)
        bad = ~np.isfinite(vals)
        if bad.any():
            idx = int(np.argwhere(bad)[0][0])
            raise NonFiniteParameterError(name, idx)


@dataclass
class GBuffer:
    """Alpha-blended attribute planes. Tape variables during training,
    plain arrays in inference; shapes are (H, W[, C])."""

    normal: object
    depth: object
    albedo: object
    roughness: object
    metallic: object
    alpha: object
    height: int
    width: int

    def plane_values(self):
        return {
            "normal": ad.value_of(self.normal),
            "depth": ad.value_of(self.depth),
            "albedo": ad.value_of(self.albedo),
            "roughness": ad.value_of(self.roughness),
            "metallic": ad.value_of(self.metallic),
            "alpha": ad.value_of(self.alpha),
        }


def _empty_gbuffer(cam, like):
    zeros3 = np.zeros((cam.height, cam.width, 3), dtype=like)
    zeros1 = np.zeros((cam.height, cam.width), dtype=like)
    return GBuffer(zeros3, zeros1, zeros3.copy(), zeros1.copy(), zeros1.copy(), zeros1.copy(), cam.height, cam.width)


def _expand_bboxes(x0, x1, y0, y1):
    """Per-splat integer pixel boxes -> flat (splat_id, px, py) fragments."""
    bw = x1 - x0
    bh = y1 - y0
    area = bw * bh
    total = int(area.sum())
    if total == 0:
        return (np.zeros(0, np.int64),) * 3
    sid = np.repeat(np.arange(len(area)), area)
    start = np.concatenate([[0], np.cumsum(area)[:-1]])
    offset = np.arange(total) - np.repeat(start, area)
    px = x0[sid] + offset % bw[sid]
    py = y0[sid] + offset // bw[sid]
    return sid, px, py


def render_gbuffer(
    params,
    cam: Camera,
    alpha_max=ALPHA_MAX,
    early_stop=EARLY_STOP,
    alpha_min=ALPHA_MIN,
    extra=None,
):
    """Splat a cloud into a G-buffer for one camera.

    `params` maps the cloud parameter names to tape variables or ndarrays.
    `extra` optionally carries additional per-primitive channels (N, C) to
    blend with the same weights (used by the forward-shading mode); the
    blended plane lands in ``aux["extra"]``.  Returns (gbuffer, aux); `aux`
    also carries the projection handles needed for densification
    bookkeeping (screen-space position gradients).
    """
    validate_finite(params)
    dtype = ad.value_of(params["means"]).dtype
    n_total = len(ad.value_of(params["means"]))
    aux = {"center": None, "keep": np.zeros(0, np.int64), "n_fragments": 0, "extra": None}
    if extra is not None:
        n_extra = ad.value_of(extra).shape[1]
        aux["extra"] = np.zeros((cam.height, cam.width, n_extra), dtype=dtype)
    if n_total == 0:
        return _empty_gbuffer(cam, dtype), aux

    proj, keep = project_cloud(params, cam)
    aux["keep"] = keep
    aux["center"] = proj["center"]
    if len(keep) == 0:
        return _empty_gbuffer(cam, dtype), aux

    # depth order with ties broken by original primitive index
    depth_v = ad.value_of(proj["depth"])
    order = np.lexsort((keep, depth_v))
    center_v = ad.value_of(proj["center"])[order]
    radius = proj["radius"][order]

    x0 = np.clip(np.floor(center_v[:, 0] - radius).astype(np.int64), 0, cam.width)
    x1 = np.clip(np.ceil(center_v[:, 0] + radius).astype(np.int64) + 1, 0, cam.width)
    y0 = np.clip(np.floor(center_v[:, 1] - radius).astype(np.int64), 0, cam.height)
    y1 = np.clip(np.ceil(center_v[:, 1] + radius).astype(np.int64) + 1, 0, cam.height)
    sid, px, py = _expand_bboxes(x0, x1, y0, y1)
    if len(sid) == 0:
        return _empty_gbuffer(cam, dtype), aux

    # cheap numpy pre-pass culls fragments that cannot reach alpha_min
    ia_v = ad.value_of(proj["inv_a"])[order]
    ib_v = ad.value_of(proj["inv_b"])[order]
    ic_v = ad.value_of(proj["inv_c"])[order]
    op_v = ad._sigmoid(ad.value_of(params["opacity_logits"]))[keep][order]
    dxv = px + 0.5 - center_v[sid, 0]
    dyv = py + 0.5 - center_v[sid, 1]
    qv = ia_v[sid] * dxv * dxv + 2.0 * ib_v[sid] * dxv * dyv + ic_v[sid] * dyv * dyv
    av = op_v[sid] * np.exp(-0.5 * qv)
    live = av >= alpha_min
    sid, px, py = sid[live], px[live], py[live]
    if len(sid) == 0:
        return _empty_gbuffer(cam, dtype), aux
    aux["n_fragments"] = len(sid)

    # blend order: fragments emitted in depth order, stable-sorted by pixel
    pix = py * cam.width + px
    perm = np.argsort(pix, kind="stable")
    sid, pix = sid[perm], pix[perm]
    fx = (px[perm] + 0.5).astype(dtype)
    fy = (py[perm] + 0.5).astype(dtype)

    # tape ops on surviving fragments only
    to_orig = keep[order]  # sorted-kept slot -> original primitive index
    frag_orig = to_orig[sid]

    center_s = ad.gather(proj["center"], order)
    depth_s = ad.gather(proj["depth"], order)
    ia = ad.gather(ad.gather(proj["inv_a"], order), sid)
    ib = ad.gather(ad.gather(proj["inv_b"], order), sid)
    ic = ad.gather(ad.gather(proj["inv_c"], order), sid)
    cfx = ad.gather(center_s[:, 0], sid)
    cfy = ad.gather(center_s[:, 1], sid)
    opacity = ad.gather(ad.sigmoid(params["opacity_logits"]), frag_orig)

    dx = ad.sub(fx, cfx)
    dy = ad.sub(fy, cfy)
    q = ad.add(ad.add(ad.mul(ia, ad.square(dx)), ad.mul(ad.mul(ib, dx), ad.mul(dy, 2.0))), ad.mul(ic, ad.square(dy)))
    alpha = ad.minimum(ad.mul(opacity, ad.exp(ad.mul(q, -0.5))), alpha_max)

    # segmented exclusive transmittance in log space
    log_t = ad.safe_log(ad.sub(1.0, alpha))
    csum = ad.cumsum(log_t, axis=0)
    excl = ad.concat([np.zeros(1, dtype=dtype), csum[:-1]], axis=0)
    seg_start = np.concatenate([[0], np.nonzero(np.diff(pix))[0] + 1])
    start_of = np.repeat(seg_start, np.diff(np.concatenate([seg_start, [len(pix)]])))
    trans = ad.exp(ad.sub(excl, ad.gather(excl, start_of)))
    live_t = (ad.value_of(trans) >= early_stop).astype(dtype)
    weight = ad.mul(ad.mul(alpha, trans), live_t)

    # blend all attributes at once: [normal(3) albedo(3) depth rough metal]
    normals = cloud_normals(params, cam)
    alb = ad.sigmoid(params["albedo_logits"])
    rough = ad.sigmoid(params["roughness_logits"])
    metal = ad.sigmoid(params["metallic_logits"])
    payload = ad.concat([normals, alb, ad.stack([rough, metal], axis=-1)], axis=1)
    if extra is not None:
        payload = ad.concat([payload, extra], axis=1)
    frag_payload = ad.gather(payload, frag_orig)
    frag_depth = ad.reshape(ad.gather(depth_s, sid), (-1, 1))
    frag_all = ad.concat([frag_payload, frag_depth], axis=1)
    blended = ad.segment_sum(ad.mul(frag_all, ad.reshape(weight, (-1, 1))), pix, cam.height * cam.width)
    acc_alpha = ad.segment_sum(weight, pix, cam.height * cam.width)

    h, w = cam.height, cam.width
    if extra is not None:
        aux["extra"] = ad.reshape(blended[:, 8:-1], (h, w, n_extra))
    gb = GBuffer(
        normal=ad.reshape(blended[:, 0:3], (h, w, 3)),
        albedo=ad.reshape(blended[:, 3:6], (h, w, 3)),
        roughness=ad.reshape(blended[:, 6], (h, w)),
        metallic=ad.reshape(blended[:, 7], (h, w)),
        depth=ad.reshape(blended[:, -1], (h, w)),
        alpha=ad.reshape(acc_alpha, (h, w)),
        height=h,
        width=w,
    )
    return gb, aux


def naive_render_gbuffer(cloud: GaussianCloud, cam: Camera, alpha_max=ALPHA_MAX, early_stop=0.0, alpha_min=0.0):
    """Per-pixel reference blender (slow; oracle for the tests)."""
    splats = []
    for i in range(len(cloud)):
        s = project_primitive(cloud.primitive(i), cam)
        if not s.culled:
            splats.append((i, s))
    gb = _empty_gbuffer(cam, np.float64)
    normals = ad.value_of(cloud_normals(cloud.params(), cam))
    albedo = ad.value_of(ad.sigmoid(cloud.albedo_logits))
    rough = ad.value_of(ad.sigmoid(cloud.roughness_logits))
    metal = ad.value_of(ad.sigmoid(cloud.metallic_logits))
    opac = ad.value_of(ad.sigmoid(cloud.opacity_logits))
    splats.sort(key=lambda t: (t[1].depth, t[0]))
    for yy in range(cam.height):
        for xx in range(cam.width):
            p = np.array([xx + 0.5, yy + 0.5])
            trans = 1.0
            for i, s in splats:
                d = p - s.center
                q = d @ np.linalg.solve(s.cov2d, d)
                a = min(opac[i] * np.exp(-0.5 * q), alpha_max)
                if a < alpha_min:
                    continue
                if trans < early_stop:
                    break
                w = a * trans
                gb.normal[yy, xx] += w * normals[i]
                gb.albedo[yy, xx] += w * albedo[i]
                gb.roughness[yy, xx] += w * rough[i]
                gb.metallic[yy, xx] += w * metal[i]
                gb.depth[yy, xx] += w * s.depth
                gb.alpha[yy, xx] += w
                trans *= 1.0 - a
    return gb


def normal_from_depth(depth, alpha, cam: Camera, alpha_threshold=0.5):
    """Screen-space normals from the blended depth plane.

    Back-projects valid pixels (A > threshold) to world points and takes
    the normalized cross product of horizontal and vertical central
    differences.  Returns (normals (H, W, 3), valid mask (H, W)); pixels
    with any invalid neighbor (or on the image border) are masked out.
    """
    h, w = cam.height, cam.width
    ys, xs = np.mgrid[0:h, 0:w]
    dirs_cam_x = (xs + 0.5 - cam.cx) / cam.fx
    dirs_cam_y = (ys + 0.5 - cam.cy) / cam.fy

    # world point = origin + z * (R^T [dx, dy, 1])
    rot_t = cam.rotation.T
    ray = np.stack([dirs_cam_x, dirs_cam_y, np.ones_like(dirs_cam_x)], axis=-1) @ rot_t.T
    origin = cam.origin

    dval = ad.value_of(depth)
    pts = ad.add(ad.mul(ad.reshape(depth, (h, w, 1)), ray.astype(dval.dtype)), origin.astype(dval.dtype))

    ddx = ad.sub(pts[1:-1, 2:, :], pts[1:-1, :-2, :])
    ddy = ad.sub(pts[2:, 1:-1, :], pts[:-2, 1:-1, :])
    nx = ad.sub(ad.mul(ddx[..., 1], ddy[..., 2]), ad.mul(ddx[..., 2], ddy[..., 1]))
    ny = ad.sub(ad.mul(ddx[..., 2], ddy[..., 0]), ad.mul(ddx[..., 0], ddy[..., 2]))
    nz = ad.sub(ad.mul(ddx[..., 0], ddy[..., 1]), ad.mul(ddx[..., 1], ddy[..., 0]))
    n_inner = ad.stack([nx, ny, nz], axis=-1)

    # orient toward the camera (constant sign per pixel)
    view_inner = ray[1:-1, 1:-1, :]
    sign = np.where(np.sum(ad.value_of(n_inner) * view_inner, axis=-1) > 0.0, -1.0, 1.0)
    n_inner = ad.normalize_last(ad.mul(n_inner, sign[..., None]))

    ok = ad.value_of(alpha) > alpha_threshold
    valid = np.zeros((h, w), dtype=bool)
    inner_ok = (
        ok[1:-1, 1:-1]
        & ok[1:-1, 2:]
        & ok[1:-1, :-2]
        & ok[2:, 1:-1]
        & ok[:-2, 1:-1]
    )
    valid[1:-1, 1:-1] = inner_ok

    full = ad.mul(
        ad.concat(
            [
                np.zeros((1, w, 3), dtype=dval.dtype),
                ad.concat(
                    [np.zeros((h - 2, 1, 3), dtype=dval.dtype), n_inner, np.zeros((h - 2, 1, 3), dtype=dval.dtype)],
                    axis=1,
                ),
                np.zeros((1, w, 3), dtype=dval.dtype),
            ],
            axis=0,
        ),
        valid[..., None].astype(dval.dtype),
    )
    return full, valid


def composite_color(color, alpha, background):
    """out = color + (1 - A) * background, per pixel."""
    bg = np.asarray(background, dtype=np.asarray(ad.value_of(color)).dtype)
    a = ad.reshape(alpha, ad.value_of(alpha).shape + (1,))
    return ad.add(color, ad.mul(ad.sub(1.0, a), bg))
