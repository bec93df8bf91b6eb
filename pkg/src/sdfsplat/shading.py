"""Physically based shading against a prefiltered cube-map light.

Two shading routes exist on purpose and stay independent:

* :func:`shade_splitsum` -- the fast production path: prefiltered specular
  mip chain + irradiance map + DFG lookup (split-sum approximation).
* :func:`shade_reference_mc` -- a multiple-importance-sampled Monte-Carlo
  estimate of the full reflection integral with the same BRDF.  It is the
  correctness oracle for the split-sum path and the ground-truth renderer
  for toy datasets.

BRDF: Lambertian diffuse ``(1-m) a / pi`` plus a GGX specular lobe with
Schlick Fresnel and Smith visibility (k = alpha/2, alpha = roughness^2).
Dielectric F0 is 0.04.

Texture conventions: prefiltered maps use kernels normalized to unit mass,
so a constant radiance map is a fixed point of every filter level.  The
irradiance map therefore stores the cosine-weighted *average* incoming
radiance; Lambertian outgoing radiance is ``albedo * (1-m) * fetch`` (the
1/pi BRDF cancels against the pi of the hemisphere integral).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import cubemap

DIELECTRIC_F0 = 0.04

LEVEL_ROUGHNESS = (0.02, 0.1, 0.3, 0.6, 1.0)
LEVEL_RES_DIV = (1, 1, 2, 4, 8)
LEVEL_SAMPLES = (0, 128, 256, 768, 1024)  # level 0 copies the base map


# ---------------------------------------------------------------------------
# microfacet pieces (plain numpy; used by both the oracle and the bakes)


def ggx_ndf(alpha, cos_h):
    a2 = alpha * alpha
    d = cos_h * cos_h * (a2 - 1.0) + 1.0
    return a2 / np.maximum(np.pi * d * d, 1e-12)


def smith_g1(cos_theta, k):
    return cos_theta / (cos_theta * (1.0 - k) + k)


def fresnel_schlick(f0, cos_theta):
    return f0 + (1.0 - f0) * (1.0 - cos_theta) ** 5


def ggx_sample_halfvector(u1, u2, alpha):
    """GGX-NDF importance sample in the local +z frame."""
    cos_t = np.sqrt((1.0 - u1) / (1.0 + (alpha * alpha - 1.0) * u1))
    sin_t = np.sqrt(np.maximum(1.0 - cos_t * cos_t, 0.0))
    phi = 2.0 * np.pi * u2
    return np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=-1)


def cosine_sample_direction(u1, u2):
    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    z = np.sqrt(np.maximum(1.0 - u1, 0.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def tangent_frame(n):
    """Orthonormal (t, b, n) rows for unit normals (N, 3)."""
    n = np.asarray(n, dtype=np.float64)
    helper = np.where(np.abs(n[..., 2:3]) < 0.999, [0.0, 0.0, 1.0], [1.0, 0.0, 0.0])
    t = np.cross(helper, n)
    t /= np.linalg.norm(t, axis=-1, keepdims=True)
    b = np.cross(n, t)
    return t, b


def hammersley(count):
    """Deterministic low-discrepancy (u1, u2) pairs."""
    i = np.arange(count, dtype=np.uint32)
    bits = i.copy()
    bits = ((bits << np.uint32(16)) | (bits >> np.uint32(16))) & np.uint32(0xFFFFFFFF)
    bits = ((bits & np.uint32(0x55555555)) << np.uint32(1)) | (
        (bits & np.uint32(0xAAAAAAAA)) >> np.uint32(1)
    )
    bits = ((bits & np.uint32(0x33333333)) << np.uint32(2)) | (
        (bits & np.uint32(0xCCCCCCCC)) >> np.uint32(2)
    )
    bits = ((bits & np.uint32(0x0F0F0F0F)) << np.uint32(4)) | (
        (bits & np.uint32(0xF0F0F0F0)) >> np.uint32(4)
    )
    bits = ((bits & np.uint32(0x00FF00FF)) << np.uint32(8)) | (
        (bits & np.uint32(0xFF00FF00)) >> np.uint32(8)
    )
    return i.astype(np.float64) / count, bits.astype(np.float64) * 2.3283064365386963e-10


# ---------------------------------------------------------------------------
# DFG table


_DFG_CACHE = {}


def bake_dfg_table(size=64, samples=1024):
    """Split-sum BRDF integral (F1 scale, F2 bias) over (cos_v, roughness).

    Grid cells sit at i/(size-1) along both axes (align-corners), with
    cos_v and alpha clamped away from their degenerate zero limits.  The
    Hammersley sequence makes the bake deterministic.
    """
    key = (size, samples)
    if key in _DFG_CACHE:
        return _DFG_CACHE[key]
    if size < 2:
        raise ValueError("DFG table needs at least a 2x2 grid")
    grid = np.arange(size) / (size - 1)
    cos_v = np.clip(grid, 1e-3, 1.0)
    rough = np.clip(grid, 0.02, 1.0)
    cv, rr = np.meshgrid(cos_v, rough, indexing="ij")  # [i, j] = (cos_v_i, r_j)
    cv = cv.reshape(-1, 1)
    alpha = (rr * rr).reshape(-1, 1)

    v = np.concatenate([np.sqrt(1.0 - cv * cv), np.zeros_like(cv), cv], axis=-1)[:, None, :]
    u1, u2 = hammersley(samples)
    h = ggx_sample_halfvector(u1[None, :], u2[None, :], alpha)  # (G, S, 3)
    l = 2.0 * np.sum(v * h, axis=-1, keepdims=True) * h - v

    n_dot_l = l[..., 2]
    n_dot_h = np.clip(h[..., 2], 1e-8, 1.0)
    v_dot_h = np.clip(np.sum(v * h, axis=-1), 1e-8, 1.0)
    n_dot_v = cv

    valid = n_dot_l > 0.0
    k = alpha / 2.0
    g = smith_g1(np.clip(n_dot_l, 1e-8, 1.0), k) * smith_g1(n_dot_v, k)
    g_vis = g * v_dot_h / (n_dot_h * n_dot_v)
    fc = (1.0 - v_dot_h) ** 5
    f1 = np.where(valid, (1.0 - fc) * g_vis, 0.0).mean(axis=-1)
    f2 = np.where(valid, fc * g_vis, 0.0).mean(axis=-1)
    table = np.stack([f1, f2], axis=-1).reshape(size, size, 2)
    _DFG_CACHE[key] = table
    return table


# ---------------------------------------------------------------------------
# prefiltered environment light


_TABLE_CACHE = {}


def _prefilter_table(base_res, out_res, roughness, samples):
    """Per-texel gather indices and normalized weights for one mip level."""
    key = (base_res, out_res, roughness, samples)
    if key in _TABLE_CACHE:
        return _TABLE_CACHE[key]
    dirs = cubemap.face_directions(out_res).reshape(-1, 3)
    t, b = tangent_frame(dirs)
    u1, u2 = hammersley(samples)
    h_local = ggx_sample_halfvector(u1, u2, roughness * roughness)  # (S, 3)
    h = (
        h_local[None, :, 0:1] * t[:, None, :]
        + h_local[None, :, 1:2] * b[:, None, :]
        + h_local[None, :, 2:3] * dirs[:, None, :]
    )
    wi = 2.0 * np.sum(dirs[:, None, :] * h, axis=-1, keepdims=True) * h - dirs[:, None, :]
    w = np.maximum(np.sum(dirs[:, None, :] * wi, axis=-1), 0.0)
    w += 1e-12  # keep rows normalizable when every sample grazes
    w /= w.sum(axis=-1, keepdims=True)
    idx = cubemap.nearest_texel_index(wi.reshape(-1, 3), base_res).reshape(w.shape)
    table = (idx.astype(np.int32), w.astype(np.float64))
    _TABLE_CACHE[key] = table
    return table


def _irradiance_matrix(src_res, out_res):
    """Row-normalized cosine-hemisphere kernel (out texels x src texels)."""
    key = ("irr", src_res, out_res)
    if key in _TABLE_CACHE:
        return _TABLE_CACHE[key]
    out_dirs = cubemap.face_directions(out_res).reshape(-1, 3)
    src_dirs = cubemap.face_directions(src_res).reshape(-1, 3)
    omega = cubemap.face_solid_angles(src_res).reshape(-1)
    m = np.maximum(out_dirs @ src_dirs.T, 0.0) * omega[None, :]
    m /= m.sum(axis=-1, keepdims=True)
    _TABLE_CACHE[key] = m
    return m


def _downsample_faces(faces, factor):
    f, r, _, c = faces.shape
    r2 = r // factor
    return faces.reshape(f, r2, factor, r2, factor, c).mean(axis=(2, 4))


class EnvironmentLight:
    """Cube-map radiance with prefiltered specular mips, an irradiance map,
    and the DFG lookup table.

    The base map is plain nonnegative radiance; trainability (softplus
    parameterization) lives in the trainer, which rebuilds this structure
    from decoded values at a fixed cadence.
    """

    def __init__(self, base, dfg_size=64, dfg_samples=1024, irr_res=16):
        self.dfg = bake_dfg_table(dfg_size, dfg_samples)
        self.irr_res = irr_res
        self.rebuild(base)

    def rebuild(self, base):
        base = np.asarray(base, dtype=np.float64)
        if base.ndim != 4 or base.shape[0] != 6 or base.shape[3] != 3:
            raise ValueError("base map must have shape (6, R, R, 3)")
        if not np.isfinite(base).all() or (base < 0).any():
            raise ValueError("base map must be finite and nonnegative")
        self.base = base
        res = base.shape[1]
        flat = base.reshape(-1, 3)
        self.mips = [base.copy()]
        self.mip_roughness = list(LEVEL_ROUGHNESS)
        for rough, div, samples in zip(LEVEL_ROUGHNESS[1:], LEVEL_RES_DIV[1:], LEVEL_SAMPLES[1:]):
            out_res = max(res // div, 4)
            idx, w = _prefilter_table(res, out_res, rough, samples)
            level = np.einsum("ts,tsc->tc", w, flat[idx]).reshape(6, out_res, out_res, 3)
            self.mips.append(level)
        src = _downsample_faces(base, max(res // self.irr_res, 1))
        m = _irradiance_matrix(src.shape[1], self.irr_res)
        self.irradiance = (m @ src.reshape(-1, 3)).reshape(6, self.irr_res, self.irr_res, 3)
        return self

    # -- fetches (tape-compatible in the direction/roughness arguments) ----

    def mip_coordinate(self, roughness):
        """Continuous mip level for roughness values; piecewise linear in
        the level ladder, clamped at the ends."""
        rv = np.asarray(ad.value_of(roughness), dtype=np.float64)
        ladder = np.asarray(self.mip_roughness)
        n_last = len(ladder) - 1
        acc = ad.mul(roughness, 0.0)
        acc = ad.add(acc, (rv >= ladder[-1]) * float(n_last))
        for k in range(n_last):
            lo, hi = ladder[k], ladder[k + 1]
            if k == 0:
                m = (rv < hi).astype(np.float64)
                seg = ad.mul(ad.sub(ad.maximum(roughness, lo), lo), 1.0 / (hi - lo))
            else:
                m = ((rv >= lo) & (rv < hi)).astype(np.float64)
                seg = ad.mul(ad.sub(roughness, lo), 1.0 / (hi - lo))
            acc = ad.add(acc, ad.mul(ad.add(seg, float(k)), m))
        return acc

    def fetch_specular(self, dirs, roughness):
        """Trilinear prefiltered fetch at the reflection direction."""
        lam = self.mip_coordinate(roughness)
        out = None
        for k, level in enumerate(self.mips):
            # hat weight of level k as a function of the continuous level
            w = ad.maximum(1.0 - ad.absolute(ad.sub(lam, float(k))), 0.0)
            if not (np.asarray(ad.value_of(w)) > 0).any():
                continue
            fetched = cubemap.sample_bilinear(level, dirs)
            term = ad.mul(fetched, ad.reshape(w, (-1, 1)))
            out = term if out is None else ad.add(out, term)
        return out

    def fetch_irradiance(self, normals):
        return cubemap.sample_bilinear(self.irradiance, normals)

    def fetch_dfg(self, n_dot_v, roughness):
        """Bilinear DFG lookup; returns (F1, F2) as (N,) pairs."""
        size = self.dfg.shape[0]
        x = ad.mul(ad.clip(n_dot_v, 0.0, 1.0), size - 1.0)
        y = ad.mul(ad.clip(roughness, 0.0, 1.0), size - 1.0)
        x0 = np.clip(np.floor(ad.value_of(x)), 0, size - 2).astype(np.int64)
        y0 = np.clip(np.floor(ad.value_of(y)), 0, size - 2).astype(np.int64)
        fx = ad.reshape(ad.clip(ad.sub(x, x0.astype(np.float64)), 0.0, 1.0), (-1, 1))
        fy = ad.reshape(ad.clip(ad.sub(y, y0.astype(np.float64)), 0.0, 1.0), (-1, 1))
        flat = self.dfg.reshape(-1, 2)
        base = x0 * size + y0
        c00 = ad.gather(flat, base)
        c01 = ad.gather(flat, base + 1)
        c10 = ad.gather(flat, base + size)
        c11 = ad.gather(flat, base + size + 1)
        top = ad.add(ad.mul(c00, ad.sub(1.0, fy)), ad.mul(c01, fy))
        bot = ad.add(ad.mul(c10, ad.sub(1.0, fy)), ad.mul(c11, fy))
        out = ad.add(ad.mul(top, ad.sub(1.0, fx)), ad.mul(bot, fx))
        return out[:, 0], out[:, 1]


def shade_splitsum(
    normals,
    view_dirs,
    albedo,
    roughness,
    metallic,
    light: EnvironmentLight,
    literal_bias_form=False,
    st_base=None,
):
    """Split-sum shading of N samples; all material arguments may be tape vars.

    `view_dirs` points from the surface toward the camera. `st_base` is an
    optional tape variable holding a (slightly blurred) copy of the base
    radiance map: its fetch is added as a straight-through term (zero in
    value, alive in gradient) so a trainable light receives gradients while
    the prefiltered chain stays fixed between rebuilds.

    `literal_bias_form` switches the specular combination from the standard
    ``L_spec * (F0*F1 + F2)`` to ``L_spec * F0 * F1 + F2``.
    """
    n_dot_v = ad.clip(ad.dot_last(normals, view_dirs), 1e-4, 1.0)
    refl = ad.sub(
        ad.mul(normals, ad.reshape(ad.mul(n_dot_v, 2.0), (-1, 1))), view_dirs
    )
    refl = ad.normalize_last(refl)

    one_minus_m = ad.sub(1.0, metallic)
    f0 = ad.add(
        ad.reshape(ad.mul(one_minus_m, DIELECTRIC_F0), (-1, 1)),
        ad.mul(albedo, ad.reshape(metallic, (-1, 1))),
    )

    l_spec = light.fetch_specular(refl, roughness)
    l_spec = _with_straight_through(l_spec, st_base, refl)
    f1, f2 = light.fetch_dfg(n_dot_v, roughness)
    f1 = ad.reshape(f1, (-1, 1))
    f2 = ad.reshape(f2, (-1, 1))
    if literal_bias_form:
        c_spec = ad.add(ad.mul(ad.mul(l_spec, f0), f1), f2)
    else:
        c_spec = ad.mul(l_spec, ad.add(ad.mul(f0, f1), f2))

    l_diff = light.fetch_irradiance(normals)
    l_diff = _with_straight_through(l_diff, st_base, normals)
    c_diff = ad.mul(ad.mul(albedo, ad.reshape(one_minus_m, (-1, 1))), l_diff)
    return ad.add(c_diff, c_spec)


def _with_straight_through(fetched, st_base, dirs):
    if st_base is None:
        return fetched
    st = cubemap.sample_bilinear(st_base, dirs, weights_sg=True)
    return ad.add(fetched, ad.sub(st, ad.stop_gradient(st)))


# ---------------------------------------------------------------------------
# Monte-Carlo reference


def shade_reference_mc(
    normals,
    view_dirs,
    albedo,
    roughness,
    metallic,
    base_faces,
    samples,
    rng,
    include_specular=True,
):
    """Unbiased MC estimate of the hemisphere lighting integral.

    Cosine and GGX-half-vector strategies are combined with the balance
    heuristic.  With ``include_specular=False`` only the Lambertian lobe is
    integrated with pure cosine sampling (zero-variance for constant maps).
    All inputs are plain ndarrays; shapes broadcast over N shading points.
    """
    n = np.atleast_2d(np.asarray(normals, dtype=np.float64))
    v = np.atleast_2d(np.asarray(view_dirs, dtype=np.float64))
    count = max(len(n), len(v))
    n = np.broadcast_to(n, (count, 3))
    v = np.broadcast_to(v, (count, 3))
    a = np.broadcast_to(np.atleast_2d(np.asarray(albedo, dtype=np.float64)), (count, 3))
    r = np.broadcast_to(np.ravel(np.asarray(roughness, dtype=np.float64)), (count,))
    m = np.broadcast_to(np.ravel(np.asarray(metallic, dtype=np.float64)), (count,))
    if samples < 1:
        raise ValueError("need at least one sample")

    t, b = tangent_frame(n)
    alpha = np.clip(r * r, 1e-4, 1.0)[:, None]
    out = np.zeros((count, 3))

    if include_specular:
        half = samples // 2
        counts = (samples - half, half)
        strategies = ("cosine", "ggx")
    else:
        counts = (samples,)
        strategies = ("cosine",)

    for strategy, s_count in zip(strategies, counts):
        if s_count == 0:
            continue
        u = rng.random((count, s_count, 2))
        if strategy == "cosine":
            local = cosine_sample_direction(u[..., 0], u[..., 1])
            wi = (
                local[..., 0:1] * t[:, None, :]
                + local[..., 1:2] * b[:, None, :]
                + local[..., 2:3] * n[:, None, :]
            )
        else:
            h_local = ggx_sample_halfvector(u[..., 0], u[..., 1], alpha)
            h = (
                h_local[..., 0:1] * t[:, None, :]
                + h_local[..., 1:2] * b[:, None, :]
                + h_local[..., 2:3] * n[:, None, :]
            )
            v_dot_h = np.sum(v[:, None, :] * h, axis=-1, keepdims=True)
            wi = 2.0 * v_dot_h * h - v[:, None, :]

        cos_i = np.sum(wi * n[:, None, :], axis=-1)
        valid = cos_i > 1e-6
        wi_flat = wi.reshape(-1, 3)
        radiance = cubemap.sample_bilinear(base_faces, wi_flat).reshape(count, s_count, 3)

        pdf_c = np.maximum(cos_i, 0.0) / np.pi
        if include_specular:
            h_vec = wi + v[:, None, :]
            h_norm = np.linalg.norm(h_vec, axis=-1, keepdims=True)
            h_vec = h_vec / np.maximum(h_norm, 1e-12)
            cos_h = np.clip(np.sum(h_vec * n[:, None, :], axis=-1), 0.0, 1.0)
            v_dot_h = np.clip(np.sum(h_vec * v[:, None, :], axis=-1), 1e-8, None)
            d_term = ggx_ndf(alpha, cos_h)
            pdf_g = d_term * cos_h / (4.0 * v_dot_h)
        else:
            pdf_g = np.zeros_like(pdf_c)

        brdf = (1.0 - m[:, None, None]) * a[:, None, :] / np.pi
        if include_specular:
            cos_o = np.clip(np.sum(v * n, axis=-1), 1e-6, 1.0)[:, None]
            f0_rgb = (1.0 - m[:, None, None]) * DIELECTRIC_F0 + m[:, None, None] * a[:, None, :]
            fres = f0_rgb + (1.0 - f0_rgb) * (1.0 - v_dot_h[..., None]) ** 5
            k = alpha / 2.0
            g = smith_g1(np.clip(cos_i, 1e-8, None), k) * smith_g1(cos_o, k)
            spec = d_term[..., None] * fres * g[..., None] / (
                4.0 * np.clip(cos_i, 1e-8, None)[..., None] * cos_o[..., None]
            )
            brdf = brdf + spec

        pdf_used = pdf_c if strategy == "cosine" else pdf_g
        denom = pdf_c + pdf_g
        mis_w = np.where(denom > 0, pdf_used / np.maximum(denom, 1e-300), 0.0)
        weight = np.where(
            valid & (pdf_used > 1e-12), mis_w * cos_i / np.maximum(pdf_used, 1e-300), 0.0
        )
        out += np.mean(weight[..., None] * brdf * radiance, axis=1)

    return out


# ---------------------------------------------------------------------------
# procedural environments for toy scenes and tests


def spherical_gaussian_env(res, lobes, ambient=(0.0, 0.0, 0.0)):
    """Analytic sum-of-lobes radiance baked to a cube map.

    `lobes` is a list of (direction, sharpness, rgb) tuples.
    """
    dirs = cubemap.face_directions(res).reshape(-1, 3)
    out = np.broadcast_to(np.asarray(ambient, dtype=np.float64), (len(dirs), 3)).copy()
    for direction, sharpness, rgb in lobes:
        d = np.asarray(direction, dtype=np.float64)
        d = d / np.linalg.norm(d)
        fall = np.exp(sharpness * (dirs @ d - 1.0))
        out += fall[:, None] * np.asarray(rgb, dtype=np.float64)
    return out.reshape(6, res, res, 3)


def constant_env(res, rgb):
    return np.broadcast_to(np.asarray(rgb, dtype=np.float64), (6, res, res, 3)).copy()


def single_texel_env(res, direction, value, background=0.0):
    faces = np.full((6, res, res, 3), background, dtype=np.float64)
    idx = cubemap.nearest_texel_index(np.asarray(direction, dtype=np.float64)[None, :], res)[0]
    flat = faces.reshape(-1, 3)
    flat[idx] = value
    return flat.reshape(6, res, res, 3)
