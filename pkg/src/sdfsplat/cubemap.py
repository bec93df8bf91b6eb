"""Cube-map geometry: direction <-> face/texel mapping and bilinear fetches.

Face order is +X, -X, +Y, -Y, +Z, -Z; each face is row-major with the
origin at the top-left texel.  ``sample_bilinear`` is tape-compatible:
texel indices are fixed from forward values while the blend weights stay
differentiable, so gradients flow to both the query direction and (when
the face stack is a tape variable) the texels themselves.  Filtering
clamps to face edges; no cross-face taps.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

# per-face component selectors: (major_axis, major_sign, u_axis, u_sign, v_axis, v_sign)
_FACE_TABLE = (
    (0, 1.0, 2, -1.0, 1, -1.0),  # +X
    (0, -1.0, 2, 1.0, 1, -1.0),  # -X
    (1, 1.0, 0, 1.0, 2, 1.0),  # +Y
    (1, -1.0, 0, 1.0, 2, -1.0),  # -Y
    (2, 1.0, 0, 1.0, 1, -1.0),  # +Z
    (2, -1.0, 0, -1.0, 1, -1.0),  # -Z
)


def face_directions(res):
    """Unit directions at texel centers, shape (6, res, res, 3)."""
    t = (np.arange(res) + 0.5) / res * 2.0 - 1.0
    v, u = np.meshgrid(t, t, indexing="ij")
    dirs = np.empty((6, res, res, 3))
    for f, (ma, ms, ua, us, va, vs) in enumerate(_FACE_TABLE):
        d = np.empty((res, res, 3))
        d[..., ma] = ms
        d[..., ua] = u * us
        d[..., va] = v * vs
        dirs[f] = d / np.linalg.norm(d, axis=-1, keepdims=True)
    return dirs


def _area_term(x, y):
    return np.arctan2(x * y, np.sqrt(x * x + y * y + 1.0))


def face_solid_angles(res):
    """Exact solid angle of every texel, shape (6, res, res); sums to 4*pi."""
    edges = np.arange(res + 1) / res * 2.0 - 1.0
    x0, y0 = np.meshgrid(edges[:-1], edges[:-1], indexing="xy")
    x1, y1 = np.meshgrid(edges[1:], edges[1:], indexing="xy")
    omega = (
        _area_term(x1, y1) - _area_term(x0, y1) - _area_term(x1, y0) + _area_term(x0, y0)
    )
    return np.broadcast_to(omega, (6, res, res)).copy()


def direction_to_face_uv(dirs):
    """Face index and in-face (u, v) in [-1, 1] for directions (N, 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    ax = np.argmax(np.abs(d), axis=-1)
    neg = d[np.arange(len(d)), ax] < 0
    face = ax * 2 + neg
    u = np.empty(len(d))
    v = np.empty(len(d))
    for f, (ma, ms, ua, us, va, vs) in enumerate(_FACE_TABLE):
        m = face == f
        inv = 1.0 / (ms * d[m, ma])
        u[m] = us * d[m, ua] * inv
        v[m] = vs * d[m, va] * inv
    return face, u, v


def face_uv_to_direction(face, u, v):
    """Inverse of :func:`direction_to_face_uv`; returns unit directions."""
    face = np.asarray(face)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.zeros(face.shape + (3,))
    for f, (ma, ms, ua, us, va, vs) in enumerate(_FACE_TABLE):
        m = face == f
        d[m, ma] = ms
        d[m, ua] = u[m] * us
        d[m, va] = v[m] * vs
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def nearest_texel_index(dirs, res):
    """Flat texel index (face*res*res + y*res + x) of the nearest texel."""
    face, u, v = direction_to_face_uv(dirs)
    x = np.clip(((u + 1.0) * 0.5 * res).astype(np.int64), 0, res - 1)
    y = np.clip(((v + 1.0) * 0.5 * res).astype(np.int64), 0, res - 1)
    return face * res * res + y * res + x


def sample_nearest(faces, dirs):
    res = faces.shape[1]
    flat = faces.reshape(6 * res * res, -1)
    return flat[nearest_texel_index(dirs, res)]


def _masked_select_components(dirs, face):
    """Tape-friendly per-sample (u_num, v_num, major) component selection."""
    comps = [dirs[:, 0], dirs[:, 1], dirs[:, 2]]
    u_num = None
    v_num = None
    major = None

    def acc(total, term):
        return term if total is None else ad.add(total, term)

    for f, (ma, ms, ua, us, va, vs) in enumerate(_FACE_TABLE):
        m = (face == f).astype(np.float64)
        u_num = acc(u_num, ad.mul(comps[ua], m * us))
        v_num = acc(v_num, ad.mul(comps[va], m * vs))
        major = acc(major, ad.mul(comps[ma], m * ms))
    return u_num, v_num, major


def sample_bilinear(faces, dirs, weights_sg=False):
    """Bilinear cube fetch; `faces` is (6, R, R, C), `dirs` is (N, 3).

    Either argument may be a tape variable.  With ``weights_sg`` the blend
    weights are stop-gradiented so gradients reach only the texels (used by
    the straight-through light-learning fetch).
    """
    res = ad.value_of(faces).shape[1]
    channels = ad.value_of(faces).shape[-1]
    dv = ad.value_of(dirs)
    face, _, _ = direction_to_face_uv(dv)

    u_num, v_num, major = _masked_select_components(dirs, face)
    inv = ad.div(1.0, ad.maximum(major, 1e-12))
    x = ad.mul(ad.mul(u_num, inv) + 1.0, 0.5 * res) - 0.5
    y = ad.mul(ad.mul(v_num, inv) + 1.0, 0.5 * res) - 0.5

    x0 = np.clip(np.floor(ad.value_of(x)), 0, res - 2).astype(np.int64)
    y0 = np.clip(np.floor(ad.value_of(y)), 0, res - 2).astype(np.int64)
    fx = ad.clip(ad.sub(x, x0.astype(np.float64)), 0.0, 1.0)
    fy = ad.clip(ad.sub(y, y0.astype(np.float64)), 0.0, 1.0)
    if weights_sg:
        fx = ad.stop_gradient(fx)
        fy = ad.stop_gradient(fy)

    flat = ad.reshape(faces, (6 * res * res, channels))
    base_idx = face * res * res + y0 * res + x0
    c00 = ad.gather(flat, base_idx)
    c10 = ad.gather(flat, base_idx + 1)
    c01 = ad.gather(flat, base_idx + res)
    c11 = ad.gather(flat, base_idx + res + 1)

    fx = ad.reshape(fx, (-1, 1))
    fy = ad.reshape(fy, (-1, 1))
    one = 1.0
    top = ad.add(ad.mul(c00, ad.sub(one, fx)), ad.mul(c10, fx))
    bot = ad.add(ad.mul(c01, ad.sub(one, fx)), ad.mul(c11, fx))
    return ad.add(ad.mul(top, ad.sub(one, fy)), ad.mul(bot, fy))


def blur_faces(faces, taps=(0.25, 0.5, 0.25)):
    """Small separable per-face blur (edge-clamped); tape-compatible."""
    out = faces
    k = len(taps) // 2
    for axis in (1, 2):
        acc = None
        for i, w in enumerate(taps):
            shift = i - k
            sl = [slice(None)] * 4
            lo = max(shift, 0)
            hi = min(shift, 0)
            sl[axis] = slice(lo, ad.value_of(out).shape[axis] + hi)
            part = out[tuple(sl)] if isinstance(out, ad.Var) else out[tuple(sl)]
            pad_lo = max(-shift, 0)
            pad_hi = max(shift, 0)
            if pad_lo or pad_hi:
                edges = []
                if pad_lo:
                    sl_lo = [slice(None)] * 4
                    sl_lo[axis] = slice(0, 1)
                    first = part[tuple(sl_lo)]
                    edges.extend([first] * pad_lo)
                edges.append(part)
                if pad_hi:
                    sl_hi = [slice(None)] * 4
                    sl_hi[axis] = slice(-1, None)
                    edges.extend([part[tuple(sl_hi)]] * pad_hi)
                part = ad.concat(edges, axis=axis)
            term = ad.mul(part, w)
            acc = term if acc is None else ad.add(acc, term)
        out = acc
    return out
