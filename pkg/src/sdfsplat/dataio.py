"""Dataset and checkpoint formats plus toy-scene synthesis.

Dataset layout: a JSON manifest naming per-view image/mask files and
camera parameters, optional environment-map faces, scene bounds, and a
color-space tag.  Images are PFM (linear float) or PNG (sRGB 8-bit);
masks are single-channel PNGs thresholded at 128.

PFM files here are row-major with a top-left origin (unlike the bottom-up
Netpbm convention), little-endian; cube-map face order is +X, -X, +Y, -Y,
+Z, -Z.

Checkpoints are deterministic zip containers of .npy members (fixed
timestamps, sorted names): identical state produces identical bytes.
"""

from __future__ import annotations

import dataclasses
import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .gaussians import Camera, GaussianCloud, PARAM_FIELDS, Scene
from .sdf import TensoSdfField
from .shading import EnvironmentLight, shade_reference_mc, spherical_gaussian_env
from .training import Adam, TrainConfig, TrainState, TrainView

CHECKPOINT_VERSION = 1
MANIFEST_FORMAT = "sdfsplat-dataset-v1"


class DataError(ValueError):
    """Malformed dataset, manifest, or checkpoint."""


# ---------------------------------------------------------------------------
# PFM / PNG


def write_pfm(path, data):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
        h, w = data.shape
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
        h, w = data.shape[:2]
    else:
        raise DataError(f"PFM needs (H,W) or (H,W,3), got {data.shape}")
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale: little-endian
        f.write(data.astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise DataError(f"not a PFM file: {path}")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        count = w * h * (3 if header == b"PF" else 1)
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(count * 4), dtype=dtype).astype(np.float64)
    if header == b"PF":
        return data.reshape(h, w, 3)
    return data.reshape(h, w)


def srgb_encode(linear):
    c = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1 / 2.4) - 0.055)


def srgb_decode(encoded):
    c = np.asarray(encoded, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def write_png(path, image, srgb=True):
    img = np.asarray(image, dtype=np.float64)
    if srgb:
        img = srgb_encode(np.maximum(img, 0.0))
    arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path, srgb=True):
    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[..., :3]
    if srgb:
        arr = srgb_decode(arr)
    return arr


def write_mask_png(path, mask):
    Image.fromarray((np.asarray(mask, dtype=bool) * 255).astype(np.uint8)).save(path)


def read_mask_png(path):
    arr = np.asarray(Image.open(path).convert("L"))
    return arr >= 128


def write_env_faces(dirpath, faces, prefix="face"):
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(6):
        p = dirpath / f"{prefix}{i}.pfm"
        write_pfm(p, faces[i])
        paths.append(p)
    return paths


def read_env_faces(paths):
    faces = [read_pfm(p) for p in paths]
    if len(faces) != 6 or any(f.ndim != 3 for f in faces):
        raise DataError("environment map needs six RGB faces")
    res = faces[0].shape[0]
    if any(f.shape != (res, res, 3) for f in faces):
        raise DataError("environment faces must be square and equal-sized")
    return np.stack(faces, axis=0)


# ---------------------------------------------------------------------------
# manifest


def _camera_to_dict(cam: Camera):
    return {
        "rotation": cam.rotation.tolist(),
        "translation": cam.translation.tolist(),
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
        "near": cam.near,
        "far": cam.far,
    }


def _camera_from_dict(d):
    try:
        return Camera(
            np.asarray(d["rotation"], dtype=np.float64),
            np.asarray(d["translation"], dtype=np.float64),
            float(d["fx"]),
            float(d["fy"]),
            float(d["cx"]),
            float(d["cy"]),
            int(d["width"]),
            int(d["height"]),
            float(d.get("near", 0.05)),
            float(d.get("far", 100.0)),
        )
    except ValueError as e:
        raise DataError(f"invalid camera: {e}") from e


def write_manifest(path, views, bounds, color_space="linear", env_paths=None, extras=None):
    path = Path(path)
    doc = {
        "format": MANIFEST_FORMAT,
        "color_space": color_space,
        "bounds": np.asarray(bounds, dtype=np.float64).tolist(),
        "views": views,
    }
    if env_paths is not None:
        doc["environment"] = {"faces": [str(p) for p in env_paths]}
    if extras:
        doc.update(extras)
    path.write_text(json.dumps(doc, indent=2))


@dataclass
class Dataset:
    views: list  # TrainView
    bounds: np.ndarray
    color_space: str
    env_faces: np.ndarray | None
    root: Path


def load_dataset(manifest_path):
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read manifest: {e}") from e
    if doc.get("format") != MANIFEST_FORMAT:
        raise DataError(f"unknown dataset format: {doc.get('format')!r}")
    color_space = doc.get("color_space", "srgb")
    if color_space not in ("linear", "srgb"):
        raise DataError(f"unknown color space: {color_space}")
    bounds = np.asarray(doc["bounds"], dtype=np.float64)
    views = []
    for v in doc["views"]:
        cam = _camera_from_dict(v["camera"])
        img_path = root / v["image"]
        if not img_path.exists():
            raise DataError(f"missing image: {img_path}")
        if img_path.suffix == ".pfm":
            image = read_pfm(img_path)
        else:
            image = read_png(img_path, srgb=(color_space == "srgb"))
        mask_path = root / v["mask"]
        if not mask_path.exists():
            raise DataError(f"missing mask: {mask_path}")
        mask = read_mask_png(mask_path)
        if image.shape[:2] != (cam.height, cam.width) or mask.shape != (cam.height, cam.width):
            raise DataError(f"image/mask size does not match camera for {img_path}")
        views.append(TrainView(cam, image, mask))
    env = None
    if "environment" in doc:
        env = read_env_faces([root / p for p in doc["environment"]["faces"]])
    return Dataset(views, bounds, color_space, env, root)


# ---------------------------------------------------------------------------
# deterministic checkpoint container


def _write_npz_deterministic(path, arrays):
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as z:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            z.writestr(info, buf.getvalue())


def save_checkpoint(path, state: TrainState):
    arrays = {
        "meta/version": np.array([CHECKPOINT_VERSION]),
        "meta/iteration": np.array([state.iteration]),
        "meta/config": _json_array(state.cfg.to_dict()),
        "meta/rng": _json_array(state.rng.bit_generator.state),
        "meta/bounds": state.scene.bbox,
        "meta/field_resolution": np.array([state.field.resolution]),
        "meta/field_channels": np.array([state.field.channels]),
        "meta/view_cursor": np.array([state.view_cursor]),
        "meta/warnings": _json_array(state.warning_counts),
        "env_logits": state.env_logits,
        "densify/grad_accum": state.densify_grad_accum,
        "densify/count": state.densify_count,
    }
    if state.view_perm is not None:
        arrays["meta/view_perm"] = state.view_perm
    for name in PARAM_FIELDS:
        arrays[f"cloud/{name}"] = getattr(state.scene.cloud, name)
    for name, arr in state.field.params.items():
        arrays[f"field/{name}"] = arr
    opt = state.optimizer.state()
    for kind in ("m", "v"):
        for name, arr in opt[kind].items():
            arrays[f"adam/{kind}/{name}"] = arr
    arrays["adam/t"] = _json_array(opt["t"])
    _write_npz_deterministic(path, arrays)


def _json_array(obj):
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8).copy()


def _json_load(arr):
    return json.loads(bytes(arr).decode())


def load_checkpoint(path, views=None):
    """Rebuild a TrainState; `views` may be attached later for training."""
    try:
        data = np.load(path)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read checkpoint: {e}") from e
    if "meta/version" not in data or int(data["meta/version"][0]) != CHECKPOINT_VERSION:
        found = int(data["meta/version"][0]) if "meta/version" in data else None
        raise DataError(
            f"checkpoint version mismatch: found {found}, expected {CHECKPOINT_VERSION}"
        )
    cfg = TrainConfig.from_dict(_json_load(data["meta/config"]))
    bounds = data["meta/bounds"]
    state = TrainState.__new__(TrainState)
    state.cfg = cfg
    state.views = views or []
    state.rng = np.random.default_rng()
    state.rng.bit_generator.state = _json_load(data["meta/rng"])
    cloud = GaussianCloud(**{name: data[f"cloud/{name}"] for name in PARAM_FIELDS})
    state.scene = Scene(cloud, bounds)
    field_params = {k.split("/", 1)[1]: data[k] for k in data.files if k.startswith("field/")}
    state.field = TensoSdfField(
        field_params,
        bounds,
        int(data["meta/field_resolution"][0]),
        int(data["meta/field_channels"][0]),
    )
    state.env_logits = data["env_logits"]
    state.light = EnvironmentLight(np.logaddexp(0.0, state.env_logits.astype(np.float64)))
    state.optimizer = Adam()
    opt_state = {"m": {}, "v": {}, "t": _json_load(data["adam/t"])}
    for k in data.files:
        if k.startswith("adam/m/"):
            opt_state["m"][k.split("/", 2)[2]] = data[k]
        elif k.startswith("adam/v/"):
            opt_state["v"][k.split("/", 2)[2]] = data[k]
    state.optimizer.load(opt_state)
    state.iteration = int(data["meta/iteration"][0])
    state.view_perm = data["meta/view_perm"] if "meta/view_perm" in data else None
    state.view_cursor = int(data["meta/view_cursor"][0])
    state.densify_grad_accum = data["densify/grad_accum"]
    state.densify_count = data["densify/count"]
    state.warning_counts = _json_load(data["meta/warnings"])
    state.log_rows = []
    state.proxy_grid = None
    state._proxy_stale = True
    return state


def checkpoints_equal(path_a, path_b):
    """Exact content equality (every array bit-identical)."""
    a = np.load(path_a)
    b = np.load(path_b)
    if set(a.files) != set(b.files):
        return False
    return all(np.array_equal(a[k], b[k]) for k in a.files)


# ---------------------------------------------------------------------------
# analytic toy scenes


@dataclass
class ToyPrimitive:
    kind: str  # sphere | plane | torus
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0  # sphere radius / plane disc radius / torus major radius
    minor_radius: float = 0.25  # torus tube radius
    normal: tuple = (0.0, 0.0, 1.0)  # plane orientation
    albedo: tuple = (0.8, 0.8, 0.8)
    roughness: float = 0.5
    metallic: float = 0.0

    def __post_init__(self):
        if self.radius <= 0 or (self.kind == "torus" and self.minor_radius <= 0):
            raise DataError(f"{self.kind} primitive has zero area")


def _intersect_sphere(o, d, center, radius):
    oc = o - center
    b = np.sum(oc * d, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc >= 0
    t = np.where(hit, -b - np.sqrt(np.maximum(disc, 0.0)), np.inf)
    t = np.where(t > 1e-6, t, np.inf)
    return t


def _intersect_plane_disc(o, d, point, normal, radius):
    n = np.asarray(normal) / np.linalg.norm(normal)
    denom = d @ n
    t = np.where(np.abs(denom) > 1e-9, ((point - o) @ n) / denom, np.inf)
    p = o + t[:, None] * d
    inside = np.linalg.norm(p - point, axis=-1) <= radius
    return np.where((t > 1e-6) & inside, t, np.inf)


def _torus_sdf(p, center, big_r, small_r):
    q = p - center
    ring = np.sqrt(q[..., 0] ** 2 + q[..., 1] ** 2) - big_r
    return np.sqrt(ring**2 + q[..., 2] ** 2) - small_r


def _intersect_torus(o, d, center, big_r, small_r, steps=128):
    t = np.full(len(o), 1e-3)
    alive = np.ones(len(o), dtype=bool)
    for _ in range(steps):
        p = o + t[:, None] * d
        s = _torus_sdf(p, center, big_r, small_r)
        t = t + np.where(alive, s, 0.0)
        alive = alive & (s > 1e-6) & (t < 50.0)
    p = o + t[:, None] * d
    hit = np.abs(_torus_sdf(p, center, big_r, small_r)) < 1e-4
    return np.where(hit, t, np.inf)


def intersect_scene(primitives, origins, dirs):
    """Closest analytic hit; returns (t, normal, prim_index, hit mask)."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    best_t = np.full(len(o), np.inf)
    best_i = np.full(len(o), -1, dtype=np.int64)
    for i, prim in enumerate(primitives):
        center = np.asarray(prim.center, dtype=np.float64)
        if prim.kind == "sphere":
            t = _intersect_sphere(o, d, center, prim.radius)
        elif prim.kind == "plane":
            t = _intersect_plane_disc(o, d, center, prim.normal, prim.radius)
        elif prim.kind == "torus":
            t = _intersect_torus(o, d, center, prim.radius, prim.minor_radius)
        else:
            raise DataError(f"unknown primitive kind {prim.kind!r}")
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_i = np.where(closer, i, best_i)
    hit = np.isfinite(best_t)
    normals = np.zeros((len(o), 3))
    pts = o + best_t[:, None] * d
    for i, prim in enumerate(primitives):
        m = hit & (best_i == i)
        if not m.any():
            continue
        center = np.asarray(prim.center, dtype=np.float64)
        if prim.kind == "sphere":
            n = pts[m] - center
        elif prim.kind == "plane":
            n = np.broadcast_to(np.asarray(prim.normal, dtype=np.float64), (int(m.sum()), 3)).copy()
            flip = (d[m] @ (np.asarray(prim.normal) / np.linalg.norm(prim.normal))) > 0
            n[flip] = -n[flip]
        else:  # torus: SDF gradient by central differences
            h = 1e-5
            n = np.stack(
                [
                    _torus_sdf(pts[m] + e, center, prim.radius, prim.minor_radius)
                    - _torus_sdf(pts[m] - e, center, prim.radius, prim.minor_radius)
                    for e in np.eye(3) * h
                ],
                axis=-1,
            )
        normals[m] = n / np.linalg.norm(n, axis=-1, keepdims=True)
    return best_t, normals, best_i, hit


def spiral_cameras(count, distance, resolution, fov_deg=45.0, turns=1.0, elev_range=(-0.5, 0.9), seed_offset=0.0):
    """Cameras on a spiral looking at the origin."""
    cams = []
    f = resolution / (2.0 * np.tan(np.radians(fov_deg) / 2.0))
    for i in range(count):
        frac = i / max(count, 1)
        az = 2.0 * np.pi * turns * frac + seed_offset
        el = elev_range[0] + (elev_range[1] - elev_range[0]) * 0.5 * (
            1 + np.sin(2.0 * np.pi * frac * 2.0)
        )
        origin = distance * np.array(
            [np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)]
        )
        cams.append(
            Camera.look_at(
                origin,
                (0.0, 0.0, 0.0),
                (0.0, 0.0, 1.0),
                f,
                f,
                resolution / 2.0,
                resolution / 2.0,
                resolution,
                resolution,
                near=0.05,
                far=distance * 4.0,
            )
        )
    return cams


def render_toy_view(primitives, cam, env_faces, samples, rng, background=(1.0, 1.0, 1.0)):
    """Ground-truth render of one view via the MC oracle.

    Returns (image, mask, depth, normal, albedo refs).
    """
    h, w = cam.height, cam.width
    dirs = cam.all_pixel_rays()
    origins = np.broadcast_to(cam.origin, dirs.shape)
    t, normals, prim_idx, hit = intersect_scene(primitives, origins, dirs)

    image = np.tile(np.asarray(background, dtype=np.float64), (h * w, 1))
    albedo_ref = np.zeros((h * w, 3))
    if hit.any():
        idx = np.nonzero(hit)[0]
        pts_n = normals[idx]
        view = -dirs[idx]
        alb = np.stack([primitives[i].albedo for i in prim_idx[idx]])
        rough = np.array([primitives[i].roughness for i in prim_idx[idx]])
        metal = np.array([primitives[i].metallic for i in prim_idx[idx]])
        albedo_ref[idx] = alb
        chunk = max(1, int(4_000_000 // max(samples, 1)))
        for s0 in range(0, len(idx), chunk):
            sl = slice(s0, s0 + chunk)
            image[idx[sl]] = shade_reference_mc(
                pts_n[sl], view[sl], alb[sl], rough[sl], metal[sl], env_faces, samples, rng
            )
    depth_z = np.where(hit, t * (dirs @ cam.forward), 0.0)
    return (
        image.reshape(h, w, 3),
        hit.reshape(h, w),
        depth_z.reshape(h, w),
        normals.reshape(h, w, 3),
        albedo_ref.reshape(h, w, 3),
    )


def synthesize_toy_dataset(
    out_dir,
    primitives,
    n_views=30,
    resolution=64,
    samples=2048,
    seed=0,
    env_faces=None,
    env_res=64,
    distance=None,
    bounds=None,
    background=(1.0, 1.0, 1.0),
    camera_offset=0.0,
    write_refs=True,
):
    """Render and write a complete toy dataset (linear PFM images).

    Every view draws from its own counter-keyed Philox stream, so view
    scheduling cannot change the data.  Reference depth/normal/albedo
    planes land in refs/ for diagnostics only.
    """
    out = Path(out_dir)
    for sub in ("images", "masks", "env", "refs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    if env_faces is None:
        env_faces = default_training_environment(env_res, seed)
    if bounds is None:
        radius = max(
            p.radius + (p.minor_radius if p.kind == "torus" else 0.0) for p in primitives
        )
        bounds = np.array([[-1.2 * radius] * 3, [1.2 * radius] * 3])
    if distance is None:
        distance = 3.2 * float(np.max(np.abs(bounds)))

    cams = spiral_cameras(n_views, distance, resolution, seed_offset=camera_offset)
    view_docs = []
    for i, cam in enumerate(cams):
        rng = np.random.Generator(np.random.Philox(key=seed).jumped(i))
        image, mask, depth, normal, albedo = render_toy_view(
            primitives, cam, env_faces, samples, rng, background
        )
        img_rel = f"images/view_{i:03d}.pfm"
        mask_rel = f"masks/view_{i:03d}.png"
        write_pfm(out / img_rel, image)
        write_mask_png(out / mask_rel, mask)
        if write_refs:
            write_pfm(out / f"refs/depth_{i:03d}.pfm", depth)
            write_pfm(out / f"refs/normal_{i:03d}.pfm", (normal + 1.0) * 0.5)
            write_pfm(out / f"refs/albedo_{i:03d}.pfm", albedo)
        view_docs.append({"image": img_rel, "mask": mask_rel, "camera": _camera_to_dict(cam)})
    env_paths = write_env_faces(out / "env", env_faces)
    write_manifest(
        out / "manifest.json",
        view_docs,
        bounds,
        color_space="linear",
        env_paths=[p.relative_to(out).as_posix() for p in env_paths],
        extras={"background": list(background)},
    )
    return out / "manifest.json"


def default_training_environment(res=64, seed=0):
    """A moderately structured light: warm key lobe, cool fill, ambient."""
    rng = np.random.default_rng(seed + 1000)
    lobes = [
        ((0.6, 0.3, 0.74), 22.0, (2.4, 2.1, 1.6)),
        ((-0.7, 0.4, 0.3), 9.0, (0.5, 0.7, 1.1)),
        ((0.2, -0.8, 0.4), 14.0, (0.9, 0.5, 0.4)),
    ]
    jitter = [(tuple(np.asarray(d) + rng.normal(0, 0.05, 3)), s, c) for d, s, c in lobes]
    return spherical_gaussian_env(res, jitter, ambient=(0.25, 0.27, 0.3))


def holdout_environment(res=64, seed=0):
    """A clearly different light for relighting evaluation."""
    rng = np.random.default_rng(seed + 2000)
    lobes = [
        ((-0.5, -0.6, 0.62), 30.0, (2.8, 2.6, 2.2)),
        ((0.8, 0.1, 0.1), 7.0, (0.4, 0.9, 1.3)),
    ]
    jitter = [(tuple(np.asarray(d) + rng.normal(0, 0.05, 3)), s, c) for d, s, c in lobes]
    return spherical_gaussian_env(res, jitter, ambient=(0.18, 0.2, 0.24))
