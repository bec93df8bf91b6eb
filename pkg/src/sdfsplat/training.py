"""Three-phase optimization: Gaussian warmup, SDF warmup, joint training.

Phase 1 fits the deferred Gaussians and the environment light alone.
Phase 2 freezes them and warms up the SDF from the Gaussians' rendered
depth/normal (stop-gradient on the Gaussian side).  Phase 3 alternates,
every iteration, one Gaussian/light step on the joint loss (SDF side
stop-gradient) with one SDF step, sharing the sampled view.

Housekeeping between iterations: vanilla clone/split/prune densification,
SDF-aware pruning with the auto-narrowing threshold, periodic prefilter
rebuilds of the trainable light, and grid upsampling at fixed milestones.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import metrics
from .cubemap import blur_faces
from .gaussians import Camera, GaussianCloud, PARAM_FIELDS, Scene
from .pipeline import render_image
from .rasterizer import normal_from_depth, render_gbuffer
from .sdf import (
    GRID_PARAM_NAMES,
    DECODER_PARAM_NAMES,
    TensoSdfField,
    render_sdf_geometry,
    regularizer_losses,
    solve_prune_threshold,
    upsample_field,
)
from .shading import EnvironmentLight


class NumericalAbortError(RuntimeError):
    """Non-finite loss; carries the iteration diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class LossWeights:
    """Loss coefficients; defaults follow the reference training recipe."""

    l1_mix: float = 0.8  # L1 vs (1 - SSIM) blend inside the color loss
    nd: float = 0.2
    sm: float = 1e-2
    mask: float = 0.2
    delta_n: float = 1e-3
    gs2sdf: float = 0.5
    eik: float = 0.1
    hes: float = 5e-4
    tv: float = 0.1
    sdf2gs: float = 0.25

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")


@dataclass
class TrainConfig:
    seed: int = 0
    iters_scale: float = 0.2  # multiplies the 1K/3K/24K reference schedule
    dtype: str = "float64"
    background: tuple = (1.0, 1.0, 1.0)

    init_primitives: int = 2000
    max_primitives: int = 8000
    init_scale_factor: float = 0.7

    env_res: int = 64
    light_rebuild_every: int = 10
    light_init_value: float = 0.5

    sdf_resolution_init: int = 32
    sdf_resolution_final: int = 96
    sdf_channels: int = 8
    sdf_ray_batch: int = 512
    sdf_n_coarse: int = 48
    sdf_n_importance: int = 24
    sdf_normal_top_k: int = 12
    eik_uniform_points: int = 512
    hessian_points: int = 128
    sdf_coarse_proxy_every: int = 25  # 0 disables the proxy grid
    sdf_coarse_proxy_res: int = 64

    densify_every: int = 100
    densify_grad_threshold: float = 2e-4
    densify_until_frac: float = 0.8
    prune_opacity: float = 0.005
    split_scale_frac: float = 0.01
    densify_split_factor: float = 1.6

    sdf_prune_every: int = 500
    sdf_prune_density: float = 0.01
    sdf_prune_both_sides: bool = False

    # ablation toggles
    deferred: bool = True
    sdf_enabled: bool = True
    sdf_pruning_enabled: bool = True
    literal_bias_form: bool = False

    # learning rates
    lr_means: float = 1.6e-4  # scaled by scene extent, decayed 100x
    lr_scales: float = 5e-3
    lr_quats: float = 1e-3
    lr_opacity: float = 5e-2
    lr_brdf: float = 2e-3  # attributes beyond vanilla splatting
    lr_light: float = 2e-3
    lr_grid: float = 1e-2
    lr_decoder: float = 1e-3

    weights: LossWeights = dc_field(default_factory=LossWeights)

    def phase_lengths(self):
        s = self.iters_scale
        gs = max(1, round(1000 * s))
        sdf = max(1, round(3000 * s)) if self.sdf_enabled else 0
        joint = max(1, round(24000 * s))
        return gs, sdf, joint

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @staticmethod
    def from_dict(d):
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        allowed = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return TrainConfig(**d)

    def to_dict(self):
        d = dataclasses.asdict(self)
        return d


@dataclass
class TrainView:
    camera: Camera
    image: np.ndarray  # (H, W, 3) linear radiance
    mask: np.ndarray  # (H, W) bool


GAUSSIAN_GROUPS = {
    "means": ("means", 1e-15),
    "quats": ("quats", 1e-15),
    "log_scales": ("scales", 1e-15),
    "opacity_logits": ("opacity", 1e-15),
    "albedo_logits": ("brdf", 1e-15),
    "roughness_logits": ("brdf", 1e-15),
    "metallic_logits": ("brdf", 1e-15),
    "normal_residuals": ("brdf", 1e-15),
}


class Adam:
    """Per-parameter Adam with named groups (lr and eps per group)."""

    def __init__(self, betas=(0.9, 0.999)):
        self.b1, self.b2 = betas
        self.m = {}
        self.v = {}
        self.t = {}

    def ensure(self, name, shape, dtype):
        if name not in self.m or self.m[name].shape != tuple(shape):
            self.m[name] = np.zeros(shape, dtype=dtype)
            self.v[name] = np.zeros(shape, dtype=dtype)
            self.t.setdefault(name, 0)

    def step(self, name, value, grad, lr, eps):
        self.ensure(name, value.shape, value.dtype)
        self.t[name] += 1
        t = self.t[name]
        m = self.m[name]
        v = self.v[name]
        m *= self.b1
        m += (1 - self.b1) * grad
        v *= self.b2
        v += (1 - self.b2) * grad * grad
        mhat = m / (1 - self.b1**t)
        vhat = v / (1 - self.b2**t)
        return value - lr * mhat / (np.sqrt(vhat) + eps)

    def resize_rows(self, name, keep=None, extra_rows=0):
        """Drop pruned rows / append zero rows (clone/split bookkeeping)."""
        if name not in self.m:
            return
        for buf_name in ("m", "v"):
            buf = getattr(self, buf_name)[name]
            if keep is not None:
                buf = buf[keep]
            if extra_rows:
                pad = np.zeros((extra_rows,) + buf.shape[1:], dtype=buf.dtype)
                buf = np.concatenate([buf, pad], axis=0)
            getattr(self, buf_name)[name] = buf

    def replace(self, name, m, v):
        self.m[name] = m
        self.v[name] = v

    def state(self):
        return {"m": dict(self.m), "v": dict(self.v), "t": dict(self.t)}

    def load(self, state):
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}
        self.t = {k: int(v) for k, v in state["t"].items()}


class TrainState:
    """Everything that evolves during training."""

    def __init__(self, views, bounds, cfg: TrainConfig):
        self.cfg = cfg
        self.views = views
        dtype = cfg.np_dtype()
        self.rng = np.random.default_rng(cfg.seed)
        bounds = np.asarray(bounds, dtype=np.float64)
        cloud = GaussianCloud.random(
            cfg.init_primitives, bounds, self.rng, scale_factor=cfg.init_scale_factor, dtype=dtype
        )
        self.scene = Scene(cloud, bounds)
        self.field = TensoSdfField.create(
            bounds, cfg.sdf_resolution_init, cfg.sdf_channels, rng=self.rng, dtype=dtype
        )
        inv_softplus = np.log(np.expm1(cfg.light_init_value))
        self.env_logits = np.full((6, cfg.env_res, cfg.env_res, 3), inv_softplus, dtype=dtype)
        self.light = EnvironmentLight(np.logaddexp(0.0, self.env_logits.astype(np.float64)))
        self.optimizer = Adam()
        self.iteration = 0
        self.view_perm = None
        self.view_cursor = 0
        self.densify_grad_accum = np.zeros(len(cloud))
        self.densify_count = np.zeros(len(cloud))
        self.warning_counts = {"no_joint_pixels": 0, "prune_skipped": 0}
        self.log_rows = []
        self.proxy_grid = None
        self._proxy_stale = True

    # -- phases ---------------------------------------------------------

    def phase(self):
        gs, sdf, joint = self.cfg.phase_lengths()
        if self.iteration < gs:
            return "gs-warmup"
        if self.iteration < gs + sdf:
            return "sdf-warmup"
        if self.iteration < gs + sdf + joint:
            return "joint"
        return "done"

    def joint_start(self):
        gs, sdf, _ = self.cfg.phase_lengths()
        return gs + sdf

    def total_iterations(self):
        return sum(self.cfg.phase_lengths())

    def gaussian_step_count(self):
        gs, _, joint = self.cfg.phase_lengths()
        return gs + joint

    # -- deterministic view order ---------------------------------------

    def next_view(self):
        if self.view_perm is None or self.view_cursor >= len(self.view_perm):
            self.view_perm = self.rng.permutation(len(self.views))
            self.view_cursor = 0
        idx = int(self.view_perm[self.view_cursor])
        self.view_cursor += 1
        return self.views[idx]

    # -- learning rates ---------------------------------------------------

    def lr_for(self, name, gaussian_step):
        cfg = self.cfg
        if name == "means":
            total = max(self.gaussian_step_count(), 1)
            frac = min(gaussian_step / total, 1.0)
            return cfg.lr_means * self.scene.extent * (0.01**frac)
        table = {
            "quats": cfg.lr_quats,
            "log_scales": cfg.lr_scales,
            "opacity_logits": cfg.lr_opacity,
            "albedo_logits": cfg.lr_brdf,
            "roughness_logits": cfg.lr_brdf,
            "metallic_logits": cfg.lr_brdf,
            "normal_residuals": cfg.lr_brdf,
            "env_logits": cfg.lr_light,
            "w1": cfg.lr_decoder,
            "b1": cfg.lr_decoder,
            "w2": cfg.lr_decoder,
            "b2": cfg.lr_decoder,
            "log_gamma": cfg.lr_grid,
        }
        if name in GRID_PARAM_NAMES:
            return cfg.lr_grid
        return table[name]

    def eps_for(self, name):
        if name in GAUSSIAN_GROUPS:
            return 1e-15
        return 1e-8

    # -- light -------------------------------------------------------------

    def decoded_env(self):
        return np.logaddexp(0.0, self.env_logits.astype(np.float64))

    def rebuild_light(self):
        self.light.rebuild(self.decoded_env())

    # -- proxy SDF grid for coarse sample placement -----------------------

    def coarse_sdf_fn(self):
        cfg = self.cfg
        if cfg.sdf_coarse_proxy_every <= 0:
            return None
        if self.proxy_grid is None or self._proxy_stale or (
            self.iteration % cfg.sdf_coarse_proxy_every == 0
        ):
            r = cfg.sdf_coarse_proxy_res
            lo, hi = self.scene.bbox
            axes = [np.linspace(lo[a], hi[a], r) for a in range(3)]
            gx, gy, gz = np.meshgrid(*axes, indexing="ij")
            pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
            vals, _ = self.field.query(pts.astype(np.float32))
            self.proxy_grid = np.asarray(vals).reshape(r, r, r)
            self._proxy_stale = False
        grid = self.proxy_grid
        r = grid.shape[0]
        lo, hi = self.scene.bbox

        def fn(points):
            u = (points - lo) / (hi - lo) * (r - 1)
            u = np.minimum(np.maximum(u, 0.0), r - 1)
            i0 = np.minimum(np.floor(u), r - 2).astype(np.int64)
            f = u - i0
            c = grid
            ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
            fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
            v000 = c[ix, iy, iz]
            v100 = c[ix + 1, iy, iz]
            v010 = c[ix, iy + 1, iz]
            v110 = c[ix + 1, iy + 1, iz]
            v001 = c[ix, iy, iz + 1]
            v101 = c[ix + 1, iy, iz + 1]
            v011 = c[ix, iy + 1, iz + 1]
            v111 = c[ix + 1, iy + 1, iz + 1]
            v00 = v000 * (1 - fx) + v100 * fx
            v10 = v010 * (1 - fx) + v110 * fx
            v01 = v001 * (1 - fx) + v101 * fx
            v11 = v011 * (1 - fx) + v111 * fx
            return (v00 * (1 - fy) + v10 * fy) * (1 - fz) + (v01 * (1 - fy) + v11 * fy) * fz

        return fn


# ---------------------------------------------------------------------------
# losses


def loss_gs(color, gb, aux_normals_params, view: TrainView, weights: LossWeights, cam: Camera):
    """Color + depth-normal + smoothness + mask + residual-penalty terms.

    `color` and the G-buffer planes are tape variables; the ground truth
    arrives as plain arrays.  Returns (total, dict of term values).
    """
    gt = view.image
    dtype = ad.value_of(color).dtype
    gt = gt.astype(dtype)

    l1 = ad.mean(ad.absolute(ad.sub(color, gt)))
    ssim_val = metrics.ssim(color, gt)
    l_c = ad.add(ad.mul(l1, weights.l1_mix), ad.mul(ad.sub(1.0, ssim_val), 1.0 - weights.l1_mix))

    n_hat, valid = normal_from_depth(gb.depth, gb.alpha, cam)
    h, w = cam.height, cam.width
    vidx = np.nonzero(valid.reshape(-1))[0]
    if len(vidx) > 0:
        n_gs = ad.normalize_last(ad.gather(ad.reshape(gb.normal, (h * w, 3)), vidx))
        n_d = ad.gather(ad.reshape(n_hat, (h * w, 3)), vidx)
        l_nd = ad.mean(ad.reduce_sum(ad.square(ad.sub(n_d, n_gs)), axis=1))
    else:
        l_nd = np.asarray(0.0, dtype=dtype)

    edge = _image_gradient_magnitude(gt)
    damp = np.exp(-edge)
    l_sm = None
    for plane in (gb.albedo, gb.roughness, gb.metallic):
        g_mag = _plane_gradient_magnitude(plane)
        term = ad.mean(ad.mul(g_mag, damp))
        l_sm = term if l_sm is None else ad.add(l_sm, term)

    a = ad.clip(gb.alpha, 1e-6, 1.0 - 1e-6)
    m = view.mask.astype(dtype)
    l_mask = ad.neg(
        ad.mean(ad.add(ad.mul(ad.log(a), m), ad.mul(ad.log(ad.sub(1.0, a)), 1.0 - m)))
    )

    l_dn = ad.mean(ad.reduce_sum(ad.square(aux_normals_params), axis=1))

    total = l_c
    total = ad.add(total, ad.mul(l_nd, weights.nd))
    total = ad.add(total, ad.mul(l_sm, weights.sm))
    total = ad.add(total, ad.mul(l_mask, weights.mask))
    total = ad.add(total, ad.mul(l_dn, weights.delta_n))
    terms = {
        "l_c": float(ad.value_of(l_c)),
        "l_nd": float(ad.value_of(l_nd)),
        "l_sm": float(ad.value_of(l_sm)),
        "l_mask": float(ad.value_of(l_mask)),
        "l_dn": float(ad.value_of(l_dn)),
    }
    return total, terms


def _image_gradient_magnitude(img):
    dx = np.zeros(img.shape[:2], dtype=img.dtype)
    dy = np.zeros(img.shape[:2], dtype=img.dtype)
    dx[:, :-1] = np.abs(np.diff(img, axis=1)).sum(axis=-1)
    dy[:-1, :] = np.abs(np.diff(img, axis=0)).sum(axis=-1)
    return dx + dy


def _plane_gradient_magnitude(plane):
    """Sum of |forward differences| over both axes (and channels)."""
    shape = ad.value_of(plane).shape
    dx = ad.absolute(ad.sub(plane[:, 1:], plane[:, :-1]))
    dy = ad.absolute(ad.sub(plane[1:, :], plane[:-1, :]))
    if len(shape) == 3:
        dx = ad.reduce_sum(dx, axis=-1)
        dy = ad.reduce_sum(dy, axis=-1)
    h, w = shape[0], shape[1]
    dtype = ad.value_of(plane).dtype
    zx = np.zeros((h, 1), dtype=dtype)
    zy = np.zeros((1, w), dtype=dtype)
    return ad.add(ad.concat([dx, zx], axis=1), ad.concat([dy, zy], axis=0))


def loss_mutual(gs_depth, gs_normal, sdf_depth, sdf_normal, joint_valid, direction):
    """L1 depth plus (1 - cosine) normal agreement over jointly valid rays.

    `direction` names the stop-gradient side: "gs2sdf" detaches the
    Gaussian values (SDF learns), "sdf2gs" detaches the SDF values.
    Returns (loss, n_valid).
    """
    vidx = np.nonzero(joint_valid)[0]
    if len(vidx) == 0:
        return None, 0
    gd = ad.gather(gs_depth, vidx)
    gn = ad.normalize_last(ad.gather(gs_normal, vidx))
    sd = ad.gather(sdf_depth, vidx)
    sn = ad.normalize_last(ad.gather(sdf_normal, vidx))
    if direction == "gs2sdf":
        gd, gn = ad.stop_gradient(gd), ad.stop_gradient(gn)
    elif direction == "sdf2gs":
        sd, sn = ad.stop_gradient(sd), ad.stop_gradient(sn)
    else:
        raise ValueError(direction)
    l_depth = ad.mean(ad.absolute(ad.sub(gd, sd)))
    l_normal = ad.mean(ad.sub(1.0, ad.dot_last(gn, sn)))
    return ad.add(l_depth, l_normal), len(vidx)


# ---------------------------------------------------------------------------
# train step


def train_step(state: TrainState, view: TrainView | None = None):
    """One optimization iteration; returns the loss report dict.

    In the joint phase the SDF geometry is rendered once on its own tape;
    the Gaussian step consumes its values (an implicit stop-gradient) and
    the SDF step then differentiates the same render, so both sides see
    identical pre-step values of the other.
    """
    cfg = state.cfg
    phase = state.phase()
    if phase == "done":
        raise RuntimeError("training schedule exhausted")
    if view is None:
        view = state.next_view()
    cam = view.camera

    if state.iteration % cfg.light_rebuild_every == 0:
        state.rebuild_light()

    report = {"iteration": state.iteration, "phase": phase}
    gs_values = None
    sdf_ctx = None

    if cfg.sdf_enabled and phase in ("sdf-warmup", "joint"):
        sdf_ctx = _begin_sdf_render(state, cam)
    if phase in ("gs-warmup", "joint"):
        gs_values = _gaussian_step(state, view, report, sdf_ctx)
    if sdf_ctx is not None:
        if gs_values is None:
            gs_values = _render_gs_values(state, cam)
        _sdf_step(state, view, gs_values, sdf_ctx, report)

    _housekeeping(state, report)
    state.iteration += 1
    gamma = float(np.exp(ad.value_of(state.field.params["log_gamma"])[0]))
    report["gamma"] = gamma
    s_eps = solve_prune_threshold(gamma, cfg.sdf_prune_density)
    report["s_eps"] = s_eps if s_eps is not None else float("nan")
    report["n_primitives"] = len(state.scene.cloud)
    state.log_rows.append(report)
    return report


def _render_gs_values(state, cam):
    """No-gradient render of the Gaussian depth/normal(s) for SDF supervision."""
    gb, _ = render_gbuffer(state.scene.cloud.params(), cam)
    return {
        "depth": ad.value_of(gb.depth),
        "normal": ad.value_of(gb.normal),
        "alpha": ad.value_of(gb.alpha),
    }


def _sample_sdf_pixels(state, cam):
    n = min(state.cfg.sdf_ray_batch, cam.height * cam.width)
    return np.sort(state.rng.choice(cam.height * cam.width, size=n, replace=False))


def _begin_sdf_render(state: TrainState, cam: Camera):
    """Render SDF geometry for a sampled pixel subset on a fresh tape."""
    cfg = state.cfg
    pixels = _sample_sdf_pixels(state, cam)
    ys, xs = np.divmod(pixels, cam.width)
    dirs = cam.pixel_rays(np.stack([xs + 0.5, ys + 0.5], axis=-1))
    origins = np.broadcast_to(cam.origin, dirs.shape)
    tape = ad.Tape()
    params = {k: tape.leaf(v) for k, v in state.field.params.items()}
    out = render_sdf_geometry(
        state.field,
        origins,
        dirs,
        params=params,
        n_coarse=cfg.sdf_n_coarse,
        n_importance=cfg.sdf_n_importance,
        normal_top_k=cfg.sdf_normal_top_k,
        rng=state.rng,
        coarse_fn=state.coarse_sdf_fn(),
    )
    cos_z = dirs @ cam.forward
    return {
        "tape": tape,
        "params": params,
        "out": out,
        "pixels": pixels,
        "dirs": dirs,
        "cos_z": cos_z,
        "depth_value": np.asarray(ad.value_of(out["depth"])),
        "normal_value": np.asarray(ad.value_of(out["normal"])),
        "mass_value": np.asarray(ad.value_of(out["mass"])),
    }


def _gaussian_step(state: TrainState, view: TrainView, report, sdf_ctx=None):
    cfg = state.cfg
    cam = view.camera
    phase = state.phase()
    tape = ad.Tape()
    params = {k: tape.leaf(v) for k, v in state.scene.cloud.params().items()}
    env_var = tape.leaf(state.env_logits)
    st_base = blur_faces(ad.softplus(env_var))

    color, gb, aux = render_image(
        params,
        cam,
        state.light,
        background=cfg.background,
        deferred=cfg.deferred,
        st_base=st_base,
        literal_bias_form=cfg.literal_bias_form,
    )
    total, terms = loss_gs(color, gb, params["normal_residuals"], view, cfg.weights, cam)

    if sdf_ctx is not None and phase == "joint":
        pixels = sdf_ctx["pixels"]
        h, w = cam.height, cam.width
        gs_depth = ad.gather(ad.reshape(gb.depth, (h * w,)), pixels)
        gs_normal = ad.gather(ad.reshape(gb.normal, (h * w, 3)), pixels)
        gs_alpha = ad.value_of(gb.alpha).reshape(-1)[pixels]
        joint_valid = (
            (gs_alpha > 0.5) & (sdf_ctx["mass_value"] > 0.5) & sdf_ctx["out"]["valid"]
        )
        # SDF side enters as plain values: stop-gradient by construction
        l_mut, n_valid = loss_mutual(
            gs_depth,
            gs_normal,
            sdf_ctx["depth_value"] * sdf_ctx["cos_z"],
            sdf_ctx["normal_value"],
            joint_valid,
            direction="sdf2gs",
        )
        if l_mut is None:
            state.warning_counts["no_joint_pixels"] += 1
            terms["l_sdf2gs"] = 0.0
        else:
            total = ad.add(total, ad.mul(l_mut, cfg.weights.sdf2gs))
            terms["l_sdf2gs"] = float(ad.value_of(l_mut))

    loss_val = float(ad.value_of(total))
    if not np.isfinite(loss_val):
        raise NumericalAbortError(
            f"non-finite Gaussian loss at iteration {state.iteration}",
            {"iteration": state.iteration, "terms": terms},
        )
    adj = tape.backward(total)

    # densification bookkeeping: screen-space positional gradient (NDC units)
    if aux["center"] is not None and len(aux["keep"]) > 0:
        g_center = adj.get(aux["center"])
        g_ndc = np.linalg.norm(
            g_center * np.array([cam.width, cam.height]) * 0.5, axis=1
        )
        state.densify_grad_accum[aux["keep"]] += g_ndc
        state.densify_count[aux["keep"]] += 1

    gaussian_step = _gaussian_steps_taken(state)
    cloud = state.scene.cloud
    for name in PARAM_FIELDS:
        grad = adj.get(params[name])
        new = state.optimizer.step(
            name, getattr(cloud, name), grad, state.lr_for(name, gaussian_step), state.eps_for(name)
        )
        setattr(cloud, name, new)
    g_env = adj.get(env_var)
    state.env_logits = state.optimizer.step(
        "env_logits", state.env_logits, g_env, state.lr_for("env_logits", 0), state.eps_for("env_logits")
    )

    report.update(terms)
    report["loss_gs"] = loss_val
    return {
        "depth": ad.value_of(gb.depth),
        "normal": ad.value_of(gb.normal),
        "alpha": ad.value_of(gb.alpha),
    }


def _gaussian_steps_taken(state):
    gs, sdf, _ = state.cfg.phase_lengths()
    it = state.iteration
    if it < gs:
        return it
    return max(it - sdf, gs)


def _sdf_step(state: TrainState, view: TrainView, gs_values, sdf_ctx, report):
    cfg = state.cfg
    cam = view.camera
    tape = sdf_ctx["tape"]
    params = sdf_ctx["params"]
    out = sdf_ctx["out"]
    pixels = sdf_ctx["pixels"]
    cos_z = sdf_ctx["cos_z"].astype(ad.value_of(out["depth"]).dtype)

    gs_depth = gs_values["depth"].reshape(-1)[pixels]
    gs_normal = gs_values["normal"].reshape(-1, 3)[pixels]
    gs_alpha = gs_values["alpha"].reshape(-1)[pixels]
    joint_valid = (gs_alpha > 0.5) & (sdf_ctx["mass_value"] > 0.5) & out["valid"]

    depth_z = ad.mul(out["depth"], cos_z)
    l_mut, n_valid = loss_mutual(
        gs_depth, gs_normal, depth_z, out["normal"], joint_valid, direction="gs2sdf"
    )
    dtype = ad.value_of(out["depth"]).dtype
    if l_mut is None:
        state.warning_counts["no_joint_pixels"] += 1
        l_mut = np.asarray(0.0, dtype=dtype)

    mask_gt = view.mask.reshape(-1)[pixels].astype(dtype)
    mass_c = ad.clip(out["mass"], 1e-6, 1.0 - 1e-6)
    l_mask = ad.neg(
        ad.mean(
            ad.add(
                ad.mul(ad.log(mass_c), mask_gt), ad.mul(ad.log(ad.sub(1.0, mass_c)), 1.0 - mask_gt)
            )
        )
    )

    lo, hi = state.scene.bbox
    uni = state.rng.uniform(lo, hi, (cfg.eik_uniform_points, 3))
    hes_pts = uni[: cfg.hessian_points]
    l_eik, l_hes, l_tv = regularizer_losses(
        state.field, uni, params=params, hessian_points=hes_pts,
        extra_grad_norms=out["grad_norms"],
    )

    total = ad.mul(l_mut, cfg.weights.gs2sdf)
    total = ad.add(total, ad.mul(l_eik, cfg.weights.eik))
    total = ad.add(total, ad.mul(l_hes, cfg.weights.hes))
    total = ad.add(total, l_mask)
    total = ad.add(total, ad.mul(l_tv, cfg.weights.tv))

    loss_val = float(ad.value_of(total))
    if not np.isfinite(loss_val):
        raise NumericalAbortError(
            f"non-finite SDF loss at iteration {state.iteration}",
            {"iteration": state.iteration, "loss": loss_val},
        )
    adj = tape.backward(total)
    for name in state.field.params:
        grad = adj.get(params[name])
        new = state.optimizer.step(
            name, state.field.params[name], grad, state.lr_for(name, 0), state.eps_for(name)
        )
        state.field.params[name] = new
    state._proxy_stale = False  # refresh happens on the fixed cadence

    report.update(
        {
            "loss_sdf": loss_val,
            "l_gs2sdf": float(ad.value_of(l_mut)),
            "l_eik": float(ad.value_of(l_eik)),
            "l_hes": float(ad.value_of(l_hes)),
            "l_tv": float(ad.value_of(l_tv)),
            "l_sdf_mask": float(ad.value_of(l_mask)),
            "sdf_valid_rays": int(n_valid),
        }
    )


# ---------------------------------------------------------------------------
# housekeeping: densify, prune, upsample


def _housekeeping(state: TrainState, report):
    cfg = state.cfg
    phase = state.phase()
    it = state.iteration
    gs_len, sdf_len, joint_len = cfg.phase_lengths()

    if phase in ("gs-warmup", "joint") and it > 0 and it % cfg.densify_every == 0:
        densify_stop = state.joint_start() + int(cfg.densify_until_frac * joint_len)
        if it < densify_stop:
            densify_and_prune_vanilla(state, report)

    if (
        phase == "joint"
        and cfg.sdf_enabled
        and cfg.sdf_pruning_enabled
        and it > state.joint_start()
        and (it - state.joint_start()) % cfg.sdf_prune_every == 0
    ):
        pruned = sdf_aware_prune(state)
        report["sdf_pruned"] = pruned

    if phase == "joint" and cfg.sdf_enabled:
        rel = it - state.joint_start()
        milestones = {joint_len // 4: None, joint_len // 2: None}
        if rel in milestones and state.field.resolution < cfg.sdf_resolution_final:
            step_ups = [
                int(round(np.sqrt(cfg.sdf_resolution_init * cfg.sdf_resolution_final))),
                cfg.sdf_resolution_final,
            ]
            target = step_ups[0] if rel == joint_len // 4 else step_ups[1]
            target = max(target, state.field.resolution)
            _upsample_sdf(state, target)
            report["sdf_resolution"] = target


def _upsample_sdf(state: TrainState, new_res):
    old = state.field
    state.field = upsample_field(old, new_res)
    # carry optimizer moments through the same interpolation
    for name in GRID_PARAM_NAMES:
        if name not in state.optimizer.m:
            continue
        helper_m = TensoSdfField(
            {**old.params, name: state.optimizer.m[name]}, old.bounds, old.resolution, old.channels
        )
        helper_v = TensoSdfField(
            {**old.params, name: state.optimizer.v[name]}, old.bounds, old.resolution, old.channels
        )
        m_new = upsample_field(helper_m, new_res).params[name]
        v_new = upsample_field(helper_v, new_res).params[name]
        state.optimizer.replace(name, m_new, np.maximum(v_new, 0.0))
    state._proxy_stale = True


def densify_and_prune_vanilla(state: TrainState, report=None):
    """3DGS housekeeping: clone small / split large high-gradient primitives,
    prune transparent or out-of-bounds ones."""
    cfg = state.cfg
    cloud = state.scene.cloud
    counts = np.maximum(state.densify_count, 1.0)
    avg_grad = state.densify_grad_accum / counts

    opacities = ad._sigmoid(ad.value_of(cloud.opacity_logits))
    lo, hi = state.scene.bbox
    inside = ((cloud.means >= lo) & (cloud.means <= hi)).all(axis=1)
    keep = (opacities >= cfg.prune_opacity) & inside

    hot = avg_grad > cfg.densify_grad_threshold
    max_scale = np.exp(cloud.log_scales).max(axis=1)
    big = max_scale > cfg.split_scale_frac * state.scene.extent
    clone_mask = hot & ~big & keep
    split_mask = hot & big & keep

    budget = cfg.max_primitives - int(keep.sum())
    n_new = int(clone_mask.sum() + 2 * split_mask.sum())
    if n_new > max(budget, 0):
        clone_mask[:] = False
        split_mask[:] = False
        n_new = 0

    pieces = [cloud.subset(keep)]
    if clone_mask.any():
        pieces.append(cloud.subset(clone_mask))
    if split_mask.any():
        src = cloud.subset(split_mask)
        for _ in range(2):
            child = GaussianCloud(**{f: getattr(src, f).copy() for f in PARAM_FIELDS})
            sigma = np.exp(src.log_scales)
            offsets = state.rng.normal(size=(len(src), 3)) * sigma
            rots = np.stack([_rotmat_value(q) for q in src.quats])
            child.means = src.means + np.einsum("nij,nj->ni", rots, offsets)
            child.log_scales = src.log_scales - np.log(cfg.densify_split_factor)
            pieces.append(child)
    keep_for_split = keep.copy()
    keep_for_split[split_mask] = False  # split parents are replaced by children
    if split_mask.any():
        pieces[0] = cloud.subset(keep_for_split)

    merged = pieces[0]
    for extra in pieces[1:]:
        merged = merged.concatenated(extra)
    dtype = cloud.means.dtype
    for f in PARAM_FIELDS:
        setattr(merged, f, getattr(merged, f).astype(dtype))
    state.scene.cloud = merged

    keep_rows = np.nonzero(keep_for_split if split_mask.any() else keep)[0]
    added = len(merged) - len(keep_rows)
    for name in PARAM_FIELDS:
        state.optimizer.resize_rows(name, keep=keep_rows, extra_rows=added)
    state.densify_grad_accum = np.zeros(len(merged))
    state.densify_count = np.zeros(len(merged))
    if report is not None:
        report["densify_cloned"] = int(clone_mask.sum())
        report["densify_split"] = int(split_mask.sum())
        report["pruned_vanilla"] = int((~keep).sum())


def _rotmat_value(q):
    from .linalg import quat_to_rotmat

    return quat_to_rotmat(np.asarray(q, dtype=np.float64))


def sdf_aware_prune(state: TrainState):
    """Discard primitives whose center SDF exceeds the density threshold."""
    cfg = state.cfg
    gamma = float(np.exp(ad.value_of(state.field.params["log_gamma"])[0]))
    s_eps = solve_prune_threshold(gamma, cfg.sdf_prune_density)
    if s_eps is None:
        state.warning_counts["prune_skipped"] += 1
        return 0
    cloud = state.scene.cloud
    s_centers, _ = state.field.query(cloud.means.astype(np.float64))
    s_centers = np.asarray(s_centers, dtype=np.float64)
    bad = s_centers > s_eps
    if cfg.sdf_prune_both_sides:
        bad |= s_centers < -s_eps
    if not bad.any():
        return 0
    keep = np.nonzero(~bad)[0]
    state.scene.cloud = cloud.subset(~bad)
    for name in PARAM_FIELDS:
        state.optimizer.resize_rows(name, keep=keep)
    state.densify_grad_accum = state.densify_grad_accum[~bad]
    state.densify_count = state.densify_count[~bad]
    return int(bad.sum())
