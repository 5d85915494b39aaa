"""Field fitting, joint generator training, and the shape operations.

The joint loop trains the denoiser and the part decoder together.  Rendering
gradients reach the denoiser through a *skip*: instead of backpropagating
through the frozen volume autoencoder's decode, the gradient w.r.t. the
decoded field is resampled to latent resolution (the exact adjoint of
trilinear upsampling) and injected directly onto the clean-latent prediction.
"""

import csv
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import ae as AE
from . import decoder as DEC
from . import diffusion as DIFF
from . import fields as F
from . import render as R
from . import tensor as T
from .errors import DataError, NumericError
from .optim import Adam

EMPTY_DENSITY = -60.0  # clamped -inf stand-in: softplus(-62) underflows to 0


class FitDivergence(NumericError):
    """Fitting hit a non-finite loss; .bundle holds the last finite state."""

    def __init__(self, msg, bundle=None):
        super().__init__(msg)
        self.bundle = bundle


@dataclass
class TrainConfig:
    iterations: int = 2000
    warmup_iters: int = 200
    rays_per_step: int = 2048
    samples_per_ray: int = 32
    lr_unet: float = 1e-3
    lr_decoder: float = 1e-3
    tv_weight: float = 1e-5
    t_min: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.warmup_iters >= self.iterations:
            raise DataError("warm-up must end before training does")
        for name in ("lr_unet", "lr_decoder"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")


@dataclass
class LossReport:
    step: int
    t: float
    lambda_t: float
    diff_loss: float
    rend_loss: float
    tv_loss: float
    kl_loss: float
    z_penalty: float
    grad_unet: float = 0.0
    grad_decoder: float = 0.0
    grad_z: float = 0.0
    aborted: bool = False

    CSV_FIELDS = ("step", "t", "lambda", "diff_loss", "rend_loss", "tv_loss",
                  "kl_loss", "z_penalty", "grad_unet", "grad_decoder",
                  "grad_z", "aborted")

    def row(self):
        return [self.step, repr(self.t), repr(self.lambda_t),
                repr(self.diff_loss), repr(self.rend_loss),
                repr(self.tv_loss), repr(self.kl_loss), repr(self.z_penalty),
                repr(self.grad_unet), repr(self.grad_decoder),
                repr(self.grad_z), int(self.aborted)]


def lambda_weight(t, t_min=1e-3):
    """-log(clamp(t, t_min, 1)): heavy near t=0, zero at t=1."""
    return float(-np.log(min(max(float(t), t_min), 1.0)))


def skip_gradient(grad, latent_extents, latent_channels=None):
    """Resample a field-shaped gradient [C,X,Y,Z] to latent extents.

    Applies the exact adjoint of the trilinear upsampling matrices per axis,
    so when the decoder *is* that upsampling this equals the true chain rule.
    """
    grad = np.asarray(grad)
    if grad.ndim != 4:
        raise DataError("gradient must be [C,X,Y,Z]")
    if latent_channels is not None and grad.shape[0] != latent_channels:
        raise DataError("channel mismatch between field gradient and latent")
    out = grad
    for axis, n_lat in enumerate(latent_extents):
        n_field = out.shape[axis + 1]
        up = T._resize_matrix(n_lat, n_field, out.dtype)  # [n_field, n_lat]
        out = np.moveaxis(np.tensordot(up.T, out, axes=([1], [axis + 1])),
                          0, axis + 1)
    return out


class _MergedGrads:
    """Read-only sum of several gradient maps (None entries skipped)."""

    def __init__(self, maps):
        self.maps = [m for m in maps if m is not None]

    def grad(self, t):
        total = None
        for m in self.maps:
            g = m.grad(t)
            if g is None:
                continue
            total = g.copy() if total is None else total + g
        return total


# ---------------------------------------------------------------------------
# per-object field fitting


@dataclass
class RayPool:
    """All pixels of a set of posed views, flattened for random-ray batches."""

    origins: np.ndarray
    dirs: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    valid: np.ndarray
    rgb: np.ndarray
    labels: np.ndarray | None = None

    @classmethod
    def build(cls, cameras, images, part_maps=None):
        ors, drs, tn, tf, va, cols, labs = [], [], [], [], [], [], []
        for i, (cam, img) in enumerate(zip(cameras, images)):
            rb = R.generate_rays(cam, R.all_pixels(cam))
            ors.append(rb.origins)
            drs.append(rb.dirs)
            tn.append(rb.t_near)
            tf.append(rb.t_far)
            va.append(rb.valid)
            cols.append(np.asarray(img, dtype=np.float64).reshape(-1, 3))
            if part_maps is not None:
                labs.append(np.asarray(part_maps[i]).reshape(-1))
        return cls(np.concatenate(ors), np.concatenate(drs),
                   np.concatenate(tn), np.concatenate(tf),
                   np.concatenate(va), np.concatenate(cols),
                   np.concatenate(labs) if labs else None)

    @property
    def count(self):
        return self.origins.shape[0]

    def batch(self, idx):
        return R.RayBatch(self.origins[idx], self.dirs[idx],
                          self.t_near[idx], self.t_far[idx], self.valid[idx])


@dataclass
class FitResult:
    bundle: F.FieldBundle
    psnr: float
    losses: list = dc_field(default_factory=list)


def _heldout_psnr(bundle, cameras, images, m, chunk=4096):
    if not cameras:
        return float("nan")
    pool = RayPool.build(cameras, images)
    preds = np.empty_like(pool.rgb)
    for s in range(0, pool.count, chunk):
        idx = np.arange(s, min(s + chunk, pool.count))
        rgb, _ = R.render_pixels_fit(bundle, pool.batch(idx), m)
        preds[idx] = rgb.data
    return R.psnr(preds, pool.rgb)


def fit_field(cameras, images, extents, iterations=1500, rays_per_step=1024,
              samples_per_ray=None, lr=0.1, tv_weight=1e-5,
              sparsity_weight=1e-4, seed=0, init_density=-2.0,
              heldout_cameras=(), heldout_images=(), log_every=0,
              dtype=np.float64):
    """Fit density/feature grids to posed RGB views of one object.

    Part maps play no role here; geometry and color alone drive the fit.
    Returns FitResult; raises FitDivergence on a non-finite loss.
    """
    if len(cameras) < 8:
        raise DataError("fitting needs at least 8 views")
    if samples_per_ray is None:
        samples_per_ray = int(1.5 * max(extents))
    rng = np.random.default_rng(seed)
    pool = RayPool.build(cameras, images)
    bundle = F.make_bundle(extents, init_density=init_density,
                           requires_grad=True, dtype=dtype)
    params = {"density": bundle.density, "features": bundle.features}
    opt = Adam(params, lr=lr)
    losses = []
    last_good = None
    for it in range(iterations):
        idx = rng.choice(pool.count, size=min(rays_per_step, pool.count),
                         replace=False)
        try:
            with T.Tape():
                rgb, _ = R.render_pixels_fit(bundle, pool.batch(idx),
                                             samples_per_ray, jitter=True,
                                             rng=rng)
                loss = R.rendering_loss(rgb, pool.rgb[idx].astype(dtype))
                if tv_weight:
                    tv = T.add(F.tv_loss(bundle.density, eps=1e-8),
                               F.tv_loss(bundle.features, eps=1e-8))
                    loss = T.add(loss, T.scale(tv, tv_weight))
                if sparsity_weight:
                    occ = T.reduce_mean(F.activate_density(bundle.density))
                    loss = T.add(loss, T.scale(occ, sparsity_weight))
                grads = T.backward(loss)
        except T.NonFiniteError as exc:
            raise FitDivergence(f"field fitting diverged at step {it}: {exc}",
                                bundle=last_good) from exc
        losses.append(float(loss.data))
        last_good = F.bundle_from_array(bundle.as_array())
        opt.step(grads)
        if log_every and (it + 1) % log_every == 0:
            print(f"  fit step {it + 1}/{iterations} loss {losses[-1]:.5f}")
    held = _heldout_psnr(bundle, list(heldout_cameras), list(heldout_images),
                         samples_per_ray)
    return FitResult(bundle=bundle, psnr=held, losses=losses)


# ---------------------------------------------------------------------------
# joint training


@dataclass
class ObjectData:
    name: str
    field: np.ndarray          # fitted [4,X,Y,Z], frozen target
    cameras: list
    images: list
    part_maps: list


class JointTrainer:
    """Owns the denoiser, decoder, per-object part codes, and frozen AE."""

    def __init__(self, ae, unet, decoder, objects, cfg):
        if not objects:
            raise DataError("joint training needs at least one object")
        self.ae = ae
        self.unet = unet
        self.decoder = decoder
        self.objects = objects
        self.cfg = cfg
        self.step_idx = 0
        for p in ae.params.values():
            p.requires_grad = False
        init_rng = np.random.default_rng(cfg.seed)
        self.z_codes = [
            T.Tensor(DEC.init_part_code(decoder.k_parts, decoder.d_model,
                                        init_rng).astype(unet.dtype),
                     requires_grad=True, name=f"z.{i}")
            for i in range(len(objects))]
        self.latents, self.kl_values, self.latent_scale = self._encode_all()
        self.pools = [RayPool.build(o.cameras, o.images, o.part_maps)
                      for o in objects]
        self.opt_unet = Adam(unet.params, lr=cfg.lr_unet)
        self.opt_decoder = Adam(decoder.params, lr=cfg.lr_decoder)
        self.opt_z = Adam({f"z.{i}": z for i, z in enumerate(self.z_codes)},
                          lr=cfg.lr_decoder)

    def _encode_all(self):
        means, kls = [], []
        for obj in self.objects:
            _, mean, logvar = self.ae.encode(
                np.asarray(obj.field, dtype=self.ae.dtype))
            means.append(mean.data.astype(np.float64))
            kls.append(float(AE.kl_loss(mean, logvar).data))
        scale = float(np.std(np.stack(means)))
        if scale <= 0:
            scale = 1.0
        latents = [(m / scale).astype(self.unet.dtype) for m in means]
        return latents, kls, scale

    def decode_latent(self, latent):
        """Latent (normalized) -> field array; must run outside any tape."""
        if T._ACTIVE_TAPE is not None:
            raise DataError("decode_latent must run outside a tape")
        return self.ae.decode(np.asarray(latent) * self.latent_scale).data

    def _render_rays(self, v_hat, refined, z, pool, idx, rng):
        m = self.cfg.samples_per_ray
        rays = pool.batch(idx)
        r = idx.size
        _, delta, points = R.sample_batch(rays, m, jitter=True, rng=rng)
        pts = points.reshape(-1, 3)
        dirs = np.repeat(rays.dirs, m, axis=0)
        d_log = T.trilinear_sample(T.narrow(v_hat, 0, 0, 1),
                                   F.world_to_grid(pts, v_hat.shape[1:]))
        sig = T.reshape(F.activate_density(d_log), (r, m))
        rgb = self.decoder.point_color(refined, pts, dirs, z)
        probs = self.decoder.point_part_prob(refined, pts, z)
        vals = T.concat([T.reshape(rgb, (r, m, 3)),
                         T.reshape(probs, (r, m, self.decoder.k_parts))],
                        axis=2)
        out, acc = R.composite(vals, sig, delta)
        rgb_out = R.white_background(T.narrow(out, 1, 0, 3), acc)
        part_out = T.narrow(out, 1, 3, self.decoder.k_parts)
        return R.rendering_loss(rgb_out, pool.rgb[idx], part_probs=part_out,
                                acc=acc, labels=pool.labels[idx])

    def train_step(self, rng):
        cfg = self.cfg
        i = self.step_idx % len(self.objects)
        pool = self.pools[i]
        L0 = self.latents[i]
        z = self.z_codes[i]
        t = DIFF.draw_training_time(rng, cfg.t_min)
        lam = lambda_weight(t, cfg.t_min)
        eps = rng.standard_normal(L0.shape).astype(L0.dtype)
        Lt = DIFF.forward_sample(L0, t, eps)
        warm = self.step_idx < cfg.warmup_iters
        report = LossReport(step=self.step_idx, t=t, lambda_t=lam,
                            diff_loss=0.0, rend_loss=0.0, tv_loss=0.0,
                            kl_loss=self.kl_values[i], z_penalty=0.0)
        grads_b = None
        extra = None
        try:
            with T.Tape():
                L_pred, eps_pred = self.unet.denoise(Lt, t, z)
                diff = DIFF.diffusion_loss(L_pred, L0, eps_pred, eps)
            report.diff_loss = float(diff.data)
            if not warm:
                # decode stays outside both tapes so its backward is never hit
                v_hat_np = self.decode_latent(L_pred.data)
                with T.Tape():
                    v_hat = T.Tensor(v_hat_np, requires_grad=True)
                    refined = self.decoder.refine(v_hat, z)
                    n_rays = min(cfg.rays_per_step, pool.count)
                    idx = rng.choice(pool.count, size=n_rays, replace=False)
                    rend = self._render_rays(v_hat, refined, z, pool, idx,
                                             rng)
                    tv = F.tv_loss(v_hat, eps=1e-8)
                    zpen = DEC.part_code_penalty(z)
                    loss_b = T.add(T.add(T.scale(rend, lam),
                                         T.scale(tv, cfg.tv_weight)), zpen)
                    grads_b = T.backward(loss_b)
                report.rend_loss = float(rend.data)
                report.tv_loss = float(tv.data)
                report.z_penalty = float(zpen.data)
                g_vhat = grads_b.grad(v_hat)
                if g_vhat is not None:
                    extra = {L_pred: skip_gradient(
                        g_vhat, L0.shape[1:], latent_channels=L0.shape[0])}
            grads_a = T.backward(diff, extra_grads=extra)
        except T.NonFiniteError:
            report.aborted = True
            self.step_idx += 1
            return report
        report.grad_unet = self.opt_unet.step(grads_a)
        if grads_b is not None:
            report.grad_decoder = self.opt_decoder.step(grads_b)
        report.grad_z = self.opt_z.step(_MergedGrads([grads_a, grads_b]))
        self.step_idx += 1
        return report

    # ------------------------------------------------------------ inference

    def generate(self, rng, steps=50, z=None, init=None):
        """Sample one field: noise -> latent -> decoded [4,X,Y,Z] array."""
        if z is None:
            z = self.z_codes[rng.integers(len(self.z_codes))].data
        cfg = DIFF.DiffusionConfig(steps=steps, t_min=self.cfg.t_min)
        latent = DIFF.run_sampler(self.unet.predictor(), z, cfg, rng,
                                  init=init, shape=self.latents[0].shape)
        return self.decode_latent(latent), z

    def reconstruction(self, i):
        """Ground-truth round trip: stored latent -> decoded field array."""
        return self.decode_latent(self.latents[i]), self.z_codes[i].data


def render_decoded(field_arr, decoder, z, camera, m=48, chunk=4096):
    """Full-frame render of a decoded field: (rgb [H,W,3], labels [H,W]).

    Labels are part argmaxes, 255 where the background slot wins.
    """
    v_hat = T.Tensor(np.asarray(field_arr, dtype=np.float64))
    refined = decoder.refine(v_hat, z)
    rb = R.generate_rays(camera, R.all_pixels(camera))
    n = rb.origins.shape[0]
    k = decoder.k_parts
    rgb_out = np.empty((n, 3))
    label_out = np.empty(n, dtype=np.uint8)
    for s in range(0, n, chunk):
        idx = np.arange(s, min(s + chunk, n))
        rays = R.RayBatch(rb.origins[idx], rb.dirs[idx], rb.t_near[idx],
                          rb.t_far[idx], rb.valid[idx])
        _, delta, points = R.sample_batch(rays, m)
        pts = points.reshape(-1, 3)
        dirs = np.repeat(rays.dirs, m, axis=0)
        d_log = T.trilinear_sample(T.narrow(v_hat, 0, 0, 1),
                                   F.world_to_grid(pts, v_hat.shape[1:]))
        sig = T.reshape(F.activate_density(d_log), (idx.size, m))
        rgb = decoder.point_color(refined, pts, dirs, z)
        probs = decoder.point_part_prob(refined, pts, z)
        vals = T.concat([T.reshape(rgb, (idx.size, m, 3)),
                         T.reshape(probs, (idx.size, m, k))], axis=2)
        out, acc = R.composite(vals, sig, delta)
        rgb_out[idx] = R.white_background(T.narrow(out, 1, 0, 3), acc).data
        dist = R.part_distribution(T.narrow(out, 1, 3, k), acc).data
        arg = np.argmax(dist, axis=1)
        label_out[idx] = np.where(arg == k, R.BACKGROUND_LABEL, arg)
    h, w = camera.height, camera.width
    return rgb_out.reshape(h, w, 3).clip(0.0, 1.0), label_out.reshape(h, w)


def part_accuracy(pred_labels, gt_labels):
    """Pixel accuracy, background pixels included."""
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise DataError("label maps must share a shape")
    return float(np.mean(pred_labels == gt_labels))


def write_loss_csv(path, reports):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LossReport.CSV_FIELDS)
        for rep in reports:
            writer.writerow(rep.row())


# ---------------------------------------------------------------------------
# shape operations


def slerp(eps_a, eps_b, s):
    """Great-circle interpolation of flattened noise tensors."""
    a = np.asarray(eps_a, dtype=np.float64)
    b = np.asarray(eps_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError("slerp endpoints must share a shape")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DataError("slerp endpoints must be nonzero")
    if s == 0.0:
        return a.copy()
    if s == 1.0:
        return b.copy()
    cos = float(np.clip(np.dot(a.reshape(-1), b.reshape(-1)) / (na * nb),
                        -1.0, 1.0))
    omega = float(np.arccos(cos))
    if abs(np.pi - omega) < 1e-9:
        raise DataError("undefined slerp")
    if omega < 1e-9:
        return (1.0 - s) * a + s * b
    sin_om = np.sin(omega)
    return (np.sin((1.0 - s) * omega) / sin_om) * a \
        + (np.sin(s * omega) / sin_om) * b


def interpolate(eps_a, eps_b, s, predict, z, config, rng):
    """Sample from slerped starting noise under a shared schedule."""
    return DIFF.run_sampler(predict, z, config, rng,
                            init=slerp(eps_a, eps_b, s))


def mix(field_a, field_b, assignment, decoder, z, tau=1.0):
    """Compose two decoded fields part-by-part.

    assignment maps every part index 0..K-1 to "a" or "b".  A voxel belongs
    to a source when that source's part argmax at the voxel center is
    assigned to it and its activated density clears tau; double claims keep
    the denser source, orphans go empty.
    """
    a = np.asarray(field_a, dtype=np.float64)
    b = np.asarray(field_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError("mixed fields must share extents")
    k = decoder.k_parts
    if sorted(assignment) != list(range(k)):
        raise DataError("assignment must cover all parts")
    if any(v not in ("a", "b") for v in assignment.values()):
        raise DataError("assignment values must be 'a' or 'b'")
    centers = F.voxel_center_array(a.shape[1:])
    claims, sigma = {}, {}
    for name, arr in (("a", a), ("b", b)):
        refined = decoder.refine(arr, z)
        arg = np.argmax(decoder.point_part_prob(refined, centers, z).data,
                        axis=1)
        assigned = np.array([assignment[p] == name for p in range(k)])
        sig = np.logaddexp(0.0, arr[0] + F.DENSITY_SHIFT).reshape(-1)
        claims[name] = assigned[arg] & (sig > tau)
        sigma[name] = sig
    take_a = claims["a"] & (~claims["b"] | (sigma["a"] >= sigma["b"]))
    take_b = claims["b"] & ~take_a
    flat_a = a.reshape(4, -1)
    flat_b = b.reshape(4, -1)
    out = np.zeros_like(flat_a)
    out[0] = EMPTY_DENSITY
    out[:, take_a] = flat_a[:, take_a]
    out[:, take_b] = flat_b[:, take_b]
    return out.reshape(a.shape)
