"""End-to-end training of both codecs and all three filters.

One forward pass runs the full layered pipeline with additive-noise
quantization surrogates, accumulates rate estimates for all four
streams, and scores the outputs with a four-part distortion; one
backward pass reaches every parameter. Dictionaries are not trained
here; they come from their own alternating-minimization routines.
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .entropy import (estimate_rate_factorized, estimate_rate_gaussian,
                      quantize)
from .errors import DataError, DimensionError, NumericError, ShapeError
from .imaging import (LUMA_WEIGHTS, ImagePlanes, RgbImage, pad_to_multiple,
                      to_planes)
from .pipeline import LAMBDA_VALUES, ModelBundle
from .sparse import encode_image

EDGE_EPS = 1e-6
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

MU_WEIGHTS = (0.4, 0.4, 0.1, 0.1)


@dataclass(frozen=True)
class TrainConfig:
    lam: int = 64
    mu: tuple = MU_WEIGHTS
    patch: int = 192
    batch: int = 16
    lr: float = 1e-4
    k_range: tuple = (96, 160)
    seed: int = 0
    epochs: int = 1

    def __post_init__(self):
        if self.lam not in LAMBDA_VALUES:
            raise DataError("lambda %r not one of %r" % (self.lam, LAMBDA_VALUES))
        if len(self.mu) != 4 or abs(sum(self.mu) - 1.0) > 1e-9:
            raise DataError("mu must be four weights summing to 1")
        if self.patch % 64:
            raise DataError("patch size must divide 64, got %d" % self.patch)
        k0, k1 = self.k_range
        if not (1 <= k0 <= k1 <= 256):
            raise DataError("k_range %r must lie within [1, 256]" % (self.k_range,))
        if self.batch < 1 or self.lr <= 0 or self.epochs < 0:
            raise DataError("batch, lr, epochs must be positive")

    @classmethod
    def desk(cls, lam=64, **kw):
        """Small-footprint settings for CPU-scale runs."""
        kw.setdefault("patch", 64)
        kw.setdefault("batch", 4)
        return cls(lam=lam, **kw)


# ---------------------------------------------------------------------------
# Fixed-weight building blocks: luminance, Sobel boundary, Gaussian
# window. All valid (unpadded) convolutions so flat regions map to
# exactly zero response.

def _luma_weight():
    return np.array(LUMA_WEIGHTS, dtype=np.float32).reshape(1, 3, 1, 1)


def _sobel_weight():
    gx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float32)
    return np.stack([gx, gx.T]).reshape(2, 1, 3, 3)


def _gauss_window():
    half = SSIM_WINDOW // 2
    r = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(r ** 2) / (2.0 * SSIM_SIGMA ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    return w.astype(np.float32).reshape(1, 1, SSIM_WINDOW, SSIM_WINDOW)


def _luminance_t(x):
    if x.data.ndim != 4 or x.data.shape[1] != 3:
        raise ShapeError("want (B,3,H,W), got %r" % (x.shape,))
    return ad.conv2d(x, Tensor(_luma_weight()))


def boundary_extract(x):
    """Differentiable Sobel gradient magnitude of the luminance plane.

    (B,3,H,W) -> (B,1,H-2,W-2). The magnitude is smoothed near zero,
    sqrt(gx^2 + gy^2 + eps^2) - eps, so a constant image maps to an
    exactly-zero response with a finite gradient everywhere.
    """
    lum = _luminance_t(x)
    grad = ad.conv2d(lum, Tensor(_sobel_weight()))
    sq = ad.square(grad)
    ssum = ad.conv2d(sq, Tensor(np.ones((1, 2, 1, 1), dtype=np.float32)))
    return ad.add_const(ad.sqrt(ad.add_const(ssum, EDGE_EPS ** 2)), -EDGE_EPS)


def mse_t(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError("shape mismatch %r vs %r" % (a.shape, b.shape))
    return ad.mean_all(ad.square(ad.sub(a, b)))


def ssim_t(a, b):
    """Differentiable mean SSIM over luminance, Gaussian 11x11 window,
    valid windows only, dynamic range 1."""
    la, lb = _luminance_t(a), _luminance_t(b)
    if la.data.shape[2] < SSIM_WINDOW or la.data.shape[3] < SSIM_WINDOW:
        raise ShapeError("image smaller than the SSIM window")
    w = Tensor(_gauss_window())
    mu_a = ad.conv2d(la, w)
    mu_b = ad.conv2d(lb, w)
    var_a = ad.sub(ad.conv2d(ad.square(la), w), ad.square(mu_a))
    var_b = ad.sub(ad.conv2d(ad.square(lb), w), ad.square(mu_b))
    cov = ad.sub(ad.conv2d(ad.mul(la, lb), w), ad.mul(mu_a, mu_b))
    num = ad.mul(ad.add_const(ad.mul_const(ad.mul(mu_a, mu_b), 2.0), SSIM_C1),
                 ad.add_const(ad.mul_const(cov, 2.0), SSIM_C2))
    den = ad.mul(ad.add_const(ad.add(ad.square(mu_a), ad.square(mu_b)), SSIM_C1),
                 ad.add_const(ad.add(var_a, var_b), SSIM_C2))
    return ad.mean_all(ad.div(num, den))


# ---------------------------------------------------------------------------
# Loss.

@dataclass
class LossBreakdown:
    r_total: float
    d1: float
    d2: float
    d3: float
    d4: float
    total: float

    def __post_init__(self):
        vals = (self.r_total, self.d1, self.d2, self.d3, self.d4, self.total)
        if not all(np.isfinite(v) for v in vals):
            raise NumericError("loss diverged: %r" % (vals,))
        if min(vals) < 0:
            raise NumericError("negative loss component: %r" % (vals,))

    def recompute(self, lam, mu=MU_WEIGHTS):
        return self.r_total + lam * (mu[0] * self.d1 + mu[1] * self.d2
                                     + mu[2] * self.d3 + mu[3] * self.d4)


def compute_loss(g, o_el, o_bl, rate_bits, pixels, config):
    """Rate-distortion objective over one batch.

    rate_bits is the four scalar rate tensors (coefficient y/z, residue
    y/z); pixels is the batch pixel count the rate normalizes over.
    Returns (total Tensor, LossBreakdown of its float values).
    """
    if g.data.shape != o_el.data.shape or g.data.shape != o_bl.data.shape:
        raise ShapeError("image tensors disagree: %r %r %r"
                         % (g.shape, o_el.shape, o_bl.shape))
    bits = rate_bits[0]
    for extra in rate_bits[1:]:
        bits = ad.add(bits, extra)
    r_total = ad.mul_const(bits, 1.0 / float(pixels))

    d1 = mse_t(g, o_el)
    d2 = ad.clamp_min(
        ad.add_const(ad.neg(ad.clamp_min(ssim_t(g, o_el), 0.0)), 1.0), 0.0)
    d3 = mse_t(boundary_extract(g), boundary_extract(o_el))
    d4 = mse_t(g, o_bl)

    mu = config.mu
    dist = ad.add(ad.add(ad.mul_const(d1, mu[0]), ad.mul_const(d2, mu[1])),
                  ad.add(ad.mul_const(d3, mu[2]), ad.mul_const(d4, mu[3])))
    total = ad.add(r_total, ad.mul_const(dist, float(config.lam)))
    # the reported total is recombined from the reported components so
    # the decomposition identity holds exactly; the graph total above
    # (equal up to float32 rounding) is what drives the gradients
    vals = dict(r_total=r_total.item(), d1=d1.item(), d2=d2.item(),
                d3=d3.item(), d4=d4.item())
    total_value = vals["r_total"] + config.lam * (
        mu[0] * vals["d1"] + mu[1] * vals["d2"]
        + mu[2] * vals["d3"] + mu[3] * vals["d4"])
    return total, LossBreakdown(total=total_value, **vals)


# ---------------------------------------------------------------------------
# Optimizer.

class Adam:
    """Adaptive moment estimation, standard coefficients, float64 state."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.data.shape) for p in self.params]
        self.v = [np.zeros(p.data.shape) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            update = (self.lr * (self.m[i] / bias1)
                      / (np.sqrt(self.v[i] / bias2) + self.eps))
            p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def bundle_optimizer(bundle, lr):
    params = []
    for mod in bundle.modules().values():
        params.extend(mod.parameters())
    return Adam(params, lr=lr)


# ---------------------------------------------------------------------------
# Training step and loop.

def train_step(x, g, planes, bundle, opt, config, rng):
    """One optimizer update on a prepared batch.

    x, g, planes are (B,3,H,W) float arrays: padded input patches,
    enhanced targets, and the precomputed sparse coefficient planes
    of x (the gradient stops at the planes; sparse coding is not
    differentiated through). Returns the pre-step LossBreakdown.
    """
    cs, cr = bundle.codec_sparse, bundle.codec_residue

    pt = Tensor(np.asarray(planes, dtype=np.float32))
    y = cs.analysis_forward(pt)
    z = cs.hyper_analysis_forward(y)
    z_t = quantize(z, "noise", rng)
    mu, sigma = cs.hyper_synthesis_forward(z_t)
    y_t = quantize(y, "noise", rng)
    bits_sy = estimate_rate_gaussian(y_t, mu, sigma)
    bits_sz = estimate_rate_factorized(z_t, cs.factorized)

    planes_hat = cs.synthesis_forward(y_t)
    recon = ad.dict_reconstruct(planes_hat, bundle.d2.data)
    o_bl = bundle.filter_bl(recon)

    xt = Tensor(np.asarray(x, dtype=np.float32))
    pseudo = bundle.filter_pseudo(xt)
    res01 = ad.mul_const(ad.add_const(ad.sub(pseudo, o_bl), 1.0), 0.5)
    yr = cr.analysis_forward(res01)
    zr = cr.hyper_analysis_forward(yr)
    zr_t = quantize(zr, "noise", rng)
    mur, sigr = cr.hyper_synthesis_forward(zr_t)
    yr_t = quantize(yr, "noise", rng)
    bits_ry = estimate_rate_gaussian(yr_t, mur, sigr)
    bits_rz = estimate_rate_factorized(zr_t, cr.factorized)

    res_hat = ad.add_const(ad.mul_const(cr.synthesis_forward(yr_t), 2.0), -1.0)
    o_el = bundle.filter_el(ad.add(o_bl, res_hat))

    gt = Tensor(np.asarray(g, dtype=np.float32))
    b, _, h, w = xt.data.shape
    total, breakdown = compute_loss(gt, o_el, o_bl,
                                    (bits_sy, bits_sz, bits_ry, bits_rz),
                                    b * h * w, config)
    opt.zero_grad()
    for mod in bundle.modules().values():
        mod.zero_grad()
    ad.backward(total)
    opt.step()
    return breakdown


def _prepare_pairs(pairs, patch):
    """RgbImage pairs -> float64 plane arrays on the codec grid.

    Images larger than the configured patch are cropped (top-left) so
    the per-(image, K) coefficient cache stays valid across steps;
    smaller ones are edge-padded up to a multiple of 64.
    """
    xs, gs = [], []
    for raw, target in pairs:
        if raw.data.shape != target.data.shape:
            raise DimensionError("pair shapes differ: %r vs %r"
                                 % (raw.data.shape, target.data.shape))
        h = min(raw.height, patch)
        w = min(raw.width, patch)
        raw = RgbImage(np.ascontiguousarray(raw.data[:h, :w]))
        target = RgbImage(np.ascontiguousarray(target.data[:h, :w]))
        px, _ = pad_to_multiple(raw, 64)
        pg, _ = pad_to_multiple(target, 64)
        xs.append(to_planes(px).data)
        gs.append(to_planes(pg).data)
    return xs, gs


def train_models(pairs, bundle, config, log_path=None):
    """Run config.epochs over (input, target) image pairs.

    Deterministic under a fixed config.seed: data order, per-batch K,
    and quantization noise all derive from it. Coefficient planes are
    cached per (image, K) since sparse coding dominates step cost.
    Returns the list of per-step LossBreakdowns; optionally appends
    each step to a CSV log.
    """
    xs, gs = _prepare_pairs(pairs, config.patch)
    n = len(xs)
    if n == 0:
        raise DataError("no training pairs")
    rng_data = np.random.default_rng(config.seed + 1)
    rng_k = np.random.default_rng(config.seed + 2)
    rng_noise = np.random.default_rng(config.seed + 3)
    opt = bundle_optimizer(bundle, config.lr)
    plane_cache = {}
    history = []

    log_file = None
    writer = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["step", "r_total", "d1", "d2", "d3", "d4", "total"])

    try:
        step = 0
        for _ in range(config.epochs):
            order = rng_data.permutation(n)
            for lo in range(0, n, config.batch):
                idx = order[lo:lo + config.batch]
                k = int(rng_k.integers(config.k_range[0],
                                       config.k_range[1] + 1))
                planes = []
                for i in idx:
                    key = (int(i), k)
                    if key not in plane_cache:
                        coeff = encode_image(ImagePlanes(xs[i]), bundle.d1, k)
                        plane_cache[key] = coeff.data.astype(np.float32)
                    planes.append(plane_cache[key])
                x = np.stack([xs[i] for i in idx]).astype(np.float32)
                g = np.stack([gs[i] for i in idx]).astype(np.float32)
                breakdown = train_step(x, g, np.stack(planes), bundle, opt,
                                       config, rng_noise)
                history.append(breakdown)
                step += 1
                if writer is not None:
                    writer.writerow([step, breakdown.r_total, breakdown.d1,
                                     breakdown.d2, breakdown.d3, breakdown.d4,
                                     breakdown.total])
                    log_file.flush()
    finally:
        if log_file is not None:
            log_file.close()
    return history


# ---------------------------------------------------------------------------
# Checkpointing (directory of dictionaries, weights, and config).

def checkpoint_save(path, bundle):
    bundle.save(path)


def checkpoint_load(path):
    return ModelBundle.load(path)
