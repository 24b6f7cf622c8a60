"""Entropy modeling and range coding for quantized latents.

Three pieces live here. Differentiable rate estimates: interval masses
of a Gaussian evaluated at integer symbols, summed as -log2 to give a
bit count that training can push on. Quantized CDF tables: the same
masses rounded to 16-bit counts, strictly monotone, with an escape
slot whose payload is the raw 32-bit value. A byte-oriented carry-less
range coder that consumes those tables; encoder and decoder update
(low, range) identically, which is what makes the streams mirror each
other exactly.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, StreamError
from .nn import Module

SIGMA_FLOOR = 0.11
# Pre-softplus value giving sigma ~= 8. Entropy models start wide: an
# untrained network's latents then sit well inside the coded support,
# which keeps early rate gradients informative and keeps actual coded
# bits at or above the differentiable estimate (tables under-charge
# only for symbols far outside the predicted spread).
SIGMA_RAW_INIT = 8.0
# sigma is additionally capped when building tables so the support
# (64 sigma wide) keeps a bounded symbol count
SIGMA_TABLE_CAP = 256.0
TABLE_SPAN_SIGMA = 12.0
TOTAL_BITS = 16
TOTAL = 1 << TOTAL_BITS
# smallest representable interval mass in the rate estimate; keeps the
# log finite while staying far below any codable probability
MASS_FLOOR = 2.0 ** -100
LOG2E = 1.0 / np.log(2.0)


# ---------------------------------------------------------------------------
# Quantization.

def quantize(x, mode, rng=None):
    """Quantize a latent for coding or for training.

    mode "round": half-even rounding; accepts an ndarray, returns
    int64 symbols. mode "noise": adds uniform [-0.5, 0.5) noise drawn
    from rng; accepts a Tensor and keeps gradients (the noise is a
    constant offset).
    """
    if mode == "round":
        if isinstance(x, Tensor):
            x = x.data
        return np.rint(np.asarray(x, dtype=np.float64)).astype(np.int64)
    if mode == "noise":
        if rng is None:
            raise DataError("noise quantization needs an rng")
        if not isinstance(x, Tensor):
            x = Tensor(x)
        noise = rng.uniform(-0.5, 0.5, size=x.data.shape)
        return ad.add(x, Tensor(noise.astype(x.data.dtype)))
    raise DataError("unknown quantize mode %r" % (mode,))


# ---------------------------------------------------------------------------
# Differentiable rate estimates.

def estimate_rate_gaussian(y, mu, sigma):
    """Total bits to code y under N(mu, sigma) with unit-width bins.

    All three arguments are Tensors (or arrays, which are wrapped) of
    one shape. The mass of symbol y is Phi((y-mu+0.5)/s) -
    Phi((y-mu-0.5)/s), evaluated on the lower tail via |y-mu| so huge
    offsets lose to rounding gracefully instead of cancelling to zero.
    sigma is floored at SIGMA_FLOOR. Returns a scalar Tensor.
    """
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float64))
    mu = mu if isinstance(mu, Tensor) else Tensor(np.asarray(mu, dtype=np.float64))
    sigma = sigma if isinstance(sigma, Tensor) else Tensor(np.asarray(sigma, dtype=np.float64))
    sig = ad.clamp_min(sigma, SIGMA_FLOOR)
    d = ad.abs_(ad.sub(y, mu))
    upper = ad.normal_cdf(ad.div(ad.add_const(ad.neg(d), 0.5), sig))
    lower = ad.normal_cdf(ad.div(ad.add_const(ad.neg(d), -0.5), sig))
    mass = ad.clamp_min(ad.sub(upper, lower), MASS_FLOOR)
    return ad.mul_const(ad.neg(ad.sum_all(ad.log(mass))), LOG2E)


class FactorizedModel(Module):
    """Context-free per-channel entropy model for the hyper latent.

    Each channel carries a learnable mean and a learnable pre-softplus
    scale; the effective sigma is softplus(raw) floored at SIGMA_FLOOR.
    """

    def __init__(self, channels):
        self.mu = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.sigma_raw = Tensor(np.full(channels, SIGMA_RAW_INIT,
                                        dtype=np.float32),
                                requires_grad=True)

    @property
    def channels(self):
        return self.mu.data.shape[0]

    def sigma_values(self):
        return np.maximum(np.logaddexp(0.0, self.sigma_raw.data.astype(np.float64)),
                          SIGMA_FLOOR)

    def mu_values(self):
        return self.mu.data.astype(np.float64)


def estimate_rate_factorized(z, model):
    """Bits for an NCHW latent under a FactorizedModel; scalar Tensor."""
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
    mu = ad.broadcast_channel(model.mu, z.data.shape)
    sigma = ad.broadcast_channel(ad.softplus(model.sigma_raw), z.data.shape)
    return estimate_rate_gaussian(z, mu, sigma)


# ---------------------------------------------------------------------------
# Quantized CDF tables.

class CdfTable:
    """Strictly monotone 16-bit cumulative table over an integer range.

    Symbols offset .. offset+n-1 map to slots 0 .. n-1; slot n is the
    escape. cdf has n+2 entries with cdf[0] = 0 and cdf[-1] = 2^16;
    every slot holds at least one count.
    """

    __slots__ = ("offset", "cdf", "n", "_lut", "_base")

    def __init__(self, offset, cdf):
        self.offset = int(offset)
        self.cdf = [int(v) for v in cdf]
        self.n = len(self.cdf) - 2
        if self.cdf[0] != 0 or self.cdf[-1] != TOTAL:
            raise DataError("cdf must span [0, %d]" % TOTAL)
        for a, b in zip(self.cdf, self.cdf[1:]):
            if b <= a:
                raise DataError("cdf must be strictly monotone")
        self._lut = None
        self._base = None

    def shifted(self, delta):
        """Same distribution translated by delta symbols; shares the
        cdf and the decode lookup with this table."""
        t = CdfTable.__new__(CdfTable)
        t.offset = self.offset + delta
        t.cdf = self.cdf
        t.n = self.n
        t._lut = None
        t._base = self
        return t

    def lut(self):
        """target -> slot lookup array, built on first decode use."""
        if self._base is not None:
            return self._base.lut()
        if self._lut is None:
            counts = np.diff(np.asarray(self.cdf, dtype=np.int64))
            self._lut = np.repeat(np.arange(self.n + 1, dtype=np.int32), counts)
        return self._lut


def _quantize_counts(pmf):
    """Round a pmf to integer counts summing to TOTAL, all >= 1.

    Rounding surplus is repaid by the largest counts so the distortion
    lands where it is relatively cheapest; deficits go to the largest
    count. Deterministic.
    """
    n = pmf.shape[0]
    if n > TOTAL:
        raise DataError("%d symbols cannot get nonzero 16-bit counts" % n)
    p = pmf / pmf.sum()
    counts = np.maximum(1, np.rint(p * TOTAL).astype(np.int64))
    excess = int(counts.sum()) - TOTAL
    while excess > 0:
        j = int(np.argmax(counts))
        take = min(excess, int(counts[j]) - 1)
        if take == 0:
            raise DataError("cannot normalize pmf to %d counts" % TOTAL)
        counts[j] -= take
        excess -= take
    if excess < 0:
        counts[int(np.argmax(counts))] += -excess
    return counts


def _table_from_pmf(offset, pmf, tail_mass):
    counts = _quantize_counts(np.append(pmf, max(tail_mass, 1e-12)))
    cdf = np.concatenate([[0], np.cumsum(counts)])
    return CdfTable(offset, cdf)


_gauss_cache = {}


def build_gaussian_table(mu, sigma):
    """CDF table for one N(mu, sigma) unit-bin symbol distribution.

    The support is [mu - SPAN sigma, mu + SPAN sigma] rounded to
    integers; everything outside escapes. The span balances two costs:
    wider support wastes one minimum count per dead tail slot, tighter
    support sends more symbols through the 32-bit escape. Tables are
    cached keyed by mu rounded to 1/64 and log sigma rounded to 1/32,
    which costs well under 0.1% of the estimated rate but makes table
    construction O(1) amortized over a latent tensor.
    """
    mu = float(mu)
    sigma = float(min(max(sigma, SIGMA_FLOOR), SIGMA_TABLE_CAP))
    center = int(np.rint(mu))
    frac_key = int(np.rint((mu - center) * 64.0))
    sig_key = int(np.rint(np.log(sigma) * 32.0))
    key = (frac_key, sig_key)
    base = _gauss_cache.get(key)
    if base is None:
        if len(_gauss_cache) >= 4096:
            _gauss_cache.clear()
        frac = frac_key / 64.0
        sig = float(np.exp(sig_key / 32.0))
        lo = int(np.rint(frac - TABLE_SPAN_SIGMA * sig))
        hi = int(np.rint(frac + TABLE_SPAN_SIGMA * sig))
        grid = np.arange(lo, hi + 1, dtype=np.float64)
        upper = ndtr((grid + 0.5 - frac) / sig)
        lower = ndtr((grid - 0.5 - frac) / sig)
        pmf = np.maximum(upper - lower, 0.0)
        base = _table_from_pmf(lo, pmf, max(1.0 - pmf.sum(), 0.0))
        _gauss_cache[key] = base
    return base if center == 0 else base.shifted(center)


def gaussian_tables(mu, sigma):
    """Per-symbol tables for flattened mu/sigma arrays (same order)."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    return [build_gaussian_table(m, s) for m, s in zip(mu, sigma)]


def factorized_tables(model, shape):
    """Tables for an NCHW latent coded with a FactorizedModel, one per
    symbol in flattened order (channels vary by position)."""
    b, c, h, w = shape
    mu = model.mu_values()
    sigma = model.sigma_values()
    per_channel = [build_gaussian_table(mu[i], sigma[i]) for i in range(c)]
    out = []
    for _ in range(b):
        for i in range(c):
            out.extend([per_channel[i]] * (h * w))
    return out


# ---------------------------------------------------------------------------
# Carry-less range coder (32-bit state, byte renormalization). The
# encoder emits a byte whenever the top byte of the interval settles;
# when the interval straddles a byte boundary but has shrunk below
# 2^16, its upper part is clamped off so the byte settles anyway.

MASK32 = 0xFFFFFFFF
RC_TOP = 1 << 24
RC_BOTTOM = 1 << 16


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.out = bytearray()

    def encode(self, cum, freq):
        low, rng = self.low, self.range
        r = rng >> TOTAL_BITS
        low = (low + r * cum) & MASK32
        rng = r * freq
        out = self.out
        while True:
            if (low ^ (low + rng)) < RC_TOP:
                pass
            elif rng < RC_BOTTOM:
                rng = (-low) & (RC_BOTTOM - 1)
            else:
                break
            out.append((low >> 24) & 0xFF)
            low = (low << 8) & MASK32
            rng = (rng << 8) & MASK32
        self.low, self.range = low, rng

    def finish(self):
        low = self.low
        for _ in range(4):
            self.out.append((low >> 24) & 0xFF)
            low = (low << 8) & MASK32
        return bytes(self.out)

    def state(self):
        return (self.low, self.range)


class RangeDecoder:
    def __init__(self, data):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = MASK32
        code = 0
        for _ in range(4):
            code = (code << 8) | self._byte()
        self.code = code

    def _byte(self):
        if self.pos >= len(self.data):
            raise StreamError("range coder ran past end of payload")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode_target(self):
        r = self.range >> TOTAL_BITS
        t = ((self.code - self.low) & MASK32) // r
        return t if t < TOTAL else TOTAL - 1

    def decode_update(self, cum, freq):
        low, rng, code = self.low, self.range, self.code
        r = rng >> TOTAL_BITS
        low = (low + r * cum) & MASK32
        rng = r * freq
        while True:
            if (low ^ (low + rng)) < RC_TOP:
                pass
            elif rng < RC_BOTTOM:
                rng = (-low) & (RC_BOTTOM - 1)
            else:
                break
            code = ((code << 8) & MASK32) | self._byte()
            low = (low << 8) & MASK32
            rng = (rng << 8) & MASK32
        self.low, self.range, self.code = low, rng, code

    def state(self):
        return (self.low, self.range)


# ---------------------------------------------------------------------------
# Symbol-level coding against CDF tables.

RAW_BIAS = 1 << 31


def encode_symbols(symbols, tables):
    """Range-encode integer symbols; tables is one CdfTable for all
    symbols or a sequence with one per symbol. Out-of-support symbols
    cost the escape slot plus 32 raw bits. Returns the payload bytes.
    """
    single = isinstance(tables, CdfTable)
    if not single and len(tables) != len(symbols):
        raise DataError("%d tables for %d symbols" % (len(tables), len(symbols)))
    enc = RangeEncoder()
    encode = enc.encode
    table = tables if single else None
    for i, s in enumerate(symbols):
        t = table if single else tables[i]
        cdf = t.cdf
        idx = s - t.offset
        if 0 <= idx < t.n:
            encode(cdf[idx], cdf[idx + 1] - cdf[idx])
        else:
            v = int(s) + RAW_BIAS
            if not 0 <= v <= MASK32:
                raise DataError("symbol %d outside raw 32-bit escape range" % s)
            n = t.n
            encode(cdf[n], cdf[n + 1] - cdf[n])
            encode(v >> 16, 1)
            encode(v & 0xFFFF, 1)
    return enc.finish()


def decode_symbols(payload, tables, count):
    """Inverse of encode_symbols; needs the symbol count up front."""
    single = isinstance(tables, CdfTable)
    if not single and len(tables) != count:
        raise DataError("%d tables for %d symbols" % (len(tables), count))
    dec = RangeDecoder(payload)
    decode_target = dec.decode_target
    decode_update = dec.decode_update
    out = []
    append = out.append
    table = tables if single else None
    for i in range(count):
        t = table if single else tables[i]
        cdf = t.cdf
        target = decode_target()
        k = int(t.lut()[target])
        decode_update(cdf[k], cdf[k + 1] - cdf[k])
        if k < t.n:
            append(t.offset + k)
        else:
            hi = decode_target()
            decode_update(hi, 1)
            lo = decode_target()
            decode_update(lo, 1)
            append(((hi << 16) | lo) - RAW_BIAS)
    return out


def encode_gaussian(values, mu, sigma):
    """Convenience: quantized values (int array) against elementwise
    Gaussian parameters; returns payload bytes."""
    syms = [int(v) for v in np.asarray(values).reshape(-1)]
    return encode_symbols(syms, gaussian_tables(mu, sigma))


def decode_gaussian(payload, mu, sigma, shape):
    tables = gaussian_tables(mu, sigma)
    syms = decode_symbols(payload, tables, len(tables))
    return np.asarray(syms, dtype=np.int64).reshape(shape)


@dataclass
class RateReport:
    """Bit accounting for one encoded layer combination."""

    bits_y: float
    bits_z: float
    bits_total: float
    bpp: float

    def __post_init__(self):
        if self.bits_y < 0 or self.bits_z < 0:
            raise DataError("negative bit counts")
        if abs(self.bits_total - (self.bits_y + self.bits_z)) > 1e-6:
            raise DataError("bits_total must equal bits_y + bits_z")


def total_rate(bits_sy, bits_sz, bits_ry, bits_rz, pixels):
    """Aggregate per-stream bit counts into a RateReport.

    bits_sy/bits_sz come from the coefficient-plane codec, bits_ry/bits_rz
    from the residue codec; a base-layer-only report passes zeros for the
    residue pair.  bpp is measured against the original pixel count.
    """
    if pixels <= 0:
        raise DataError("pixel count must be positive")
    bits_y = float(bits_sy) + float(bits_ry)
    bits_z = float(bits_sz) + float(bits_rz)
    total = bits_y + bits_z
    return RateReport(bits_y=bits_y, bits_z=bits_z, bits_total=total,
                      bpp=total / float(pixels))
