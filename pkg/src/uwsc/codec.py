"""Hyperprior autoencoder codec for image-shaped signals.

One architecture, instantiated twice with separate weights: once for
sparse coefficient planes, once for residues. The analysis transform
takes the signal down to a latent at 1/16 spatial size; a hyper pair
compresses the latent's own statistics to 1/64 and predicts the
(mu, sigma) of the Gaussian model used to entropy-code the latent.
Compression is closed-loop: the encoder reconstructs through the same
quantize -> decode path the decoder runs, so both sides agree
bit-exactly.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .entropy import (FactorizedModel, SIGMA_FLOOR, SIGMA_RAW_INIT,
                      decode_symbols, encode_symbols,
                      estimate_rate_factorized, estimate_rate_gaussian,
                      factorized_tables, gaussian_tables, quantize)
from .errors import DataError, ShapeError
from .nn import Conv2d, ConvTranspose2d, Module, PReLU, Sequential


@dataclass(frozen=True)
class CodecConfig:
    width: int = 64           # N, internal channels
    latent_channels: int = 96  # M
    hyper_channels: int = 64

    def __post_init__(self):
        if min(self.width, self.latent_channels, self.hyper_channels) < 1:
            raise DataError("codec channel counts must be positive")


class _ResidualUnit(Module):
    def __init__(self, ch, rng):
        self.conv1 = Conv2d(ch, ch, 3, rng=rng)
        self.act = PReLU(ch)
        self.conv2 = Conv2d(ch, ch, 3, rng=rng)

    def __call__(self, x):
        return ad.add(x, self.conv2(self.act(self.conv1(x))))


class ResidualBlock(Module):
    """Four conv k3s1 -> PReLU -> conv k3s1 units with identity skips,
    connected in series; shape preserving."""

    def __init__(self, ch, rng):
        self.units = [_ResidualUnit(ch, rng) for _ in range(4)]

    def __call__(self, x):
        for u in self.units:
            x = u(x)
        return x


class _DownStage(Module):
    def __init__(self, cin, cout, rng):
        self.conv = Conv2d(cin, cout, 3, stride=2, rng=rng)
        self.act = PReLU(cout)

    def __call__(self, x):
        return self.act(self.conv(x))


class _UpStage(Module):
    def __init__(self, cin, cout, rng, activation=True):
        self.tconv = ConvTranspose2d(cin, cout, 3, stride=2, rng=rng)
        self.act = PReLU(cout) if activation else None

    def __call__(self, x):
        x = self.tconv(x)
        return self.act(x) if self.act is not None else x


class CodecModel(Module):
    """Analysis/synthesis pair plus hyper pair and factorized model.

    role is a free tag ("sparse" or "residue") recorded in checkpoints
    so a stream cannot silently decode against the wrong instance.
    """

    def __init__(self, config=CodecConfig(), role="sparse", seed=0):
        rng = np.random.default_rng(seed)
        n, m, hc = config.width, config.latent_channels, config.hyper_channels
        self.config = config
        self.role = role

        self.analysis = Sequential(
            _DownStage(3, n, rng),
            _DownStage(n, n, rng), ResidualBlock(n, rng),
            _DownStage(n, n, rng), ResidualBlock(n, rng),
            _DownStage(n, n, rng), ResidualBlock(n, rng),
            Conv2d(n, m, 3, rng=rng),
        )
        self.synthesis = Sequential(
            Conv2d(m, n, 3, rng=rng),
            ResidualBlock(n, rng), _UpStage(n, n, rng),
            ResidualBlock(n, rng), _UpStage(n, n, rng),
            ResidualBlock(n, rng), _UpStage(n, n, rng),
            _UpStage(n, 3, rng, activation=False),
        )
        self.hyper_analysis = Sequential(
            _DownStage(m, hc, rng),
            _DownStage(hc, hc, rng),
        )
        self.hyper_synthesis_core = Sequential(
            _UpStage(hc, hc, rng),
            _UpStage(hc, hc, rng),
            Conv2d(hc, 2 * m, 1, rng=rng),
        )
        # start the predicted sigma wide for the same reason the
        # factorized model does (see SIGMA_RAW_INIT)
        head = self.hyper_synthesis_core.mods[-1]
        head.bias.data[m:] = SIGMA_RAW_INIT
        self.factorized = FactorizedModel(hc)

    def analysis_forward(self, x):
        if x.data.ndim != 4 or x.data.shape[1] != 3:
            raise ShapeError("analysis wants (B,3,H,W), got %r" % (x.shape,))
        return self.analysis(x)

    def synthesis_forward(self, y_hat):
        return self.synthesis(y_hat)

    def hyper_analysis_forward(self, y):
        return self.hyper_analysis(y)

    def hyper_synthesis_forward(self, z_hat):
        """Decoded hyper latent -> (mu, sigma), each with M channels;
        sigma is softplus-mapped and floored."""
        m = self.config.latent_channels
        out = self.hyper_synthesis_core(z_hat)
        mu = ad.slice_channels(out, 0, m)
        sigma = ad.clamp_min(ad.softplus(ad.slice_channels(out, m, 2 * m)),
                             SIGMA_FLOOR)
        return mu, sigma


@dataclass
class CompressResult:
    y_stream: bytes
    z_stream: bytes
    x_hat: np.ndarray        # (B,3,H,W) float32, decoder-identical
    est_bits_y: float
    est_bits_z: float
    n_symbols_y: int
    n_symbols_z: int

    @property
    def actual_bits(self):
        return 8 * (len(self.y_stream) + len(self.z_stream))

    @property
    def est_bits(self):
        return self.est_bits_y + self.est_bits_z


def compress(x, model):
    """Code one (B,3,H,W) float array; H, W divisible by 64.

    Runs the full closed loop and returns streams, the decoder-exact
    reconstruction, and rate bookkeeping.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4 or x.shape[2] % 64 or x.shape[3] % 64:
        raise ShapeError("compress wants (B,3,64a,64b), got %r" % (x.shape,))

    y = model.analysis_forward(Tensor(x)).data
    z = model.hyper_analysis_forward(Tensor(y)).data

    z_syms = quantize(z, "round")
    z_tables = factorized_tables(model.factorized, z.shape)
    z_stream = encode_symbols([int(v) for v in z_syms.reshape(-1)], z_tables)
    z_hat = z_syms.astype(np.float32)

    mu_t, sigma_t = model.hyper_synthesis_forward(Tensor(z_hat))
    mu, sigma = mu_t.data, sigma_t.data

    y_syms = quantize(y, "round")
    y_stream = encode_symbols([int(v) for v in y_syms.reshape(-1)],
                              gaussian_tables(mu, sigma))
    y_hat = y_syms.astype(np.float32)

    x_hat = model.synthesis_forward(Tensor(y_hat)).data

    est_y = estimate_rate_gaussian(y_hat, mu, sigma).item()
    est_z = estimate_rate_factorized(z_hat, model.factorized).item()
    return CompressResult(y_stream, z_stream, x_hat, est_y, est_z,
                          int(y_syms.size), int(z_syms.size))


def decompress(y_stream, z_stream, model, padded_hw, batch=1):
    """Decode streams produced by compress with the same model.

    padded_hw is the (H, W) of the padded input; latent shapes follow
    from the /16 and /64 contracts.
    """
    h, w = padded_hw
    if h % 64 or w % 64:
        raise ShapeError("padded dims must divide 64, got %dx%d" % (h, w))
    m = model.config.latent_channels
    hc = model.config.hyper_channels
    z_shape = (batch, hc, h // 64, w // 64)
    y_shape = (batch, m, h // 16, w // 16)

    z_tables = factorized_tables(model.factorized, z_shape)
    z_syms = decode_symbols(z_stream, z_tables, int(np.prod(z_shape)))
    z_hat = np.asarray(z_syms, dtype=np.float32).reshape(z_shape)

    mu_t, sigma_t = model.hyper_synthesis_forward(Tensor(z_hat))

    y_tables = gaussian_tables(mu_t.data, sigma_t.data)
    y_syms = decode_symbols(y_stream, y_tables, int(np.prod(y_shape)))
    y_hat = np.asarray(y_syms, dtype=np.float32).reshape(y_shape)

    return model.synthesis_forward(Tensor(y_hat)).data
