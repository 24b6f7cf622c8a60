"""Dual-branch restoration filter.

A Detail Refinement Branch (encoder-decoder with attention at every
scale change and concatenated skips) runs in parallel with a Rough
Filtering Branch (attention-bracketed conv chain under a global
identity skip); their outputs are summed. The same architecture is
instantiated three times in the pipeline: after the base-layer
reconstruction, as the pseudo-enhancer, and after the enhancement
layer.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DataError, ShapeError
from .nn import Conv2d, ConvTranspose2d, Module, PReLU, Sequential


@dataclass(frozen=True)
class FilterConfig:
    width: int = 32
    io_channels: int = 3

    def __post_init__(self):
        if self.width < 1 or self.io_channels < 1:
            raise DataError("filter config values must be positive")


class MKCB(Module):
    """Multi-kernel block: parallel k3s1 and k1s1 convs summed, then
    conv k3s1 -> PReLU -> conv k1s1 in series. Shape preserving."""

    def __init__(self, ch, rng):
        self.par3 = Conv2d(ch, ch, 3, rng=rng)
        self.par1 = Conv2d(ch, ch, 1, rng=rng)
        self.mix3 = Conv2d(ch, ch, 3, rng=rng)
        self.act = PReLU(ch)
        self.mix1 = Conv2d(ch, ch, 1, rng=rng)

    def __call__(self, x):
        y = ad.add(self.par3(x), self.par1(x))
        return self.mix1(self.act(self.mix3(y)))


class Attention(Module):
    """Channel-softmax gate from two chained MKCBs, applied
    multiplicatively with an additive skip: x * w + x."""

    def __init__(self, ch, rng):
        self.mkcb1 = MKCB(ch, rng)
        self.mkcb2 = MKCB(ch, rng)

    def weight_map(self, x):
        return ad.channel_softmax(self.mkcb2(self.mkcb1(x)))

    def __call__(self, x):
        return ad.add(ad.mul(x, self.weight_map(x)), x)


class _DownBlock(Module):
    def __init__(self, ch, rng):
        self.conv_s2 = Conv2d(ch, ch, 3, stride=2, rng=rng)
        self.act = PReLU(ch)
        self.conv_s1 = Conv2d(ch, ch, 3, rng=rng)

    def __call__(self, x):
        return self.conv_s1(self.act(self.conv_s2(x)))


class _UpBlock(Module):
    def __init__(self, ch, rng):
        self.tconv_s2 = ConvTranspose2d(ch, ch, 3, stride=2, rng=rng)
        self.act = PReLU(ch)
        self.tconv_s1 = ConvTranspose2d(ch, ch, 3, stride=1, rng=rng)

    def __call__(self, x):
        return self.tconv_s1(self.act(self.tconv_s2(x)))


class DRB(Module):
    """Detail refinement branch: two downsampling blocks and two
    upsampling blocks with attention after each, plus concatenated
    skips (down2 out -> up1 in, down1 out -> up2 in), each concat
    restored to branch width by a k1s1 conv."""

    def __init__(self, ch, rng):
        self.down1 = _DownBlock(ch, rng)
        self.attn1 = Attention(ch, rng)
        self.down2 = _DownBlock(ch, rng)
        self.attn2 = Attention(ch, rng)
        self.merge1 = Conv2d(2 * ch, ch, 1, rng=rng)
        self.up1 = _UpBlock(ch, rng)
        self.attn3 = Attention(ch, rng)
        self.merge2 = Conv2d(2 * ch, ch, 1, rng=rng)
        self.up2 = _UpBlock(ch, rng)

    def __call__(self, x):
        if x.data.shape[2] % 4 or x.data.shape[3] % 4:
            raise ShapeError("DRB wants H, W divisible by 4, got %r" % (x.shape,))
        d1 = self.down1(x)            # /2
        a1 = self.attn1(d1)
        d2 = self.down2(a1)           # /4
        a2 = self.attn2(d2)
        u1 = self.up1(self.merge1(ad.concat(a2, d2)))   # /2
        a3 = self.attn3(u1)
        return self.up2(self.merge2(ad.concat(a3, d1)))  # /1


class _ConvUnit(Module):
    def __init__(self, ch, rng):
        self.conv1 = Conv2d(ch, ch, 3, rng=rng)
        self.act = PReLU(ch)
        self.conv2 = Conv2d(ch, ch, 3, rng=rng)

    def __call__(self, x):
        return self.conv2(self.act(self.conv1(x)))


class RFB(Module):
    """Rough filtering branch: attention, four conv units in series,
    attention, under a global identity skip. With all conv weights and
    biases zeroed the branch is exactly the identity."""

    def __init__(self, ch, rng):
        self.head = Attention(ch, rng)
        self.units = [_ConvUnit(ch, rng) for _ in range(4)]
        self.tail = Attention(ch, rng)

    def __call__(self, x):
        y = self.head(x)
        for u in self.units:
            y = u(y)
        return ad.add(self.tail(y), x)


class FilterModel(Module):
    """Full filter: k3s1 projection in, DRB and RFB in parallel,
    elementwise sum, k3s1 projection out. Spatial dims preserved; any
    clamping to [0,1] is the caller's export concern."""

    def __init__(self, config=FilterConfig(), role="filter.bl", seed=0):
        rng = np.random.default_rng(seed)
        w = config.width
        self.config = config
        self.role = role
        self.proj_in = Conv2d(config.io_channels, w, 3, rng=rng)
        self.drb = DRB(w, rng)
        self.rfb = RFB(w, rng)
        self.proj_out = Conv2d(w, config.io_channels, 3, rng=rng)

    def __call__(self, x):
        if x.data.ndim != 4 or x.data.shape[1] != self.config.io_channels:
            raise ShapeError("filter wants (B,%d,H,W), got %r"
                             % (self.config.io_channels, x.shape))
        h = self.proj_in(x)
        return self.proj_out(ad.add(self.drb(h), self.rfb(h)))
