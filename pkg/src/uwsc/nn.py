"""Parameter containers and the few layer types the codec needs.

Modules discover their parameters by walking attributes in sorted
order, so parameter names (and therefore weight files) are stable for
a given architecture. Initialization is fully determined by the rng
handed to each constructor.
"""

import numpy as np

from .autodiff import Tensor, conv2d, prelu, tconv2d
from .binio import ByteReader, ByteWriter
from .errors import FormatError, ShapeError

WEIGHTS_MAGIC = b"UWTEN01"


class Module:
    def named_parameters(self, prefix=""):
        for key in sorted(vars(self)):
            val = vars(self)[key]
            name = key if not prefix else prefix + "." + key
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters("%s.%d" % (name, i))

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def state_dict(self):
        return {name: np.array(t.data, copy=True)
                for name, t in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        if sorted(params) != sorted(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ShapeError("parameter set mismatch: missing %r, unexpected %r"
                             % (missing, extra))
        for name, t in params.items():
            if state[name].shape != t.data.shape:
                raise ShapeError("parameter %s: file has %r, model wants %r"
                                 % (name, state[name].shape, t.data.shape))
            t.data = state[name].astype(t.data.dtype)

    def save_weights(self, path, header=b""):
        """Write parameters to a checksummed binary file.

        header is an opaque byte blob (configuration text) stored
        before the parameter records.
        """
        w = ByteWriter()
        w.raw(WEIGHTS_MAGIC)
        w.u32(len(header))
        w.raw(header)
        named = list(self.named_parameters())
        w.u32(len(named))
        for name, t in named:
            nb = name.encode("utf-8")
            w.u16(len(nb))
            w.raw(nb)
            w.u8(t.data.ndim)
            for dim in t.data.shape:
                w.u32(dim)
            w.f32_array(t.data)
        w.crc()
        with open(path, "wb") as f:
            f.write(w.getvalue())

    def load_weights(self, path):
        """Load parameters saved by save_weights; returns the header blob."""
        with open(path, "rb") as f:
            r = ByteReader(f.read())
        if r.raw(len(WEIGHTS_MAGIC)) != WEIGHTS_MAGIC:
            raise FormatError("not a weights file: bad magic")
        header = r.raw(r.u32())
        count = r.u32()
        state = {}
        for _ in range(count):
            name = r.raw(r.u16()).decode("utf-8")
            ndim = r.u8()
            shape = tuple(r.u32() for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            state[name] = r.f32_array(n, shape)
        r.check_crc()
        self.load_state_dict(state)
        return header


def _param(rng, shape, scale):
    return Tensor(rng.normal(0.0, scale, size=shape).astype(np.float32),
                  requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, stride=1, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = cin * kernel * kernel
        self.weight = _param(rng, (cout, cin, kernel, kernel), fan_in ** -0.5)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
        self.stride = stride
        self.padding = kernel // 2

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    """Transposed conv with output_padding = stride - 1, so stride-2
    layers exactly double the spatial size."""

    def __init__(self, cin, cout, kernel, stride=1, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = cin * kernel * kernel
        self.weight = _param(rng, (cin, cout, kernel, kernel), fan_in ** -0.5)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
        self.stride = stride
        self.padding = kernel // 2

    def __call__(self, x):
        return tconv2d(x, self.weight, self.bias, self.stride, self.padding)


class PReLU(Module):
    def __init__(self, channels, init=0.25):
        self.slope = Tensor(np.full(channels, init, dtype=np.float32),
                            requires_grad=True)

    def __call__(self, x):
        return prelu(x, self.slope)


class Sequential(Module):
    def __init__(self, *mods):
        self.mods = list(mods)

    def __call__(self, x):
        for m in self.mods:
            x = m(x)
        return x
