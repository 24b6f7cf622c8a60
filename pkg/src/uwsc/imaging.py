"""Image containers, PPM/PNG io, block tiling, and the reference enhancer.

Images move through the codec in two forms: interleaved uint8 RGB
(`RgbImage`, shape (H, W, 3)) at the file boundary, and planar float
(`ImagePlanes`, shape (3, H, W), range [0, 1]) everywhere else. Block
tiling turns planes into per-channel matrices of vectorized 16x16
patches, which is the unit the sparse coder works on.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import DataError, DimensionError, FormatError

BLOCK = 16

# Weights of the luminance plane used by the metrics and the boundary
# loss term (ITU-R BT.601).
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass
class RgbImage:
    """Interleaved 8-bit RGB image, shape (H, W, 3)."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 3 or a.shape[2] != 3:
            raise DimensionError("RgbImage wants (H, W, 3), got %r" % (a.shape,))
        if a.dtype != np.uint8:
            raise DataError("RgbImage wants uint8, got %s" % a.dtype)
        self.data = a

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


@dataclass
class ImagePlanes:
    """Planar float image, shape (3, H, W), values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float64)
        if a.ndim != 3 or a.shape[0] != 3:
            raise DimensionError("ImagePlanes wants (3, H, W), got %r" % (a.shape,))
        self.data = a

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]


# An enhancer maps an RGB image to an enhanced RGB image of the same size.
Enhancer = Callable[[RgbImage], RgbImage]


def to_planes(img):
    """uint8 (H, W, 3) -> float (3, H, W) in [0, 1]."""
    return ImagePlanes(img.data.astype(np.float64).transpose(2, 0, 1) / 255.0)


def from_planes(planes):
    """float (3, H, W) -> uint8 (H, W, 3), clipping then rounding half-even."""
    x = np.clip(planes.data, 0.0, 1.0) * 255.0
    return RgbImage(np.rint(x).astype(np.uint8).transpose(1, 2, 0))


def luminance(planes):
    """Weighted luminance plane of an ImagePlanes, shape (H, W)."""
    r, g, b = planes.data
    wr, wg, wb = LUMA_WEIGHTS
    return wr * r + wg * g + wb * b


# ---------------------------------------------------------------------------
# PPM (P6) and PNG io. P6 is the native format and is hand-rolled so the
# package has no image dependency on the mandatory path; PNG goes through
# Pillow when available.

def _parse_ppm_token(data, pos):
    # skip whitespace and '#' comments between header tokens
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("PPM header ended early")
    return data[start:pos], pos


def load_ppm(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] != b"P6":
        raise FormatError("not a binary PPM (P6) file: %r" % (data[:2],))
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _parse_ppm_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError("bad PPM header token %r" % (tok,))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError("only maxval 255 PPM supported, got %d" % maxval)
    if w <= 0 or h <= 0:
        raise FormatError("bad PPM dimensions %dx%d" % (w, h))
    pos += 1  # single whitespace byte after maxval
    need = w * h * 3
    raw = data[pos:pos + need]
    if len(raw) < need:
        raise FormatError("PPM pixel payload truncated: %d of %d bytes"
                          % (len(raw), need))
    return RgbImage(np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy())


def save_ppm(path, img):
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (img.width, img.height))
        f.write(np.ascontiguousarray(img.data).tobytes())


def load_image(path):
    """Load a PPM or PNG image as RgbImage."""
    p = str(path)
    if p.lower().endswith((".ppm", ".pnm")):
        return load_ppm(p)
    try:
        from PIL import Image
    except ImportError:
        raise FormatError("PNG support needs Pillow; use PPM instead")
    with Image.open(p) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return RgbImage(arr)


def save_image(path, img):
    p = str(path)
    if p.lower().endswith((".ppm", ".pnm")):
        save_ppm(p, img)
        return
    try:
        from PIL import Image
    except ImportError:
        raise FormatError("PNG support needs Pillow; use PPM instead")
    Image.fromarray(img.data, mode="RGB").save(p)


# ---------------------------------------------------------------------------
# Padding and block tiling.

def pad_to_multiple(img, multiple):
    """Edge-replicate pad an RgbImage so both sides divide `multiple`.

    Returns (padded RgbImage, (orig_h, orig_w)). A no-op when already
    aligned.
    """
    h, w = img.height, img.width
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return img, (h, w)
    padded = np.pad(img.data, ((0, ph), (0, pw), (0, 0)), mode="edge")
    return RgbImage(padded), (h, w)


def crop(img, size):
    h, w = size
    return RgbImage(np.ascontiguousarray(img.data[:h, :w]))


def split_blocks(planes, block=BLOCK):
    """(3, H, W) planes -> (3, n_blocks, block*block) matrix.

    Tiles are taken in raster order; each tile is vectorized row-major,
    so entry i of a block vector is pixel (i // block, i % block).
    """
    c, h, w = planes.data.shape
    if h % block or w % block:
        raise DimensionError("planes %dx%d not a multiple of %d" % (h, w, block))
    nby, nbx = h // block, w // block
    v = planes.data.reshape(c, nby, block, nbx, block)
    return v.transpose(0, 1, 3, 2, 4).reshape(c, nby * nbx, block * block)


def merge_blocks(blocks, height, width, block=BLOCK):
    """Inverse of split_blocks; needs the target plane size."""
    c, nb, bb = blocks.shape
    if bb != block * block:
        raise DimensionError("block vectors have length %d, want %d" % (bb, block * block))
    nby, nbx = height // block, width // block
    if nby * nbx != nb:
        raise DimensionError("%d blocks cannot tile %dx%d" % (nb, height, width))
    v = blocks.reshape(c, nby, nbx, block, block).transpose(0, 1, 3, 2, 4)
    return ImagePlanes(v.reshape(c, height, width))


# ---------------------------------------------------------------------------
# Reference enhancer. A deterministic classical stand-in for a learned
# underwater enhancer: gray-world white balance, percentile contrast
# stretch, light unsharp masking. Used to build enhanced counterparts
# when no curated targets are available.

def reference_enhance(img):
    x = img.data.astype(np.float64)

    variances = x.var(axis=(0, 1))
    means = x.mean(axis=(0, 1))

    # gray-world balance; flat channels carry no cast information, skip them
    target = means.mean()
    for c in range(3):
        if variances[c] > 0.0 and means[c] > 0.0:
            x[:, :, c] *= target / means[c]
    x = np.clip(x, 0.0, 255.0)

    # percentile stretch to full range, again skipping flat channels
    for c in range(3):
        ch = x[:, :, c]
        lo, hi = np.percentile(ch, (1.0, 99.0))
        if hi - lo > 1e-9:
            x[:, :, c] = np.clip((ch - lo) * (255.0 / (hi - lo)), 0.0, 255.0)

    # 3x3 box unsharp, strength 0.5, replicated borders
    blur = np.empty_like(x)
    for c in range(3):
        blur[:, :, c] = uniform_filter(x[:, :, c], size=3, mode="nearest")
    x = np.clip(x + 0.5 * (x - blur), 0.0, 255.0)

    return RgbImage(np.rint(x).astype(np.uint8))
