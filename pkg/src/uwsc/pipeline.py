"""Layered encoding pipeline and on-disk bitstream.

The base layer carries the sparse coefficient planes through the
coefficient codec; the optional enhancement layer carries the residue
between a pseudo-enhanced image and the base-layer output through the
residue codec. The encoder always reconstructs through the same
quantized path the decoder will take, so both sides produce identical
images byte for byte.
"""

import os
import zlib
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .binio import ByteReader, ByteWriter
from .codec import CodecConfig, CodecModel, compress, decompress
from .entropy import total_rate
from .errors import DataError, FormatError, ModelMismatchError, StreamError
from .filters import FilterConfig, FilterModel
from .imaging import (ImagePlanes, RgbImage, crop, from_planes,
                      pad_to_multiple, to_planes)
from .sparse import Dictionary, encode_image, reconstruct_planes

MAGIC = b"UWSC"
VERSION = 1
FLAG_EL = 0x01
PAD_MULTIPLE = 64

LAMBDA_VALUES = (4, 8, 16, 32, 64, 128, 256)


def lambda_index(lam):
    if lam not in LAMBDA_VALUES:
        raise DataError("lambda %r not one of %r" % (lam, LAMBDA_VALUES))
    return LAMBDA_VALUES.index(lam)


# ---------------------------------------------------------------------------
# Model bundle: everything the decoder needs, saved as one directory.

_BUNDLE_FILES = {
    "d1": "d1.dict",
    "d2": "d2.dict",
    "codec_sparse": "codec_sparse.wts",
    "codec_residue": "codec_residue.wts",
    "filter_bl": "filter_bl.wts",
    "filter_pseudo": "filter_pseudo.wts",
    "filter_el": "filter_el.wts",
}


def _random_dictionary(rng, channels=3, atom_dim=256, n_atoms=256):
    d = rng.standard_normal((channels, atom_dim, n_atoms))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return Dictionary(d)


@dataclass
class ModelBundle:
    """One trained operating point: dictionaries, both codecs, all three
    filters, and the lambda they were trained for."""

    d1: Dictionary
    d2: Dictionary
    codec_sparse: CodecModel
    codec_residue: CodecModel
    filter_bl: FilterModel
    filter_pseudo: FilterModel
    filter_el: FilterModel
    lam: int
    codec_config: CodecConfig
    filter_config: FilterConfig

    @classmethod
    def new(cls, lam=64, codec_config=None, filter_config=None, seed=0):
        """Fresh untrained bundle with deterministic initialization."""
        cc = codec_config or CodecConfig()
        fc = filter_config or FilterConfig()
        lambda_index(lam)
        rng = np.random.default_rng(seed)
        d1 = _random_dictionary(rng)
        d2 = Dictionary(np.array(d1.data, copy=True))
        return cls(
            d1=d1, d2=d2,
            codec_sparse=CodecModel(cc, role="sparse", seed=seed + 1),
            codec_residue=CodecModel(cc, role="residue", seed=seed + 2),
            filter_bl=FilterModel(fc, role="filter.bl", seed=seed + 3),
            filter_pseudo=FilterModel(fc, role="filter.pseudo", seed=seed + 4),
            filter_el=FilterModel(fc, role="filter.el", seed=seed + 5),
            lam=lam, codec_config=cc, filter_config=fc)

    def modules(self):
        return {"codec_sparse": self.codec_sparse,
                "codec_residue": self.codec_residue,
                "filter_bl": self.filter_bl,
                "filter_pseudo": self.filter_pseudo,
                "filter_el": self.filter_el}

    def config_text(self):
        """Canonical key=value description; its CRC32 is the config hash
        embedded in bitstreams and checkpoints."""
        lines = [
            "codec_hyper_channels=%d" % self.codec_config.hyper_channels,
            "codec_latent_channels=%d" % self.codec_config.latent_channels,
            "codec_width=%d" % self.codec_config.width,
            "dict_atom_dim=%d" % self.d1.atom_dim,
            "dict_atoms=%d" % self.d1.n_atoms,
            "filter_io_channels=%d" % self.filter_config.io_channels,
            "filter_width=%d" % self.filter_config.width,
            "lambda=%d" % self.lam,
            "version=%d" % VERSION,
        ]
        return "\n".join(lines) + "\n"

    def config_hash(self):
        return zlib.crc32(self.config_text().encode("ascii")) & 0xFFFFFFFF

    def save(self, dirpath):
        os.makedirs(dirpath, exist_ok=True)
        with open(os.path.join(dirpath, "config.txt"), "w") as f:
            f.write(self.config_text())
        self.d1.save(os.path.join(dirpath, _BUNDLE_FILES["d1"]))
        self.d2.save(os.path.join(dirpath, _BUNDLE_FILES["d2"]))
        header = self.config_text().encode("ascii")
        for name, mod in self.modules().items():
            mod.save_weights(os.path.join(dirpath, _BUNDLE_FILES[name]),
                             header=header)

    @classmethod
    def load(cls, dirpath):
        cfg_path = os.path.join(dirpath, "config.txt")
        try:
            with open(cfg_path) as f:
                text = f.read()
        except OSError as e:
            raise FormatError("cannot read %s: %s" % (cfg_path, e))
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError("bad config line %r" % line)
            key, val = line.split("=", 1)
            kv[key] = val
        try:
            cc = CodecConfig(width=int(kv["codec_width"]),
                             latent_channels=int(kv["codec_latent_channels"]),
                             hyper_channels=int(kv["codec_hyper_channels"]))
            fc = FilterConfig(width=int(kv["filter_width"]),
                              io_channels=int(kv["filter_io_channels"]))
            lam = int(kv["lambda"])
        except (KeyError, ValueError) as e:
            raise FormatError("config.txt missing or malformed field: %s" % e)
        bundle = cls.new(lam=lam, codec_config=cc, filter_config=fc)
        bundle.d1 = Dictionary.load(os.path.join(dirpath, _BUNDLE_FILES["d1"]))
        bundle.d2 = Dictionary.load(os.path.join(dirpath, _BUNDLE_FILES["d2"]))
        expected = bundle.config_text().encode("ascii")
        for name, mod in bundle.modules().items():
            header = mod.load_weights(os.path.join(dirpath, _BUNDLE_FILES[name]))
            if header != expected:
                raise ModelMismatchError(
                    "%s was saved under a different configuration" % name)
        return bundle


# ---------------------------------------------------------------------------
# Stream segments. Each is (count u32, length u32, payload, crc32) where
# the crc covers count, length, and payload.

def _write_segment(w, count, payload):
    seg = ByteWriter()
    seg.u32(count)
    seg.u32(len(payload))
    seg.raw(payload)
    seg.crc()
    w.raw(seg.getvalue())


def _read_segment(r):
    try:
        count = r.u32()
        length = r.u32()
        payload = r.raw(length)
        stored = r.u32()
    except FormatError:
        raise StreamError("truncated stream segment")
    seg = ByteWriter()
    seg.u32(count)
    seg.u32(length)
    seg.raw(payload)
    if zlib.crc32(seg.getvalue()) & 0xFFFFFFFF != stored:
        raise StreamError("stream segment checksum mismatch")
    return count, payload


# ---------------------------------------------------------------------------
# Encoding.

@dataclass
class EncodeResult:
    bitstream: bytes
    bpp_bl: float
    bpp_total: float
    o_bl: RgbImage
    o_el: "RgbImage | None"
    k: int
    orig_hw: tuple
    padded_hw: tuple
    plane_zero_fraction: float
    bits_bl: tuple      # (actual_y, actual_z, est_y, est_z)
    bits_el: "tuple | None"

    def __post_init__(self):
        if self.bpp_bl > self.bpp_total + 1e-12:
            raise DataError("bpp_bl exceeds bpp_total")


def _filter_planes(filter_model, planes_f32):
    """(3,H,W) float32 -> (3,H,W) float32 through a filter, batch of 1."""
    out = filter_model(Tensor(planes_f32[None]))
    return out.data[0]


def _export(planes_f32, orig_hw):
    """Float planes -> cropped uint8 image, the single export path both
    encoder and decoder use so their outputs can be compared bytewise."""
    img = from_planes(ImagePlanes(planes_f32.astype(np.float64)))
    return crop(img, orig_hw)


def encode_bl(img, d1, d2, codec_sparse, filter_bl, k):
    """Base layer for an already padded image.

    Returns (CompressResult, O_BL planes float32, zero fraction). O_BL
    is computed from the decoded planes, never the raw ones.
    """
    planes = to_planes(img)
    cplanes = encode_image(planes, d1, k)
    result = compress(cplanes.data[None], codec_sparse)
    planes_hat = result.x_hat[0].astype(np.float64)
    recon = reconstruct_planes(planes_hat, d2.data).astype(np.float32)
    o_bl = _filter_planes(filter_bl, recon)
    return result, o_bl, cplanes.zero_fraction()


def encode_el(img, o_bl, filter_pseudo, codec_residue):
    """Enhancement layer: residue between the pseudo-enhanced input and
    the base-layer output, mapped to [0,1] for the residue codec.

    Returns (CompressResult, O_EL-input planes float32) where the planes
    are o_bl + decoded residue (the filter_el input).
    """
    x = to_planes(img).data.astype(np.float32)
    pseudo = _filter_planes(filter_pseudo, x)
    residue = np.clip(pseudo - o_bl, -1.0, 1.0)
    mapped = (residue + 1.0) * 0.5
    result = compress(mapped[None], codec_residue)
    res_hat = result.x_hat[0] * 2.0 - 1.0
    return result, o_bl + res_hat


def encode(img, bundle, k=128, layers="el"):
    """Encode an RgbImage to a layered bitstream.

    layers is "bl" for base only or "el" for base plus enhancement.
    """
    if layers not in ("bl", "el"):
        raise DataError("layers must be 'bl' or 'el', got %r" % (layers,))
    if not 1 <= k <= 256:
        raise DataError("k must lie in [1, 256], got %d" % k)
    padded, orig_hw = pad_to_multiple(img, PAD_MULTIPLE)
    pad_hw = (padded.height, padded.width)
    pixels = orig_hw[0] * orig_hw[1]

    bl, o_bl, zero_frac = encode_bl(padded, bundle.d1, bundle.d2,
                                    bundle.codec_sparse, bundle.filter_bl, k)
    el = None
    o_el_planes = None
    if layers == "el":
        el, o_el_planes = encode_el(padded, o_bl, bundle.filter_pseudo,
                                    bundle.codec_residue)
        o_el_planes = _filter_planes(bundle.filter_el, o_el_planes)

    w = ByteWriter()
    w.raw(MAGIC)
    w.u8(VERSION)
    w.u8(FLAG_EL if el is not None else 0)
    w.u16(orig_hw[0])
    w.u16(orig_hw[1])
    w.u16(pad_hw[0])
    w.u16(pad_hw[1])
    w.u8(k - 1)
    w.u8(lambda_index(bundle.lam))
    w.u32(bundle.config_hash())
    _write_segment(w, bl.n_symbols_y, bl.y_stream)
    _write_segment(w, bl.n_symbols_z, bl.z_stream)
    if el is not None:
        _write_segment(w, el.n_symbols_y, el.y_stream)
        _write_segment(w, el.n_symbols_z, el.z_stream)

    bits_bl = 8 * (len(bl.y_stream) + len(bl.z_stream))
    bits_total = bits_bl
    bits_el = None
    o_el = None
    if el is not None:
        bits_total += 8 * (len(el.y_stream) + len(el.z_stream))
        bits_el = (8 * len(el.y_stream), 8 * len(el.z_stream),
                   el.est_bits_y, el.est_bits_z)
        o_el = _export(o_el_planes, orig_hw)

    return EncodeResult(
        bitstream=w.getvalue(),
        bpp_bl=bits_bl / pixels,
        bpp_total=bits_total / pixels,
        o_bl=_export(o_bl, orig_hw),
        o_el=o_el,
        k=k,
        orig_hw=orig_hw,
        padded_hw=pad_hw,
        plane_zero_fraction=zero_frac,
        bits_bl=(8 * len(bl.y_stream), 8 * len(bl.z_stream),
                 bl.est_bits_y, bl.est_bits_z),
        bits_el=bits_el)


# ---------------------------------------------------------------------------
# Decoding.

@dataclass
class _Header:
    flags: int
    orig_hw: tuple
    padded_hw: tuple
    k: int
    lambda_id: int
    config_hash: int


def _read_header(r):
    try:
        if r.raw(4) != MAGIC:
            raise FormatError("not a layered bitstream: bad magic")
        version = r.u8()
        if version != VERSION:
            raise FormatError("unsupported bitstream version %d" % version)
        flags = r.u8()
        orig_h, orig_w = r.u16(), r.u16()
        pad_h, pad_w = r.u16(), r.u16()
        k = r.u8() + 1
        lambda_id = r.u8()
        config_hash = r.u32()
    except FormatError:
        raise
    if pad_h % PAD_MULTIPLE or pad_w % PAD_MULTIPLE:
        raise FormatError("padded dims %dx%d not multiples of %d"
                          % (pad_h, pad_w, PAD_MULTIPLE))
    if orig_h > pad_h or orig_w > pad_w or orig_h == 0 or orig_w == 0:
        raise FormatError("original dims %dx%d inconsistent with padded %dx%d"
                          % (orig_h, orig_w, pad_h, pad_w))
    if lambda_id >= len(LAMBDA_VALUES):
        raise FormatError("lambda id %d out of range" % lambda_id)
    return _Header(flags, (orig_h, orig_w), (pad_h, pad_w), k,
                   lambda_id, config_hash)


def decode(bitstream, bundle, layer="el"):
    """Decode a layered bitstream to an RgbImage at the requested layer."""
    if layer not in ("bl", "el"):
        raise DataError("layer must be 'bl' or 'el', got %r" % (layer,))
    r = ByteReader(bitstream)
    header = _read_header(r)
    if header.config_hash != bundle.config_hash():
        raise ModelMismatchError(
            "bitstream config hash %08x does not match models %08x"
            % (header.config_hash, bundle.config_hash()))
    if LAMBDA_VALUES[header.lambda_id] != bundle.lam:
        raise ModelMismatchError(
            "bitstream lambda %d does not match models lambda %d"
            % (LAMBDA_VALUES[header.lambda_id], bundle.lam))

    _, y_stream = _read_segment(r)
    _, z_stream = _read_segment(r)
    planes_hat = decompress(y_stream, z_stream, bundle.codec_sparse,
                            header.padded_hw)[0].astype(np.float64)
    recon = reconstruct_planes(planes_hat, bundle.d2.data).astype(np.float32)
    o_bl = _filter_planes(bundle.filter_bl, recon)
    if layer == "bl":
        return _export(o_bl, header.orig_hw)

    if not header.flags & FLAG_EL:
        raise FormatError("bitstream has no enhancement layer")
    _, ry_stream = _read_segment(r)
    _, rz_stream = _read_segment(r)
    mapped = decompress(ry_stream, rz_stream, bundle.codec_residue,
                        header.padded_hw)[0]
    res_hat = mapped * 2.0 - 1.0
    o_el = _filter_planes(bundle.filter_el, o_bl + res_hat)
    return _export(o_el, header.orig_hw)


def inspect(bitstream):
    """Header fields of a bitstream without decoding payloads."""
    header = _read_header(ByteReader(bitstream))
    return {
        "version": VERSION,
        "has_el": bool(header.flags & FLAG_EL),
        "orig_h": header.orig_hw[0],
        "orig_w": header.orig_hw[1],
        "pad_h": header.padded_hw[0],
        "pad_w": header.padded_hw[1],
        "k": header.k,
        "lambda": LAMBDA_VALUES[header.lambda_id],
        "config_hash": header.config_hash,
    }


def report_rates(result):
    """Per-layer RateReports for an EncodeResult, from actual stream bytes."""
    pixels = result.orig_hw[0] * result.orig_hw[1]
    by, bz = result.bits_bl[0], result.bits_bl[1]
    reports = {"bl": total_rate(by, bz, 0.0, 0.0, pixels)}
    if result.bits_el is not None:
        ry, rz = result.bits_el[0], result.bits_el[1]
        reports["el"] = total_rate(0.0, 0.0, ry, rz, pixels)
        reports["total"] = total_rate(by, bz, ry, rz, pixels)
    else:
        reports["el"] = None
        reports["total"] = reports["bl"]
    return reports
