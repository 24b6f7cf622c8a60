"""Layered bitstream pipeline: header contract, closed-loop agreement
between encoder-side and decoder-side outputs, layer separation, stream
integrity, and model bundle persistence."""

import numpy as np
import pytest

from conftest import TOY_CODEC, TOY_FILTER, underwater_image
from uwsc.errors import (DataError, FormatError, ModelMismatchError,
                         StreamError)
from uwsc.pipeline import (LAMBDA_VALUES, MAGIC, PAD_MULTIPLE, ModelBundle,
                           decode, encode, inspect, lambda_index,
                           report_rates)


class TestLambdaTable:
    def test_values(self):
        assert LAMBDA_VALUES == (4, 8, 16, 32, 64, 128, 256)

    def test_index_round_trip(self):
        for i, lam in enumerate(LAMBDA_VALUES):
            assert lambda_index(lam) == i

    def test_unknown_lambda(self):
        with pytest.raises(DataError):
            lambda_index(5)


class TestHeader:
    def test_inspect_fields(self, toy_bundle):
        img = underwater_image(200, 80, 70)
        res = encode(img, toy_bundle, k=96, layers="el")
        info = inspect(res.bitstream)
        assert info["version"] == 1
        assert info["has_el"] is True
        assert (info["orig_h"], info["orig_w"]) == (80, 70)
        assert (info["pad_h"], info["pad_w"]) == (128, 128)
        assert info["pad_h"] % PAD_MULTIPLE == 0
        assert info["k"] == 96
        assert info["lambda"] == toy_bundle.lam
        assert info["config_hash"] == toy_bundle.config_hash()

    def test_bl_only_flag(self, toy_bundle):
        img = underwater_image(201, 64, 64)
        res = encode(img, toy_bundle, k=32, layers="bl")
        assert inspect(res.bitstream)["has_el"] is False

    def test_magic_guard(self):
        with pytest.raises(FormatError):
            inspect(b"JUNK" + bytes(32))

    def test_version_guard(self, toy_bundle):
        img = underwater_image(202, 64, 64)
        blob = bytearray(encode(img, toy_bundle, k=32).bitstream)
        blob[len(MAGIC)] = 99
        with pytest.raises(FormatError):
            inspect(bytes(blob))


class TestClosedLoop:
    def test_decoder_reproduces_encoder_outputs(self, toy_bundle):
        img = underwater_image(210, 80, 70)
        res = encode(img, toy_bundle, k=128, layers="el")
        bl = decode(res.bitstream, toy_bundle, layer="bl")
        el = decode(res.bitstream, toy_bundle, layer="el")
        np.testing.assert_array_equal(bl.data, res.o_bl.data)
        np.testing.assert_array_equal(el.data, res.o_el.data)
        assert bl.data.shape == (80, 70, 3)

    def test_bl_only_stream(self, toy_bundle):
        img = underwater_image(211, 64, 64)
        res = encode(img, toy_bundle, k=64, layers="bl")
        assert res.o_el is None and res.bits_el is None
        bl = decode(res.bitstream, toy_bundle, layer="bl")
        np.testing.assert_array_equal(bl.data, res.o_bl.data)
        with pytest.raises(FormatError, match="no enhancement layer"):
            decode(res.bitstream, toy_bundle, layer="el")

    def test_deterministic(self, toy_bundle):
        img = underwater_image(212, 64, 64)
        a = encode(img, toy_bundle, k=48)
        b = encode(img, toy_bundle, k=48)
        assert a.bitstream == b.bitstream

    def test_zero_fraction_recorded(self, toy_bundle):
        img = underwater_image(213, 64, 64)
        res = encode(img, toy_bundle, k=128)
        assert res.plane_zero_fraction == 0.5

    def test_parameter_validation(self, toy_bundle):
        img = underwater_image(214, 64, 64)
        with pytest.raises(DataError):
            encode(img, toy_bundle, k=0)
        with pytest.raises(DataError):
            encode(img, toy_bundle, k=257)
        with pytest.raises(DataError):
            encode(img, toy_bundle, layers="both")
        res = encode(img, toy_bundle, k=16)
        with pytest.raises(DataError):
            decode(res.bitstream, toy_bundle, layer="full")

    def test_flat_image_codes_far_below_raw(self, toy_bundle):
        # an all-black frame must cost under 1% of raw 24 bpp
        from uwsc.imaging import RgbImage
        img = RgbImage(np.zeros((64, 64, 3), dtype=np.uint8))
        res = encode(img, toy_bundle, k=32, layers="bl")
        assert res.bpp_bl < 0.24


class TestStreamIntegrity:
    def test_corrupt_el_leaves_bl_decodable(self, toy_bundle):
        img = underwater_image(220, 64, 64)
        res = encode(img, toy_bundle, k=64, layers="el")
        blob = bytearray(res.bitstream)
        blob[-2] ^= 0xFF     # inside the last enhancement segment
        bad = bytes(blob)
        bl = decode(bad, toy_bundle, layer="bl")
        np.testing.assert_array_equal(bl.data, res.o_bl.data)
        with pytest.raises(StreamError):
            decode(bad, toy_bundle, layer="el")

    def test_corrupt_bl_detected(self, toy_bundle):
        img = underwater_image(221, 64, 64)
        res = encode(img, toy_bundle, k=64, layers="bl")
        blob = bytearray(res.bitstream)
        blob[30] ^= 0x01     # inside the first segment
        with pytest.raises(StreamError):
            decode(bytes(blob), toy_bundle, layer="bl")

    def test_truncation_detected(self, toy_bundle):
        img = underwater_image(222, 64, 64)
        res = encode(img, toy_bundle, k=64, layers="bl")
        with pytest.raises(StreamError):
            decode(res.bitstream[:len(res.bitstream) - 6], toy_bundle,
                   layer="bl")

    def test_foreign_bundle_rejected(self, toy_bundle):
        img = underwater_image(223, 64, 64)
        res = encode(img, toy_bundle, k=64)
        other = ModelBundle.new(128, TOY_CODEC, TOY_FILTER, seed=7)
        with pytest.raises(ModelMismatchError):
            decode(res.bitstream, other)


class TestRateBookkeeping:
    def test_reports_match_stream_bytes(self, toy_bundle):
        img = underwater_image(230, 80, 70)
        res = encode(img, toy_bundle, k=128, layers="el")
        reports = report_rates(res)
        assert reports["bl"].bits_total == res.bits_bl[0] + res.bits_bl[1]
        assert reports["el"].bits_total == res.bits_el[0] + res.bits_el[1]
        assert reports["total"].bits_total == (reports["bl"].bits_total
                                               + reports["el"].bits_total)
        np.testing.assert_allclose(reports["total"].bpp, res.bpp_total)
        np.testing.assert_allclose(reports["bl"].bpp, res.bpp_bl)

    def test_bl_only_report(self, toy_bundle):
        img = underwater_image(231, 64, 64)
        res = encode(img, toy_bundle, k=64, layers="bl")
        reports = report_rates(res)
        assert reports["el"] is None
        assert reports["total"] is reports["bl"]

    def test_layer_cost_ordering(self, toy_bundle):
        img = underwater_image(232, 64, 64)
        res = encode(img, toy_bundle, k=64, layers="el")
        assert res.bpp_bl < res.bpp_total


class TestModelBundle:
    def test_new_is_deterministic(self):
        a = ModelBundle.new(64, TOY_CODEC, TOY_FILTER, seed=11)
        b = ModelBundle.new(64, TOY_CODEC, TOY_FILTER, seed=11)
        img = underwater_image(240, 64, 64)
        assert encode(img, a, k=32).bitstream == encode(img, b, k=32).bitstream

    def test_seed_changes_weights(self):
        a = ModelBundle.new(64, TOY_CODEC, TOY_FILTER, seed=11)
        b = ModelBundle.new(64, TOY_CODEC, TOY_FILTER, seed=12)
        img = underwater_image(241, 64, 64)
        assert encode(img, a, k=32).bitstream != encode(img, b, k=32).bitstream

    def test_save_load_round_trip(self, toy_bundle, tmp_path):
        d1 = str(tmp_path / "m1")
        d2 = str(tmp_path / "m2")
        toy_bundle.save(d1)
        loaded = ModelBundle.load(d1)
        assert loaded.lam == toy_bundle.lam
        assert loaded.config_hash() == toy_bundle.config_hash()
        img = underwater_image(242, 64, 64)
        assert (encode(img, loaded, k=32).bitstream
                == encode(img, toy_bundle, k=32).bitstream)
        loaded.save(d2)
        import os
        for name in sorted(os.listdir(d1)):
            a = open(os.path.join(d1, name), "rb").read()
            b = open(os.path.join(d2, name), "rb").read()
            assert a == b, name

    def test_config_text_is_sorted_key_value(self, toy_bundle):
        lines = toy_bundle.config_text().strip().split("\n")
        keys = [ln.split("=")[0] for ln in lines]
        assert keys == sorted(keys)
        assert "lambda=64" in lines

    def test_edited_config_rejected_on_load(self, toy_bundle, tmp_path):
        import os
        d = str(tmp_path / "m")
        toy_bundle.save(d)
        cfg = os.path.join(d, "config.txt")
        text = open(cfg).read().replace("lambda=64", "lambda=128")
        open(cfg, "w").write(text)
        with pytest.raises(ModelMismatchError):
            ModelBundle.load(d)

    def test_malformed_config_rejected(self, toy_bundle, tmp_path):
        import os
        d = str(tmp_path / "m")
        toy_bundle.save(d)
        open(os.path.join(d, "config.txt"), "w").write("not a config\n")
        with pytest.raises(FormatError):
            ModelBundle.load(d)

    def test_modules_roles(self, toy_bundle):
        mods = toy_bundle.modules()
        assert set(mods) == {"codec_sparse", "codec_residue", "filter_bl",
                             "filter_pseudo", "filter_el"}
