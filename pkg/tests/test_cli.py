"""Command-line surface: exit statuses, key=value output contracts,
and smoke runs of every subcommand against toy models."""

import os

import numpy as np
import pytest

from conftest import TOY_CODEC, TOY_FILTER, underwater_image
from uwsc.cli import main
from uwsc.imaging import load_image, reference_enhance, save_image
from uwsc.metrics import write_results_csv
from uwsc.pipeline import ModelBundle, decode
from uwsc.sparse import Dictionary


def said(capsys):
    """Parse the key=value stdout lines of the last command."""
    out = {}
    captured = capsys.readouterr()
    for line in captured.out.splitlines():
        key, _, value = line.partition("=")
        out[key] = value
    return out, captured.err


@pytest.fixture(scope="session")
def cli_env(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    bundle = ModelBundle.new(lam=64, codec_config=TOY_CODEC,
                             filter_config=TOY_FILTER, seed=7)
    models = root / "models"
    bundle.save(str(models / "lambda64"))
    img = underwater_image(500, 80, 70)
    save_image(str(root / "scene.ppm"), img)
    save_image(str(root / "scene_enh.ppm"), reference_enhance(img))
    img2 = underwater_image(501, 320, 320)
    save_image(str(root / "wide.ppm"), img2)
    save_image(str(root / "wide_enh.ppm"), reference_enhance(img2))
    return {"root": root, "models": str(models), "bundle": bundle,
            "scene": str(root / "scene.ppm"),
            "scene_enh": str(root / "scene_enh.ppm"),
            "wide": str(root / "wide.ppm"),
            "wide_enh": str(root / "wide_enh.ppm")}


class TestParsing:
    def test_no_arguments_is_usage_failure(self, capsys):
        assert main([]) == 1
        capsys.readouterr()

    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1
        capsys.readouterr()

    def test_bad_layer(self, cli_env, capsys, tmp_path):
        rc = main(["encode", "--input", cli_env["scene"],
                   "--out", str(tmp_path / "x.uws"), "--layer", "full",
                   "--models", cli_env["models"]])
        _, err = said(capsys)
        assert rc == 1
        assert "layer" in err

    def test_bad_lambda(self, cli_env, capsys, tmp_path):
        rc = main(["encode", "--input", cli_env["scene"],
                   "--out", str(tmp_path / "x.uws"), "--lambda", "5",
                   "--models", cli_env["models"]])
        assert rc == 1
        capsys.readouterr()

    def test_bad_k(self, cli_env, capsys, tmp_path):
        rc = main(["encode", "--input", cli_env["scene"],
                   "--out", str(tmp_path / "x.uws"), "--k", "0",
                   "--models", cli_env["models"]])
        assert rc == 1
        capsys.readouterr()

    def test_missing_model_root(self, capsys, monkeypatch, cli_env, tmp_path):
        monkeypatch.delenv("UWSC_MODEL_DIR", raising=False)
        rc = main(["encode", "--input", cli_env["scene"],
                   "--out", str(tmp_path / "x.uws")])
        _, err = said(capsys)
        assert rc == 1
        assert "UWSC_MODEL_DIR" in err

    def test_missing_bundle_names_directory(self, capsys, cli_env, tmp_path):
        empty = tmp_path / "nothing"
        empty.mkdir()
        rc = main(["encode", "--input", cli_env["scene"],
                   "--out", str(tmp_path / "x.uws"), "--models", str(empty)])
        _, err = said(capsys)
        assert rc == 1
        assert "lambda64" in err


class TestEncodeDecode:
    def test_encode_reports_rates_and_zero_fraction(self, cli_env, capsys,
                                                    tmp_path):
        out = str(tmp_path / "scene.uws")
        rc = main(["encode", "--input", cli_env["scene"], "--out", out,
                   "--layer", "EL", "--k", "32",
                   "--models", cli_env["models"]])
        keys, _ = said(capsys)
        assert rc == 0
        assert keys["layer"] == "el"
        assert keys["k"] == "32"
        assert keys["lambda"] == "64"
        # exact-K coding: 1 - 32/256 of plane entries are zero
        assert keys["plane_zero_fraction"] == "0.875"
        assert int(keys["bytes"]) == os.path.getsize(out)
        assert 0 < float(keys["bpp_bl"]) < float(keys["bpp_total"])

    def test_decode_round_trip_matches_library(self, cli_env, capsys,
                                               tmp_path):
        blob_path = str(tmp_path / "scene.uws")
        main(["encode", "--input", cli_env["scene"], "--out", blob_path,
              "--k", "96", "--models", cli_env["models"]])
        capsys.readouterr()
        out_img = str(tmp_path / "decoded.ppm")
        rc = main(["decode", "--input", blob_path, "--out", out_img,
                   "--layer", "EL", "--models", cli_env["models"]])
        keys, _ = said(capsys)
        assert rc == 0
        assert keys["width"] == "70" and keys["height"] == "80"
        with open(blob_path, "rb") as f:
            want = decode(f.read(), cli_env["bundle"], layer="el")
        got = load_image(out_img)
        np.testing.assert_array_equal(got.data, want.data)

    def test_base_layer_decode_from_layered_stream(self, cli_env, capsys,
                                                   tmp_path):
        blob_path = str(tmp_path / "scene.uws")
        main(["encode", "--input", cli_env["scene"], "--out", blob_path,
              "--k", "96", "--models", cli_env["models"]])
        capsys.readouterr()
        rc = main(["decode", "--input", blob_path,
                   "--out", str(tmp_path / "bl.ppm"), "--layer", "bl",
                   "--models", cli_env["models"]])
        assert rc == 0
        capsys.readouterr()

    def test_enhancement_decode_of_base_only_stream(self, cli_env, capsys,
                                                    tmp_path):
        blob_path = str(tmp_path / "bl.uws")
        main(["encode", "--input", cli_env["scene"], "--out", blob_path,
              "--layer", "BL", "--k", "96", "--models", cli_env["models"]])
        capsys.readouterr()
        rc = main(["decode", "--input", blob_path,
                   "--out", str(tmp_path / "el.ppm"), "--layer", "el",
                   "--models", cli_env["models"]])
        _, err = said(capsys)
        assert rc == 2
        assert "enhancement" in err

    def test_corrupt_header_is_a_format_failure(self, cli_env, capsys,
                                                tmp_path):
        blob_path = tmp_path / "scene.uws"
        main(["encode", "--input", cli_env["scene"], "--out", str(blob_path),
              "--k", "96", "--models", cli_env["models"]])
        capsys.readouterr()
        blob = bytearray(blob_path.read_bytes())
        blob[0] ^= 0xFF
        blob_path.write_bytes(bytes(blob))
        rc = main(["decode", "--input", str(blob_path),
                   "--out", str(tmp_path / "x.ppm"),
                   "--models", cli_env["models"]])
        assert rc == 2
        capsys.readouterr()

    def test_corrupt_payload_is_a_stream_failure(self, cli_env, capsys,
                                                 tmp_path):
        blob_path = tmp_path / "scene.uws"
        main(["encode", "--input", cli_env["scene"], "--out", str(blob_path),
              "--k", "96", "--models", cli_env["models"]])
        capsys.readouterr()
        blob = bytearray(blob_path.read_bytes())
        blob[-2] ^= 0xFF
        blob_path.write_bytes(bytes(blob))
        rc = main(["decode", "--input", str(blob_path),
                   "--out", str(tmp_path / "x.ppm"), "--layer", "el",
                   "--models", cli_env["models"]])
        assert rc == 2
        capsys.readouterr()

    def test_model_dir_from_environment(self, cli_env, capsys, monkeypatch,
                                        tmp_path):
        monkeypatch.setenv("UWSC_MODEL_DIR", cli_env["models"])
        rc = main(["encode", "--input", cli_env["scene"],
                   "--out", str(tmp_path / "x.uws"), "--k", "96"])
        assert rc == 0
        capsys.readouterr()

    def test_single_bundle_root_layout(self, cli_env, capsys, tmp_path):
        bundle_dir = os.path.join(cli_env["models"], "lambda64")
        rc = main(["encode", "--input", cli_env["scene"],
                   "--out", str(tmp_path / "x.uws"), "--k", "96",
                   "--models", bundle_dir])
        assert rc == 0
        capsys.readouterr()


class TestEval:
    def test_no_reference_metric_alone(self, cli_env, capsys):
        rc = main(["eval", "--test", cli_env["scene"], "--metrics", "uiqm"])
        keys, _ = said(capsys)
        assert rc == 0
        assert "uiqm" in keys and "psnr" not in keys
        float(keys["uiqm"])

    def test_full_reference_metrics(self, cli_env, capsys):
        rc = main(["eval", "--test", cli_env["scene"],
                   "--ref", cli_env["scene_enh"]])
        keys, _ = said(capsys)
        assert rc == 0
        assert float(keys["psnr"]) > 0
        assert -1.0 <= float(keys["ssim"]) <= 1.0

    def test_psnr_without_reference(self, cli_env, capsys):
        rc = main(["eval", "--test", cli_env["scene"], "--metrics", "psnr"])
        _, err = said(capsys)
        assert rc == 1
        assert "--ref" in err

    def test_unknown_metric(self, cli_env, capsys):
        rc = main(["eval", "--test", cli_env["scene"], "--metrics", "vmaf"])
        assert rc == 1
        capsys.readouterr()

    def test_empty_metric_list(self, cli_env, capsys):
        rc = main(["eval", "--test", cli_env["scene"], "--metrics", ","])
        assert rc == 1
        capsys.readouterr()

    def test_csv_accumulates_rows(self, cli_env, capsys, tmp_path):
        from uwsc.metrics import read_results_csv
        csv_path = str(tmp_path / "results.csv")
        for lam in (4, 8):
            rc = main(["eval", "--test", cli_env["scene"],
                       "--ref", cli_env["scene_enh"], "--metrics", "uiqm",
                       "--csv", csv_path, "--lambda", str(lam),
                       "--bpp", "0.25", "--image-id", "scene"])
            assert rc == 0
            capsys.readouterr()
        rows = read_results_csv(csv_path)
        assert len(rows) == 2
        assert rows[0]["image_id"] == "scene"
        assert {r["lambda"] for r in rows} == {4, 8}
        assert rows[0]["bpp"] == 0.25


def _quality_rows(bpps, psnrs):
    rows = []
    for lam, bpp, q in zip((4, 16, 64, 256), bpps, psnrs):
        rows.append({"image_id": "synthetic", "lambda": lam, "layer": "el",
                     "bpp": bpp, "psnr": q, "ssim": 0.9, "uiqm": 1.0,
                     "uicm": 1.0, "uism": 1.0, "uiconm": 1.0})
        # decoy rows on the other layer must not leak into the curve
        rows.append({"image_id": "synthetic", "lambda": lam, "layer": "bl",
                     "bpp": bpp * 10, "psnr": q - 20, "ssim": 0.5,
                     "uiqm": 0.5, "uicm": 0.5, "uism": 0.5, "uiconm": 0.5})
    return rows


class TestBdrate:
    def test_identical_curves_give_zero(self, capsys, tmp_path):
        path = str(tmp_path / "curve.csv")
        write_results_csv(path, _quality_rows([0.1, 0.2, 0.4, 0.8],
                                              [30.0, 33.0, 36.0, 39.0]))
        rc = main(["bdrate", "--anchor", path, "--test", path])
        keys, _ = said(capsys)
        assert rc == 0
        assert float(keys["bdrate"]) == 0.0

    def test_doubled_rate_costs_one_hundred_percent(self, capsys, tmp_path):
        a = str(tmp_path / "anchor.csv")
        t = str(tmp_path / "test.csv")
        write_results_csv(a, _quality_rows([0.1, 0.2, 0.4, 0.8],
                                           [30.0, 33.0, 36.0, 39.0]))
        write_results_csv(t, _quality_rows([0.2, 0.4, 0.8, 1.6],
                                           [30.0, 33.0, 36.0, 39.0]))
        rc = main(["bdrate", "--anchor", a, "--test", t])
        keys, _ = said(capsys)
        assert rc == 0
        assert abs(float(keys["bdrate"]) - 100.0) < 1e-3

    def test_disjoint_quality_ranges_report_na(self, capsys, tmp_path):
        a = str(tmp_path / "anchor.csv")
        t = str(tmp_path / "test.csv")
        write_results_csv(a, _quality_rows([0.1, 0.2, 0.4, 0.8],
                                           [30.0, 33.0, 36.0, 39.0]))
        write_results_csv(t, _quality_rows([0.1, 0.2, 0.4, 0.8],
                                           [50.0, 53.0, 56.0, 59.0]))
        rc = main(["bdrate", "--anchor", a, "--test", t])
        keys, _ = said(capsys)
        assert rc == 0
        assert keys["bdrate"] == "NA"

    def test_too_few_points(self, capsys, tmp_path):
        path = str(tmp_path / "short.csv")
        rows = _quality_rows([0.1, 0.2, 0.4, 0.8], [30.0, 33.0, 36.0, 39.0])
        write_results_csv(path, rows[:4])  # only two el rows
        rc = main(["bdrate", "--anchor", path, "--test", path])
        assert rc == 1
        capsys.readouterr()

    def test_missing_layer_rows(self, capsys, tmp_path):
        path = str(tmp_path / "curve.csv")
        rows = [r for r in _quality_rows([0.1, 0.2, 0.4, 0.8],
                                         [30.0, 33.0, 36.0, 39.0])
                if r["layer"] == "el"]
        write_results_csv(path, rows)
        rc = main(["bdrate", "--anchor", path, "--test", path,
                   "--layer", "bl"])
        assert rc == 1
        capsys.readouterr()


class TestDictionaryCommands:
    def test_train_inspect_derive_chain(self, cli_env, capsys, tmp_path):
        d1_path = str(tmp_path / "d1.dict")
        rc = main(["train-dict", "--images", cli_env["wide"],
                   cli_env["wide_enh"], "--out", d1_path, "--atoms", "64",
                   "--iterations", "2", "--k", "4"])
        keys, _ = said(capsys)
        assert rc == 0
        assert keys["patches"] == "800"
        assert keys["atoms"] == "64"
        assert float(keys["mse_r"]) >= 0.0
        d1 = Dictionary.load(d1_path)
        assert d1.n_atoms == 64

        rc = main(["inspect-dict", "--d1", d1_path])
        keys, _ = said(capsys)
        assert rc == 0
        assert keys["unit_norm"] == "true"
        assert keys["atoms"] == "64"
        assert keys["channels"] == "3"
        assert keys["atom_dim"] == "256"

        d2_path = str(tmp_path / "d2.dict")
        rc = main(["derive-dict", "--pair", cli_env["wide"],
                   cli_env["wide_enh"], "--d1", d1_path, "--out", d2_path,
                   "--k", "4", "--k-max", "12"])
        keys, _ = said(capsys)
        assert rc == 0
        assert keys["atoms"] == "64"
        Dictionary.load(d2_path)

        prefix = str(tmp_path / "mosaic")
        rc = main(["inspect-dict", "--d1", d1_path, "--d2", d2_path,
                   "--out-prefix", prefix])
        keys, _ = said(capsys)
        assert rc == 0
        assert float(keys["dict_rms_difference"]) > 0.0
        assert "mosaic" in keys

    def test_derive_without_pairs(self, cli_env, capsys, tmp_path):
        d1_path = str(tmp_path / "d1.dict")
        main(["train-dict", "--images", cli_env["wide"], "--out", d1_path,
              "--atoms", "32", "--iterations", "1", "--k", "4"])
        capsys.readouterr()
        rc = main(["derive-dict", "--d1", d1_path,
                   "--out", str(tmp_path / "d2.dict")])
        assert rc == 1
        capsys.readouterr()

    def test_missing_dictionary_file(self, capsys, tmp_path):
        rc = main(["inspect-dict", "--d1", str(tmp_path / "absent.dict")])
        assert rc == 2
        capsys.readouterr()


class TestTrainCodec:
    def test_smoke_run_writes_checkpoint(self, cli_env, capsys, tmp_path):
        out_root = str(tmp_path / "trained")
        log = str(tmp_path / "train.csv")
        rc = main(["train-codec", "--inputs", cli_env["scene"],
                   "--lambda", "64", "--out", out_root, "--epochs", "1",
                   "--batch", "1", "--log", log])
        keys, _ = said(capsys)
        assert rc == 0
        assert keys["steps"] == "1"
        float(keys["loss_first"])
        loaded = ModelBundle.load(os.path.join(out_root, "lambda64"))
        assert loaded.lam == 64
        assert os.path.exists(log)

    def test_requires_some_input(self, capsys, tmp_path):
        rc = main(["train-codec", "--lambda", "64",
                   "--out", str(tmp_path / "x")])
        assert rc == 1
        capsys.readouterr()

    def test_resume_lambda_mismatch(self, cli_env, capsys, tmp_path):
        rc = main(["train-codec", "--inputs", cli_env["scene"],
                   "--lambda", "128", "--out", str(tmp_path / "x"),
                   "--init-models",
                   os.path.join(cli_env["models"], "lambda64")])
        _, err = said(capsys)
        assert rc == 1
        assert "lambda" in err
        capsys.readouterr()


class TestReportingCommands:
    def test_rd_curve_writes_csv_and_svg(self, cli_env, capsys, tmp_path):
        from uwsc.metrics import read_results_csv
        csv_path = str(tmp_path / "rd.csv")
        svg_path = str(tmp_path / "rd.svg")
        rc = main(["rd-curve", "--inputs", cli_env["scene"],
                   "--models", os.path.join(cli_env["models"], "lambda64"),
                   "--lambdas", "4,16,64,256", "--k", "96",
                   "--metric", "uiqm", "--jobs", "2",
                   "--out-csv", csv_path, "--out-svg", svg_path])
        keys, _ = said(capsys)
        assert rc == 0
        assert keys["rows"] == "8"
        rows = read_results_csv(csv_path)
        assert len(rows) == 8
        assert {r["layer"] for r in rows} == {"bl", "el"}
        with open(svg_path) as f:
            assert "<svg" in f.read()

    def test_enhance_ref_writes_image(self, cli_env, capsys, tmp_path):
        out = str(tmp_path / "enh.ppm")
        rc = main(["enhance-ref", "--input", cli_env["scene"], "--out", out])
        keys, _ = said(capsys)
        assert rc == 0
        got = load_image(out)
        orig = load_image(cli_env["scene"])
        assert got.data.shape == orig.data.shape
        assert not np.array_equal(got.data, orig.data)
