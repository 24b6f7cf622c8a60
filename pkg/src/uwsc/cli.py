"""Command-line front end for the layered underwater codec.

One executable, subcommand per workflow stage. Every command prints
machine-parseable key=value lines on stdout and diagnostics on stderr.
Exit statuses: 0 success, 1 usage error, 2 data or format error,
3 numeric failure.
"""

import argparse
import os
import sys

import numpy as np

from .codec import CodecConfig
from .errors import CodecError, GraphError, NumericError
from .filters import FilterConfig
from .imaging import load_image, reference_enhance, save_image, split_blocks, to_planes
from .metrics import (RdCurve, RdPoint, bd_rate, psnr, rd_report,
                      read_results_csv, ssim, uiqm, write_results_csv)
from .pipeline import LAMBDA_VALUES, ModelBundle, decode, encode, inspect
from .sparse import Dictionary, derive_d2, export_dictionary_diff, train_d1
from .training import TrainConfig, checkpoint_save, train_models

DEFAULT_SEED = 0
_METRIC_NAMES = ("psnr", "ssim", "uiqm")


class _UsageError(Exception):
    pass


def _say(key, value):
    if isinstance(value, float):
        print("%s=%.6g" % (key, value))
    else:
        print("%s=%s" % (key, value))


def _outpath(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    return path


def _parse_layer(s):
    layer = s.lower()
    if layer not in ("bl", "el"):
        raise _UsageError("--layer must be BL or EL, got %r" % s)
    return layer


def _parse_lambda(value):
    if value not in LAMBDA_VALUES:
        raise _UsageError("--lambda must be one of %s, got %r"
                          % (",".join(str(v) for v in LAMBDA_VALUES), value))
    return value


def _model_root(args):
    root = getattr(args, "models", None) or os.environ.get("UWSC_MODEL_DIR")
    if not root:
        raise _UsageError("no model directory: pass --models or set UWSC_MODEL_DIR")
    return root


def _bundle_dir(root, lam):
    """Model root layout: either <root>/lambda<value>/ per operating
    point, or <root> itself holding a single bundle."""
    cand = os.path.join(root, "lambda%d" % lam)
    if os.path.isdir(cand):
        return cand
    if os.path.isfile(os.path.join(root, "config.txt")):
        return root
    raise _UsageError("model directory %s not found" % cand)


def _load_bundle(root, lam):
    return ModelBundle.load(_bundle_dir(root, lam))


def _load_pairs(pair_args):
    pairs = []
    for orig_path, enh_path in pair_args:
        pairs.append((load_image(orig_path), load_image(enh_path)))
    return pairs


# ---------------------------------------------------------------------------
# Commands.

def cmd_train_dict(args):
    chunks = []
    for path in args.images:
        planes = to_planes(load_image(path))
        chunks.append(split_blocks(planes))
    patches = np.concatenate(chunks, axis=1)
    d, history = train_d1(patches, n_atoms=args.atoms,
                          iterations=args.iterations, k=args.k,
                          seed=args.seed)
    d.save(_outpath(args.out))
    _say("patches", patches.shape[1])
    _say("atoms", args.atoms)
    for ch, name in enumerate("rgb"):
        _say("mse_%s" % name, float(history[ch, -1]))
    _say("out", args.out)
    return 0


def cmd_derive_dict(args):
    if not args.pair:
        raise _UsageError("derive-dict needs at least one --pair ORIG ENH")
    d1 = Dictionary.load(args.d1)
    k = (args.k, args.k_max) if args.k_max is not None else args.k
    d2 = derive_d2(_load_pairs(args.pair), d1, k=k, seed=args.seed)
    d2.save(_outpath(args.out))
    _say("atoms", d2.n_atoms)
    _say("mean_atom_norm", float(np.linalg.norm(d2.data, axis=1).mean()))
    _say("out", args.out)
    return 0


def cmd_train_codec(args):
    lam = _parse_lambda(args.lam)
    if args.pair:
        pairs = _load_pairs(args.pair)
    elif args.inputs:
        pairs = [(img, reference_enhance(img))
                 for img in (load_image(p) for p in args.inputs)]
    else:
        raise _UsageError("train-codec needs --pair ORIG ENH or --inputs")

    if args.init_models:
        bundle = ModelBundle.load(args.init_models)
        if bundle.lam != lam:
            raise _UsageError("--lambda %d does not match checkpoint lambda %d"
                              % (lam, bundle.lam))
    else:
        cc = CodecConfig(width=args.codec_width,
                         latent_channels=args.latent_channels,
                         hyper_channels=args.hyper_channels)
        fc = FilterConfig(width=args.filter_width)
        bundle = ModelBundle.new(lam=lam, codec_config=cc, filter_config=fc,
                                 seed=args.seed)
    if args.d1:
        bundle.d1 = Dictionary.load(args.d1)
    if args.d2:
        bundle.d2 = Dictionary.load(args.d2)

    config = TrainConfig(lam=lam, patch=args.patch, batch=args.batch,
                         lr=args.lr, seed=args.seed, epochs=args.epochs)
    history = train_models(pairs, bundle, config,
                           log_path=_outpath(args.log) if args.log else None)
    out_dir = os.path.join(args.out, "lambda%d" % lam)
    checkpoint_save(out_dir, bundle)
    _say("steps", len(history))
    if history:
        _say("loss_first", history[0].total)
        _say("loss_last", history[-1].total)
    _say("checkpoint", out_dir)
    return 0


def cmd_encode(args):
    layer = _parse_layer(args.layer)
    lam = _parse_lambda(args.lam)
    if not 1 <= args.k <= 256:
        raise _UsageError("--k must lie in [1, 256], got %d" % args.k)
    bundle = _load_bundle(_model_root(args), lam)
    img = load_image(args.input)
    result = encode(img, bundle, k=args.k, layers=layer)
    with open(_outpath(args.out), "wb") as f:
        f.write(result.bitstream)
    _say("layer", layer)
    _say("k", args.k)
    _say("lambda", lam)
    _say("plane_zero_fraction", result.plane_zero_fraction)
    _say("bpp_bl", result.bpp_bl)
    _say("bpp_total", result.bpp_total)
    _say("bytes", len(result.bitstream))
    _say("out", args.out)
    return 0


def cmd_decode(args):
    layer = _parse_layer(args.layer)
    with open(args.input, "rb") as f:
        bits = f.read()
    info = inspect(bits)
    bundle = _load_bundle(_model_root(args), info["lambda"])
    img = decode(bits, bundle, layer=layer)
    save_image(_outpath(args.out), img)
    _say("layer", layer)
    _say("lambda", info["lambda"])
    _say("k", info["k"])
    _say("width", img.width)
    _say("height", img.height)
    _say("out", args.out)
    return 0


def cmd_eval(args):
    names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for name in names:
        if name not in _METRIC_NAMES:
            raise _UsageError("unknown metric %r" % name)
    if not names:
        raise _UsageError("no metrics requested")
    need_ref = bool(args.csv) or any(m in names for m in ("psnr", "ssim"))
    if need_ref and not args.ref:
        raise _UsageError("--ref is required for psnr/ssim or --csv output")

    test = load_image(args.test)
    ref = load_image(args.ref) if args.ref else None
    values = {}
    if "psnr" in names or args.csv:
        values["psnr"] = psnr(ref, test)
    if "ssim" in names or args.csv:
        values["ssim"] = ssim(ref, test)
    if "uiqm" in names or args.csv:
        total, uicm, uism, uiconm = uiqm(test)
        values.update(uiqm=total, uicm=uicm, uism=uism, uiconm=uiconm)
    for name in names:
        _say(name, values[name])

    if args.csv:
        row = {
            "image_id": args.image_id or os.path.basename(args.test),
            "lambda": args.lam if args.lam is not None else 0,
            "layer": args.layer.lower(),
            "bpp": args.bpp,
            "psnr": values["psnr"],
            "ssim": values["ssim"],
            "uiqm": values["uiqm"],
            "uicm": values["uicm"],
            "uism": values["uism"],
            "uiconm": values["uiconm"],
        }
        rows = read_results_csv(args.csv) if os.path.exists(args.csv) else []
        rows.append(row)
        write_results_csv(_outpath(args.csv), rows)
        _say("csv", args.csv)
    return 0


def _rd_one(img_path, lam, root, k):
    """Encode one image at one operating point; returns both layer rows."""
    img = load_image(img_path)
    ref = reference_enhance(img)
    bundle = _load_bundle(root, lam)
    result = encode(img, bundle, k=k, layers="el")
    rows = []
    for layer, out_img, bpp in (("bl", result.o_bl, result.bpp_bl),
                                ("el", result.o_el, result.bpp_total)):
        total, uicm, uism, uiconm = uiqm(out_img)
        rows.append({
            "image_id": os.path.basename(img_path),
            "lambda": lam,
            "layer": layer,
            "bpp": bpp,
            "psnr": psnr(ref, out_img),
            "ssim": ssim(ref, out_img),
            "uiqm": total,
            "uicm": uicm,
            "uism": uism,
            "uiconm": uiconm,
        })
    return rows


def cmd_rd_curve(args):
    lambdas = ([_parse_lambda(int(v)) for v in args.lambdas.split(",")]
               if args.lambdas else list(LAMBDA_VALUES))
    if not 1 <= args.k <= 256:
        raise _UsageError("--k must lie in [1, 256], got %d" % args.k)
    root = _model_root(args)
    tasks = [(path, lam) for path in args.inputs for lam in lambdas]

    rows = []
    if args.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            for chunk in pool.map(lambda t: _rd_one(t[0], t[1], root, args.k),
                                  tasks):
                rows.extend(chunk)
    else:
        for path, lam in tasks:
            rows.extend(_rd_one(path, lam, root, args.k))

    rd_report(rows, _outpath(args.out_csv), _outpath(args.out_svg),
              metric=args.metric)
    _say("rows", len(rows))
    _say("csv", args.out_csv)
    _say("svg", args.out_svg)
    return 0


def _curve_from_csv(path, layer, metric):
    rows = [r for r in read_results_csv(path) if r["layer"] == layer]
    if not rows:
        raise _UsageError("no %r rows in %s" % (layer, path))
    by_lambda = {}
    for row in rows:
        by_lambda.setdefault(row["lambda"], []).append(row)
    points = []
    for lam in sorted(by_lambda):
        group = by_lambda[lam]
        bpp = float(np.mean([r["bpp"] for r in group]))
        quality = float(np.mean([r[metric] for r in group]))
        points.append(RdPoint(bpp=bpp, quality=quality, metric=metric))
    points.sort(key=lambda p: p.bpp)
    if len(points) < 4:
        raise _UsageError("curve from %s has %d points, need at least 4"
                          % (path, len(points)))
    return RdCurve(tuple(points))


def cmd_bdrate(args):
    if args.metric not in _METRIC_NAMES:
        raise _UsageError("unknown metric %r" % args.metric)
    layer = args.layer.lower()
    anchor = _curve_from_csv(args.anchor, layer, args.metric)
    test = _curve_from_csv(args.test, layer, args.metric)
    value = bd_rate(anchor, test)
    if value is None:
        _say("bdrate", "NA")
    else:
        _say("bdrate", value)
    return 0


def cmd_enhance_ref(args):
    img = load_image(args.input)
    save_image(_outpath(args.out), reference_enhance(img))
    _say("out", args.out)
    return 0


def cmd_inspect_dict(args):
    d1 = Dictionary.load(args.d1)
    norms = np.linalg.norm(d1.data, axis=1)
    _say("channels", d1.channels)
    _say("atom_dim", d1.atom_dim)
    _say("atoms", d1.n_atoms)
    _say("unit_norm", str(bool(np.allclose(norms, 1.0, atol=1e-6))).lower())
    _say("mean_atom_norm", float(norms.mean()))
    if args.d2:
        d2 = Dictionary.load(args.d2)
        n2 = np.linalg.norm(d2.data, axis=1)
        _say("d2_mean_atom_norm", float(n2.mean()))
        _say("dict_rms_difference",
             float(np.sqrt(((d1.data - d2.data) ** 2).mean())))
        if args.out_prefix:
            for path in export_dictionary_diff(d1, d2, args.out_prefix):
                _say("mosaic", path)
    return 0


# ---------------------------------------------------------------------------
# Parser.

def build_parser():
    p = argparse.ArgumentParser(
        prog="uwsc",
        description="Layered sparse-plus-learned codec for underwater images")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("train-dict", help="learn the base dictionary")
    q.add_argument("--images", nargs="+", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--atoms", type=int, default=256)
    q.add_argument("--iterations", type=int, default=10)
    q.add_argument("--k", type=int, default=8)
    q.add_argument("--seed", type=int, default=DEFAULT_SEED)
    q.set_defaults(func=cmd_train_dict)

    q = sub.add_parser("derive-dict", help="derive the enhanced dictionary")
    q.add_argument("--pair", nargs=2, action="append", metavar=("ORIG", "ENH"))
    q.add_argument("--d1", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--k", type=int, default=32)
    q.add_argument("--k-max", type=int,
                   help="sample k per block from [--k, --k-max]")
    q.add_argument("--seed", type=int, default=DEFAULT_SEED)
    q.set_defaults(func=cmd_derive_dict)

    q = sub.add_parser("train-codec", help="train codecs and filters")
    q.add_argument("--pair", nargs=2, action="append", metavar=("ORIG", "ENH"))
    q.add_argument("--inputs", nargs="+")
    q.add_argument("--lambda", dest="lam", type=int, required=True)
    q.add_argument("--out", required=True, help="model root directory")
    q.add_argument("--init-models", help="bundle directory to resume from")
    q.add_argument("--d1")
    q.add_argument("--d2")
    q.add_argument("--epochs", type=int, default=1)
    q.add_argument("--patch", type=int, default=64)
    q.add_argument("--batch", type=int, default=4)
    q.add_argument("--lr", type=float, default=1e-4)
    q.add_argument("--codec-width", type=int, default=8)
    q.add_argument("--latent-channels", type=int, default=8)
    q.add_argument("--hyper-channels", type=int, default=8)
    q.add_argument("--filter-width", type=int, default=4)
    q.add_argument("--log", help="training log CSV path")
    q.add_argument("--seed", type=int, default=DEFAULT_SEED)
    q.set_defaults(func=cmd_train_codec)

    q = sub.add_parser("encode", help="encode an image to a bitstream")
    q.add_argument("--input", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--layer", default="EL")
    q.add_argument("--k", type=int, default=128)
    q.add_argument("--lambda", dest="lam", type=int, default=64)
    q.add_argument("--models")
    q.add_argument("--seed", type=int, default=DEFAULT_SEED)
    q.set_defaults(func=cmd_encode)

    q = sub.add_parser("decode", help="decode a bitstream to an image")
    q.add_argument("--input", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--layer", default="EL")
    q.add_argument("--models")
    q.set_defaults(func=cmd_decode)

    q = sub.add_parser("eval", help="image quality metrics")
    q.add_argument("--ref")
    q.add_argument("--test", required=True)
    q.add_argument("--metrics", default="psnr,ssim,uiqm")
    q.add_argument("--csv", help="append a results row to this CSV")
    q.add_argument("--image-id")
    q.add_argument("--lambda", dest="lam", type=int)
    q.add_argument("--layer", default="el")
    q.add_argument("--bpp", type=float, default=0.0)
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("rd-curve", help="sweep lambdas, write CSV and SVG")
    q.add_argument("--inputs", nargs="+", required=True)
    q.add_argument("--models")
    q.add_argument("--lambdas", help="comma list, default all")
    q.add_argument("--k", type=int, default=128)
    q.add_argument("--metric", default="uiqm")
    q.add_argument("--out-csv", required=True)
    q.add_argument("--out-svg", required=True)
    q.add_argument("--jobs", type=int, default=1)
    q.set_defaults(func=cmd_rd_curve)

    q = sub.add_parser("bdrate", help="BD-rate between two result CSVs")
    q.add_argument("--anchor", required=True)
    q.add_argument("--test", required=True)
    q.add_argument("--metric", default="psnr")
    q.add_argument("--layer", default="el")
    q.set_defaults(func=cmd_bdrate)

    q = sub.add_parser("enhance-ref", help="classical reference enhancer")
    q.add_argument("--input", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_enhance_ref)

    q = sub.add_parser("inspect-dict", help="dictionary stats and mosaics")
    q.add_argument("--d1", required=True)
    q.add_argument("--d2")
    q.add_argument("--out-prefix")
    q.set_defaults(func=cmd_inspect_dict)

    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage problems; fold into our usage status
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except _UsageError as e:
        print("usage error: %s" % e, file=sys.stderr)
        return 1
    except (NumericError, GraphError) as e:
        print("numeric error: %s" % e, file=sys.stderr)
        return 3
    except CodecError as e:
        print("error: %s" % e, file=sys.stderr)
        return 2
    except OSError as e:
        print("io error: %s" % e, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
