"""Layered sparse-plus-learned compression for underwater images.

The base layer codes an image as exact-sparsity coefficient planes
against a natural-image dictionary and reconstructs against an
enhanced dictionary, so decompression and enhancement happen in one
step. The enhancement layer codes the residue to a pseudo-enhanced
target. Both layers share a from-scratch autodiff engine, hyperprior
entropy models, and a range coder.
"""

from .codec import CodecConfig, CodecModel, compress, decompress
from .entropy import RateReport, quantize, total_rate
from .errors import (CodecError, DataError, DimensionError, FormatError,
                     GraphError, HashMismatchError, ModelMismatchError,
                     NumericError, ShapeError, StreamError)
from .filters import FilterConfig, FilterModel
from .imaging import (RgbImage, ImagePlanes, load_image, pad_to_multiple,
                      reference_enhance, save_image, to_planes, from_planes)
from .metrics import (RdCurve, RdPoint, bd_rate, psnr, rd_report, ssim, uiqm)
from .pipeline import (LAMBDA_VALUES, EncodeResult, ModelBundle, decode,
                       encode, inspect, report_rates)
from .sparse import (CoefficientPlanes, Dictionary, derive_d2, encode_image,
                     decode_image, evaluate_enhanced_dictionary, omp,
                     omp_batch, train_d1)
from .training import (Adam, LossBreakdown, TrainConfig, boundary_extract,
                       checkpoint_load, checkpoint_save, compute_loss,
                       train_models, train_step)

__version__ = "0.1.0"

__all__ = [
    "Adam", "CodecConfig", "CodecError", "CodecModel", "CoefficientPlanes",
    "DataError", "Dictionary", "DimensionError", "EncodeResult",
    "FilterConfig", "FilterModel", "FormatError", "GraphError",
    "HashMismatchError", "ImagePlanes", "LAMBDA_VALUES", "LossBreakdown",
    "ModelBundle", "ModelMismatchError", "NumericError", "RateReport",
    "RdCurve", "RdPoint", "RgbImage", "ShapeError", "StreamError",
    "TrainConfig", "bd_rate", "boundary_extract", "checkpoint_load",
    "checkpoint_save", "compress", "compute_loss", "decode", "decode_image",
    "decompress", "derive_d2", "encode", "encode_image",
    "evaluate_enhanced_dictionary", "from_planes", "inspect", "load_image",
    "omp", "omp_batch", "pad_to_multiple", "psnr", "quantize",
    "rd_report", "reference_enhance", "report_rates", "save_image", "ssim",
    "to_planes", "total_rate", "train_d1", "train_models", "train_step",
    "uiqm",
]
