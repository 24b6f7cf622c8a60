"""Quality metrics and rate-distortion reporting.

PSNR and SSIM are full-reference; UIQM is the no-reference underwater
measure built from colorfulness (UICM), sharpness (UISM), and contrast
(UIConM) components. BD-rate compares two rate-distortion curves by
the standard cubic log-rate fit. Every constant that parameterizes
UIQM lives in UIQM_CONSTANTS.
"""

import csv
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, DimensionError
from .imaging import LUMA_WEIGHTS, RgbImage

PSNR_INF = float("inf")

# All UIQM tuning constants in one place. Component weights and the
# UICM mean/variance coefficients follow the published metric; alpha
# is the two-sided trim fraction; blocks are 8x8 with right/bottom
# truncation; eps guards every logarithm and quotient.
UIQM_CONSTANTS = {
    "c_uicm": 0.0282,
    "c_uism": 0.2953,
    "c_uiconm": 3.5753,
    "alpha_trim": 0.1,
    "uicm_mu_coeff": -0.0268,
    "uicm_sigma_coeff": 0.1586,
    "uism_channel_weights": LUMA_WEIGHTS,
    "block": 8,
    "eps": 1e-6,
}


def _as_rgb_array(img):
    if isinstance(img, RgbImage):
        return img.data.astype(np.float64)
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[2] != 3:
        raise DimensionError("expected (H, W, 3) image, got %r" % (a.shape,))
    return a.astype(np.float64)


def _luminance01(img):
    a = _as_rgb_array(img) / 255.0
    wr, wg, wb = LUMA_WEIGHTS
    return wr * a[:, :, 0] + wg * a[:, :, 1] + wb * a[:, :, 2]


# ---------------------------------------------------------------------------
# PSNR / SSIM.

def psnr(a, b, peak=255.0):
    """10 log10(peak^2 / MSE) over all samples; identical inputs give
    the infinite sentinel."""
    xa = a.data.astype(np.float64) if isinstance(a, RgbImage) \
        else np.asarray(a, dtype=np.float64)
    xb = b.data.astype(np.float64) if isinstance(b, RgbImage) \
        else np.asarray(b, dtype=np.float64)
    if xa.shape != xb.shape:
        raise DimensionError("psnr shapes differ: %r vs %r" % (xa.shape, xb.shape))
    mse = float(((xa - xb) ** 2).mean())
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * np.log10(peak * peak / mse)


def _gaussian_kernel(size=11, sigma=1.5):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _window_mean(x, kernel):
    win = sliding_window_view(x, kernel.shape)
    return np.einsum("ijkl,kl->ij", win, kernel)


def ssim(a, b, k1=0.01, k2=0.03):
    """Mean local SSIM on luminance; 11x11 Gaussian window, sigma 1.5,
    data range 1.0."""
    xa, xb = _luminance01(a), _luminance01(b)
    if xa.shape != xb.shape:
        raise DimensionError("ssim shapes differ: %r vs %r" % (xa.shape, xb.shape))
    if min(xa.shape) < 11:
        raise DimensionError("ssim needs at least 11x11, got %r" % (xa.shape,))
    kernel = _gaussian_kernel()
    c1, c2 = k1 * k1, k2 * k2
    mu_a = _window_mean(xa, kernel)
    mu_b = _window_mean(xb, kernel)
    var_a = _window_mean(xa * xa, kernel) - mu_a * mu_a
    var_b = _window_mean(xb * xb, kernel) - mu_b * mu_b
    cov = _window_mean(xa * xb, kernel) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


# ---------------------------------------------------------------------------
# UIQM.

def _trimmed_mean(values, alpha):
    v = np.sort(values, axis=None)
    n = v.size
    t_lo = int(np.ceil(alpha * n))
    t_hi = int(np.floor(alpha * n))
    kept = v[t_lo:n - t_hi] if n - t_lo - t_hi > 0 else v
    return float(kept.mean())


def _uicm(rgb):
    c = UIQM_CONSTANTS
    r, g, b = rgb[:, :, 0], rgb[:, :, 1], rgb[:, :, 2]
    rg = r - g
    yb = (r + g) / 2.0 - b
    mu_rg = _trimmed_mean(rg, c["alpha_trim"])
    mu_yb = _trimmed_mean(yb, c["alpha_trim"])
    var_rg = float(((rg - mu_rg) ** 2).mean())
    var_yb = float(((yb - mu_yb) ** 2).mean())
    return (c["uicm_mu_coeff"] * np.sqrt(mu_rg ** 2 + mu_yb ** 2)
            + c["uicm_sigma_coeff"] * np.sqrt(var_rg + var_yb))


def _sobel_magnitude(x):
    """Gradient magnitude on the valid interior, shape (H-2, W-2)."""
    gx = (x[:-2, 2:] + 2.0 * x[1:-1, 2:] + x[2:, 2:]
          - x[:-2, :-2] - 2.0 * x[1:-1, :-2] - x[2:, :-2])
    gy = (x[2:, :-2] + 2.0 * x[2:, 1:-1] + x[2:, 2:]
          - x[:-2, :-2] - 2.0 * x[:-2, 1:-1] - x[:-2, 2:])
    return np.sqrt(gx * gx + gy * gy)


def _blocks(x, size):
    h = x.shape[0] - x.shape[0] % size
    w = x.shape[1] - x.shape[1] % size
    if h == 0 or w == 0:
        raise DimensionError("image too small for %dx%d blocks" % (size, size))
    v = x[:h, :w].reshape(h // size, size, w // size, size)
    return v.transpose(0, 2, 1, 3)


def _eme(x, size, eps):
    """2/(k1 k2) sum log((max+eps)/(min+eps)) over size x size blocks."""
    b = _blocks(x, size)
    mx = b.max(axis=(2, 3))
    mn = b.min(axis=(2, 3))
    return float(2.0 / mx.size * np.log((mx + eps) / (mn + eps)).sum())


def _uism(rgb):
    c = UIQM_CONSTANTS
    total = 0.0
    for ch, weight in enumerate(c["uism_channel_weights"]):
        plane = rgb[:, :, ch]
        edges = _sobel_magnitude(plane) * plane[1:-1, 1:-1]
        total += weight * _eme(edges, c["block"], c["eps"])
    return total


def _uiconm(rgb):
    c = UIQM_CONSTANTS
    eps = c["eps"]
    wr, wg, wb = LUMA_WEIGHTS
    gray = wr * rgb[:, :, 0] + wg * rgb[:, :, 1] + wb * rgb[:, :, 2]
    b = _blocks(gray, c["block"])
    mx = b.max(axis=(2, 3))
    mn = b.min(axis=(2, 3))
    top = mx - mn
    bot = mx + mn
    w = top / (bot + eps)
    return float(-1.0 / mx.size * (w * np.log(w + eps)).sum())


def uiqm(img):
    """UIQM and its components for an RGB image.

    Returns (uiqm, uicm, uism, uiconm); the total is exactly the
    weighted component sum.
    """
    rgb = _as_rgb_array(img)
    c = UIQM_CONSTANTS
    uicm = _uicm(rgb)
    uism = _uism(rgb)
    uiconm = _uiconm(rgb)
    total = c["c_uicm"] * uicm + c["c_uism"] * uism + c["c_uiconm"] * uiconm
    return total, uicm, uism, uiconm


# ---------------------------------------------------------------------------
# BD-rate.

@dataclass(frozen=True)
class RdPoint:
    bpp: float
    quality: float
    metric: str = "psnr"

    def __post_init__(self):
        if not self.bpp > 0:
            raise DataError("RdPoint bpp must be positive, got %r" % (self.bpp,))


@dataclass(frozen=True)
class RdCurve:
    points: tuple

    def __post_init__(self):
        pts = tuple(self.points)
        if len(pts) < 4:
            raise DataError("RdCurve needs at least 4 points, got %d" % len(pts))
        for p, q in zip(pts, pts[1:]):
            if q.bpp <= p.bpp:
                raise DataError("RdCurve bpp must be strictly increasing")
        object.__setattr__(self, "points", pts)

    def qualities(self):
        return np.array([p.quality for p in self.points])

    def log_rates(self):
        return np.log10([p.bpp for p in self.points])


def bd_rate(anchor, test):
    """Average percent rate difference of test over anchor at equal
    quality (cubic fit of log10 bpp vs quality). Returns None when the
    quality ranges do not overlap (the NA sentinel)."""
    qa, qt = anchor.qualities(), test.qualities()
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if not hi > lo:
        return None
    fit_a = np.polyfit(qa, anchor.log_rates(), 3)
    fit_t = np.polyfit(qt, test.log_rates(), 3)
    int_a = np.polyint(fit_a)
    int_t = np.polyint(fit_t)
    avg = (np.polyval(int_t, hi) - np.polyval(int_t, lo)
           - np.polyval(int_a, hi) + np.polyval(int_a, lo)) / (hi - lo)
    return float((10.0 ** avg - 1.0) * 100.0)


# ---------------------------------------------------------------------------
# Reporting.

CSV_COLUMNS = ["image_id", "lambda", "layer", "bpp", "psnr", "ssim",
               "uiqm", "uicm", "uism", "uiconm"]

_SVG_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
               "#8c564b", "#17becf"]


def write_results_csv(path, rows):
    """rows: list of dicts with CSV_COLUMNS keys."""
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in CSV_COLUMNS})


def read_results_csv(path):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_COLUMNS:
            raise DataError("unexpected CSV columns %r" % (reader.fieldnames,))
        out = []
        for row in reader:
            parsed = dict(row)
            for key in CSV_COLUMNS[3:]:
                parsed[key] = float(row[key])
            parsed["lambda"] = int(row["lambda"])
            out.append(parsed)
        return out


def _svg_escape(s):
    return (str(s).replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;"))


def write_rd_svg(path, rows, metric="uiqm", width=640, height=480):
    """Rate-distortion plot: one polyline per layer label, bpp on the
    x axis, the chosen metric on the y axis. Plain hand-written SVG."""
    if not rows:
        raise DataError("no rows to plot")
    if metric not in CSV_COLUMNS[3:]:
        raise DataError("unknown metric %r" % (metric,))
    labels = sorted({row["layer"] for row in rows})
    xs = [float(row["bpp"]) for row in rows]
    ys = [float(row[metric]) for row in rows]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 - x0 < 1e-12:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 - y0 < 1e-12:
        y0, y1 = y0 - 0.5, y1 + 0.5
    ml, mr, mt, mb = 60, 20, 20, 45
    pw, ph = width - ml - mr, height - mt - mb

    def sx(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return mt + (1.0 - (v - y0) / (y1 - y0)) * ph

    parts = ['<svg xmlns="http://www.w3.org/2000/svg" width="%d" height="%d" '
             'viewBox="0 0 %d %d">' % (width, height, width, height),
             '<rect width="%d" height="%d" fill="white"/>' % (width, height),
             '<line x1="%d" y1="%d" x2="%d" y2="%d" stroke="black"/>'
             % (ml, height - mb, width - mr, height - mb),
             '<line x1="%d" y1="%d" x2="%d" y2="%d" stroke="black"/>'
             % (ml, mt, ml, height - mb),
             '<text x="%d" y="%d" font-size="12">bpp</text>'
             % (ml + pw // 2, height - 10),
             '<text x="12" y="%d" font-size="12" transform="rotate(-90 12 %d)">%s'
             '</text>' % (mt + ph // 2, mt + ph // 2, _svg_escape(metric)),
             '<text x="%d" y="%d" font-size="10">%.4g</text>'
             % (ml, height - mb + 14, x0),
             '<text x="%d" y="%d" font-size="10">%.4g</text>'
             % (width - mr - 30, height - mb + 14, x1),
             '<text x="%d" y="%d" font-size="10">%.4g</text>'
             % (5, height - mb, y0),
             '<text x="%d" y="%d" font-size="10">%.4g</text>'
             % (5, mt + 10, y1)]
    for i, label in enumerate(labels):
        pts = sorted((float(r["bpp"]), float(r[metric]))
                     for r in rows if r["layer"] == label)
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        coords = " ".join("%.2f,%.2f" % (sx(x), sy(y)) for x, y in pts)
        parts.append('<polyline fill="none" stroke="%s" stroke-width="1.5" '
                     'points="%s"/>' % (color, coords))
        parts.append('<text x="%d" y="%d" font-size="11" fill="%s">%s</text>'
                     % (width - mr - 90, mt + 16 + 14 * i, color,
                        _svg_escape(label)))
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts))


def rd_report(rows, csv_path, svg_path, metric="uiqm"):
    """Write the results CSV and one RD plot for the chosen metric."""
    if not rows:
        raise DataError("rd_report needs at least one row")
    write_results_csv(csv_path, rows)
    write_rd_svg(svg_path, rows, metric=metric)
