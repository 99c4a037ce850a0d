"""Fusion quality metrics: SSIM, MSE/PSNR, VIF, CC and Chen-Varshney.

Images are float arrays in [0, 1]. MSE, PSNR, VIF and CV work on the
0-255 scale; all metrics run on luminance.
"""
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import find_image, load_gray, load_pair, load_rgb, luminance
from .errors import FormatError, ValidationError

METRIC_NAMES = ("ssim", "psnr", "mse", "vif", "cc", "cv")
_HIGHER_IS_BETTER = {"ssim": True, "psnr": True, "mse": False, "vif": True, "cc": True, "cv": False}


def _check_same(*images):
    shapes = {np.shape(im) for im in images}
    if len(shapes) != 1:
        raise ValidationError(f"image shapes differ: {sorted(shapes)}")


# ---------------------------------------------------------------------------
# SSIM

def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _local_mean(x, g):
    def blur(t):
        t = ndimage.correlate1d(t, g, axis=0, mode="constant")
        return ndimage.correlate1d(t, g, axis=1, mode="constant")
    return blur(x) / blur(np.ones_like(x))


def ssim_map(a, b, window=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    g = gaussian_window(window, sigma)
    mu_a, mu_b = _local_mean(a, g), _local_mean(b, g)
    var_a = _local_mean(a * a, g) - mu_a ** 2
    var_b = _local_mean(b * b, g) - mu_b ** 2
    cov = _local_mean(a * b, g) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim_metric(a, b, **kw):
    return float(ssim_map(a, b, **kw).mean())


# ---------------------------------------------------------------------------
# MSE / PSNR

def mse_psnr(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    mse = float(np.mean((255.0 * a - 255.0 * b) ** 2))
    return mse, psnr_from_mse(mse)


def psnr_from_mse(mse):
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


# ---------------------------------------------------------------------------
# correlation coefficient

def pearson(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db)))
    if denom == 0.0:
        raise ValidationError("correlation undefined for a constant image")
    return float(np.clip(np.dot(da, db) / denom, -1.0, 1.0))


def cc_metric(fused, ir, vis):
    _check_same(fused, ir, vis)
    return 0.5 * (pearson(fused, ir) + pearson(fused, vis))


# ---------------------------------------------------------------------------
# VIF (pixel domain, 4-scale Gaussian pyramid)

VIF_MIN_SIZE = 17  # side of the finest-scale window


def _vif_window(n):
    sd = n / 5.0
    m = (n - 1) / 2
    y, x = np.ogrid[-m:m + 1, -m:m + 1]
    h = np.exp(-(x * x + y * y) / (2 * sd * sd))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def _filter_valid(x, win):
    r = win.shape[0] // 2
    return ndimage.correlate(x, win, mode="constant")[r:x.shape[0] - r, r:x.shape[1] - r]


def vif_terms(ref, dist, scales=4, sigma_nsq=2.0, eps=1e-10):
    """Per-scale (numerator, denominator) information sums."""
    ref = 255.0 * np.asarray(ref, dtype=np.float64)
    dist = 255.0 * np.asarray(dist, dtype=np.float64)
    _check_same(ref, dist)
    terms = []
    for scale in range(1, scales + 1):
        n = 2 ** (scales - scale + 1) + 1
        win = _vif_window(n)
        if scale > 1:
            if min(ref.shape) < n:
                break
            ref = _filter_valid(ref, win)[::2, ::2]
            dist = _filter_valid(dist, win)[::2, ::2]
        if min(ref.shape) < n:
            break
        mu1, mu2 = _filter_valid(ref, win), _filter_valid(dist, win)
        s1 = np.maximum(_filter_valid(ref * ref, win) - mu1 * mu1, 0)
        s2 = np.maximum(_filter_valid(dist * dist, win) - mu2 * mu2, 0)
        s12 = _filter_valid(ref * dist, win) - mu1 * mu2

        g = s12 / (s1 + eps)
        sv = s2 - g * s12
        flat_ref = s1 < eps
        g[flat_ref] = 0
        sv[flat_ref] = s2[flat_ref]
        s1 = np.where(flat_ref, 0, s1)
        flat_dist = s2 < eps
        g[flat_dist] = 0
        sv[flat_dist] = 0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0
        sv = np.maximum(sv, eps)

        terms.append((float(np.sum(np.log10(1 + g * g * s1 / (sv + sigma_nsq)))),
                      float(np.sum(np.log10(1 + s1 / sigma_nsq)))))
    return terms


def vif_metric(fused, ref):
    fused = np.asarray(fused, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _check_same(fused, ref)
    if np.array_equal(fused, ref):
        # the eps guard in the gain estimate would otherwise leave ~1e-11
        return 1.0
    if np.ptp(ref) == 0:
        raise ValidationError("VIF undefined for a zero-variance reference")
    terms = vif_terms(ref, fused)
    if not terms:
        raise ValidationError("image too small for VIF")
    return sum(t[0] for t in terms) / sum(t[1] for t in terms)


def fusion_vif(fused, ir, vis):
    return 0.5 * (vif_metric(fused, ir) + vif_metric(fused, vis))


# ---------------------------------------------------------------------------
# Chen-Varshney

CV_WINDOW = 16
CV_SIGMA_CENTER = 1.0
CV_SIGMA_SURROUND = 3.0


def contrast_filter(x):
    """Difference-of-Gaussians band-pass standing in for the CSF."""
    return (ndimage.gaussian_filter(x, CV_SIGMA_CENTER, mode="reflect")
            - ndimage.gaussian_filter(x, CV_SIGMA_SURROUND, mode="reflect"))


def edge_energy(x):
    gx = ndimage.sobel(x, axis=1, mode="reflect")
    gy = ndimage.sobel(x, axis=0, mode="reflect")
    return gx * gx + gy * gy


def window_sums(x, window=CV_WINDOW):
    """Sum over non-overlapping tiles; partial tiles at the edges count."""
    H, W = x.shape
    ph, pw = -H % window, -W % window
    x = np.pad(x, ((0, ph), (0, pw)))
    return x.reshape(x.shape[0] // window, window, x.shape[1] // window, window).sum(axis=(1, 3))


def window_counts(shape, window=CV_WINDOW):
    return window_sums(np.ones(shape), window)


def cv_terms(fused, ir, vis, window=CV_WINDOW):
    """Per-window filtered errors and saliency weights for both sources."""
    fused, ir, vis = (255.0 * np.asarray(a, dtype=np.float64) for a in (fused, ir, vis))
    _check_same(fused, ir, vis)
    counts = window_counts(fused.shape, window)
    out = []
    for src in (ir, vis):
        err = window_sums(contrast_filter(src - fused) ** 2, window) / counts
        sal = window_sums(edge_energy(src), window)
        out.append((err, sal))
    return out


def cv_metric(fused, ir, vis, window=CV_WINDOW):
    (d_ir, l_ir), (d_vis, l_vis) = cv_terms(fused, ir, vis, window)
    den = float(np.sum(l_ir + l_vis))
    if den == 0.0:
        return float(np.mean(0.5 * (d_ir + d_vis)))
    return float(np.sum(l_ir * d_ir + l_vis * d_vis)) / den


# ---------------------------------------------------------------------------
# fusion evaluation and reports

def evaluate_fused(fused, ir, vis_y):
    """All six metrics of a fused luminance image against both sources.

    VIF is reported as NaN for images smaller than its finest window.
    """
    _check_same(fused, ir, vis_y)
    vif = fusion_vif(fused, ir, vis_y) if min(np.shape(fused)) >= VIF_MIN_SIZE else math.nan
    mse = 0.5 * (mse_psnr(fused, ir)[0] + mse_psnr(fused, vis_y)[0])
    return {
        "ssim": 0.5 * (ssim_metric(fused, ir) + ssim_metric(fused, vis_y)),
        "psnr": psnr_from_mse(mse),
        "mse": mse,
        "vif": vif,
        "cc": cc_metric(fused, ir, vis_y),
        "cv": cv_metric(fused, ir, vis_y),
    }


@dataclass
class MetricsReport:
    dataset: str
    method: str
    rows: dict = field(default_factory=dict)     # id -> metric dict
    missing: list = field(default_factory=list)

    @property
    def means(self):
        if not self.rows:
            return {k: math.nan for k in METRIC_NAMES}
        return {k: float(np.mean([r[k] for r in self.rows.values()])) for k in METRIC_NAMES}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("id",) + METRIC_NAMES)
            for id_, row in self.rows.items():
                w.writerow([id_] + [repr(row[k]) for k in METRIC_NAMES])
            for id_ in self.missing:
                w.writerow([id_] + [""] * len(METRIC_NAMES))
            means = self.means
            w.writerow(["mean"] + [repr(means[k]) for k in METRIC_NAMES])

    def table(self):
        return format_table([(self.method, self.means)], title=f"{self.dataset} fusion metrics")


def read_report_csv(path):
    rows, summary = {}, None
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            if rec["id"] == "mean":
                summary = {k: float(rec[k]) for k in METRIC_NAMES}
            elif rec["ssim"] != "":
                rows[rec["id"]] = {k: float(rec[k]) for k in METRIC_NAMES}
    return rows, summary


def format_table(entries, columns=METRIC_NAMES, title=None):
    """Method-per-row text table with arrows marking metric direction."""
    heads = ["Method"] + [f"{c.upper()}{'↑' if _HIGHER_IS_BETTER[c] else '↓'}" for c in columns]
    body = [[name] + [_fmt(vals[c], c) for c in columns] for name, vals in entries]
    widths = [max(len(r[i]) for r in [heads] + body) for i in range(len(heads))]
    line = lambda r: "  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths)))
    out = [title] if title else []
    out += [line(heads), "-" * len(line(heads))] + [line(r) for r in body]
    return "\n".join(out)


def _fmt(v, name):
    if math.isinf(v) or math.isnan(v):
        return str(v)
    return f"{v:.2f}"


def load_fused_luminance(path):
    try:
        return load_gray(path)
    except FormatError:
        return luminance(load_rgb(path))


def evaluate_directory(fused_dir, manifest, method="fused"):
    fused_dir = Path(fused_dir)
    report = MetricsReport(dataset=f"{manifest.root.name}/{manifest.split}", method=method)
    for id_, ir_path, vis_path, _ in manifest.entries:
        fused_path = find_image(fused_dir, id_)
        if fused_path is None:
            report.missing.append(id_)
            continue
        pair = load_pair(ir_path, vis_path, id=id_)
        fused = load_fused_luminance(fused_path)
        report.rows[id_] = evaluate_fused(fused, pair.infrared, luminance(pair.visible))
    return report
