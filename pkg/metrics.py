import logging
import math
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy import ndimage, signal, special

from constants import (
    MASK_RADIUS_PX,
    PSNR_PEAK,
    SSIM_SIGMA,
    SSIM_WINDOW,
    VIF_DATA_RANGE,
    VIF_SCALES,
    VIF_SIGMA_NSQ,
)
from errors import GeometryError, MetricError
from models import LabelVolume, Subregion
from reports import DiceRow

logger = logging.getLogger(__name__)

SUBSETS = ("all", "posterior")
AGGREGATIONS = ("per-volume", "per-vertebra")


class TTestResult(NamedTuple):
    t: float
    p: float
    n: int


def _pair(a, b, what: str):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"{what}: shapes {a.shape} and {b.shape} differ", "shape-mismatch")
    return a, b


def spine_mask(img: np.ndarray, seg: np.ndarray, radius: float = MASK_RADIUS_PX) -> np.ndarray:
    """Zero every pixel farther than `radius` (Euclidean, pixels) from a labelled pixel."""
    img = np.asarray(img)
    seg = np.asarray(seg)
    if img.shape != seg.shape:
        raise MetricError(f"spine_mask: image {img.shape} and labels {seg.shape} differ", "shape-mismatch")
    if not np.any(seg):
        return np.zeros_like(img)
    distance = ndimage.distance_transform_edt(seg == 0)
    return np.where(distance <= radius, img, 0).astype(img.dtype, copy=False)


def l1(a, b) -> float:
    a, b = _pair(a, b, "l1")
    return float(np.mean(np.abs(a - b)))


def mse(a, b) -> float:
    a, b = _pair(a, b, "mse")
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(value: float, peak: float = PSNR_PEAK) -> float:
    if peak <= 0:
        raise MetricError(f"PSNR peak must be positive, got {peak}", "invalid-peak")
    if value == 0:
        return math.inf
    return float(10.0 * np.log10(peak**2 / value))


def psnr(a, b, peak: float = PSNR_PEAK) -> float:
    return psnr_from_mse(mse(a, b), peak)


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    axis = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    kernel = np.exp(-(axis**2) / (2.0 * sigma**2))
    window = np.outer(kernel, kernel)
    return window / window.sum()


def _filter_valid(image: np.ndarray, window: np.ndarray) -> np.ndarray:
    return signal.correlate2d(image, window, mode="valid")


def ssim(a, b, peak: float = PSNR_PEAK) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), averaged over valid window positions."""
    a, b = _pair(a, b, "ssim")
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise MetricError(f"SSIM needs a 2D image of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}", "image-too-small")
    window = gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = _filter_valid(a, window)
    mu_b = _filter_valid(b, window)
    var_a = _filter_valid(a * a, window) - mu_a**2
    var_b = _filter_valid(b * b, window) - mu_b**2
    cov = _filter_valid(a * b, window) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(ssim_map.mean())


def vifp(a, b, data_range: float = VIF_DATA_RANGE, sigma_nsq: float = VIF_SIGMA_NSQ) -> float:
    """
    Pixel-domain visual information fidelity of `b` against reference `a`.
    Inputs are rescaled to a 255-level range first so the noise variance
    `sigma_nsq` has its usual meaning.
    """
    ref, dist = _pair(a, b, "vifp")
    if ref.ndim != 2:
        raise MetricError(f"VIFp compares 2D images, got {ref.shape}", "image-too-small")
    scale = 255.0 / data_range
    ref = ref * scale
    dist = dist * scale
    eps = 1e-10
    num = 0.0
    den = 0.0
    for level in range(1, VIF_SCALES + 1):
        n = 2 ** (VIF_SCALES - level + 1) + 1
        window = gaussian_window(n, n / 5.0)
        if level > 1:
            ref = _filter_valid(ref, window)[::2, ::2]
            dist = _filter_valid(dist, window)[::2, ::2]
        if min(ref.shape) < n:
            raise MetricError(f"Image too small for {VIF_SCALES} VIF scales (scale {level} is {ref.shape})", "image-too-small")
        mu1 = _filter_valid(ref, window)
        mu2 = _filter_valid(dist, window)
        sigma1_sq = np.maximum(_filter_valid(ref * ref, window) - mu1 * mu1, 0)
        sigma2_sq = np.maximum(_filter_valid(dist * dist, window) - mu2 * mu2, 0)
        sigma12 = _filter_valid(ref * dist, window) - mu1 * mu2

        g = sigma12 / (sigma1_sq + eps)
        sv_sq = sigma2_sq - g * sigma12
        flat_ref = sigma1_sq < eps
        g[flat_ref] = 0
        sv_sq[flat_ref] = sigma2_sq[flat_ref]
        sigma1_sq[flat_ref] = 0
        flat_dist = sigma2_sq < eps
        g[flat_dist] = 0
        sv_sq[flat_dist] = 0
        negative = g < 0
        sv_sq[negative] = sigma2_sq[negative]
        g[negative] = 0
        sv_sq = np.maximum(sv_sq, eps)

        num += np.sum(np.log10(1 + g * g * sigma1_sq / (sv_sq + sigma_nsq)))
        den += np.sum(np.log10(1 + sigma1_sq / sigma_nsq))
    if den == 0:
        # flat reference: no information to preserve
        return 1.0 if num == 0 else 0.0
    return float(num / den)


def image_metrics(reference, image, peak: float = PSNR_PEAK) -> Dict[str, float]:
    return {
        "l1": l1(reference, image),
        "mse": mse(reference, image),
        "psnr": psnr(reference, image, peak),
        "ssim": ssim(reference, image, peak),
        "vifp": vifp(reference, image),
    }


def dice_coefficient(a: np.ndarray, b: np.ndarray) -> float:
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def dice(
    a: LabelVolume,
    b: LabelVolume,
    subset: str = "all",
    a_subregions: Optional[LabelVolume] = None,
    b_subregions: Optional[LabelVolume] = None,
    volume_id: str = "0",
    method: str = "",
) -> List[DiceRow]:
    """
    Per-vertebra Dice of `b` against reference `a`, one row per reference id.
    The posterior subset first intersects each mask with its own posterior
    subregion; vertebrae without posterior voxels in the reference are skipped.
    """
    if subset not in SUBSETS:
        raise MetricError(f"Unknown Dice subset '{subset}'", "invalid-subset")
    if not a.geometry.matches(b.geometry):
        raise GeometryError("Dice inputs are not on the same grid")
    keep_a = keep_b = True
    if subset == "posterior":
        if a_subregions is None or b_subregions is None:
            raise MetricError("The posterior subset needs subregions for both volumes", "missing-subregions")
        keep_a = a_subregions.data == Subregion.POSTERIOR.value
        keep_b = b_subregions.data == Subregion.POSTERIOR.value

    rows = []
    for vertebra_id in a.labels:
        mask_a = (a.data == vertebra_id) & keep_a
        if subset == "posterior" and not mask_a.any():
            continue
        mask_b = (b.data == vertebra_id) & keep_b
        rows.append(DiceRow(method=method, volume_id=volume_id, vertebra_id=vertebra_id, subset=subset, dice=dice_coefficient(mask_a, mask_b)))
    return rows


def aggregate_dice(rows: Iterable[DiceRow], aggregation: str = "per-vertebra") -> float:
    """
    per-vertebra: mean over every (volume, vertebra) row.
    per-volume: mean of each volume's per-vertebra mean.
    """
    rows = list(rows)
    if aggregation not in AGGREGATIONS:
        raise MetricError(f"Unknown Dice aggregation '{aggregation}'", "invalid-aggregation")
    if not rows:
        raise MetricError("No Dice rows to aggregate", "empty-sample")
    if aggregation == "per-vertebra":
        return float(np.mean([row.dice for row in rows]))
    by_volume: Dict[str, List[float]] = {}
    for row in rows:
        by_volume.setdefault(row.volume_id, []).append(row.dice)
    return float(np.mean([np.mean(values) for values in by_volume.values()]))


def paired_ttest(x: Sequence[float], y: Sequence[float]) -> TTestResult:
    """Two-sided paired t-test; p from the Student-t CDF through the regularized incomplete beta."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"Paired samples differ in length: {x.size} vs {y.size}", "length-mismatch")
    n = int(x.size)
    if n < 2:
        raise MetricError(f"A paired t-test needs n >= 2, got {n}", "too-few-samples")
    d = x - y
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0:
        if mean == 0:
            return TTestResult(0.0, 1.0, n)
        return TTestResult(math.copysign(math.inf, mean), 0.0, n)
    t = mean / (sd / math.sqrt(n))
    df = n - 1
    p = float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))
    return TTestResult(float(t), p, n)


def worst_p(results: Sequence[float]) -> float:
    if len(results) == 0:
        raise MetricError("worst_p of an empty list", "empty-sample")
    return float(max(results))
