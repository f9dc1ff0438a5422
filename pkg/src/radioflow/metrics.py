"""Image-quality metrics for normalized radio maps (values in [0, 1])."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
CSV_HEADER = ["sample_id", "nmse", "psnr_db", "rmse", "ssim"]


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return p, t


def nmse(pred, target) -> float:
    p, t = _pair(pred, target)
    denom = float(np.sum(t * t))
    if denom == 0:
        raise ValueError("NMSE undefined for an all-zero target")
    return float(np.sum((p - t) ** 2)) / denom


def rmse(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def psnr(pred, target, peak: float = 1.0) -> float:
    """PSNR in dB; zero error returns the capped value ``PSNR_CAP_DB``."""
    p, t = _pair(pred, target)
    mse = float(np.mean((p - t) ** 2))
    if mse == 0:
        return PSNR_CAP_DB
    return 10.0 * np.log10(peak**2 / mse)


def gaussian_window_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def ssim(pred, target, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) and reflected borders."""
    p, t = _pair(pred, target)
    if p.ndim != 2 or min(p.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs a 2-D image of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {p.shape}")
    w = gaussian_window_1d()

    def blur(a):
        # 'mirror' reflects about the edge sample without repeating it
        return correlate1d(correlate1d(a, w, axis=0, mode="mirror"), w, axis=1, mode="mirror")

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_p, mu_t = blur(p), blur(t)
    var_p = blur(p * p) - mu_p**2
    var_t = blur(t * t) - mu_t**2
    cov = blur(p * t) - mu_p * mu_t
    smap = ((2 * mu_p * mu_t + c1) * (2 * cov + c2)) / ((mu_p**2 + mu_t**2 + c1) * (var_p + var_t + c2))
    return float(smap.mean())


def all_metrics(pred, target) -> dict[str, float]:
    return {"nmse": nmse(pred, target), "psnr_db": psnr(pred, target), "rmse": rmse(pred, target), "ssim": ssim(pred, target)}


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, sample_id, pred, target) -> dict:
        row = {"sample_id": sample_id, **all_metrics(pred, target)}
        self.rows.append(row)
        return row

    @property
    def count(self) -> int:
        return len(self.rows)

    def aggregate(self) -> dict[str, float]:
        return {k: float(np.mean([r[k] for r in self.rows])) for k in CSV_HEADER[1:]}

    def to_csv(self, path: Path | None = None, extra_rows: dict[str, dict] | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([r["sample_id"]] + [repr(float(r[k])) for k in CSV_HEADER[1:]])
        agg = self.aggregate()
        writer.writerow(["aggregate"] + [repr(agg[k]) for k in CSV_HEADER[1:]])
        for name, vals in (extra_rows or {}).items():
            writer.writerow([name] + [repr(float(vals[k])) for k in CSV_HEADER[1:]])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def read_report_csv(path: Path) -> dict[str, dict[str, float]]:
    """Rows of a metrics CSV keyed by sample_id (strings kept as-is)."""
    with open(path, newline="", encoding="utf-8") as fh:
        return {r["sample_id"]: {k: float(r[k]) for k in CSV_HEADER[1:]} for r in csv.DictReader(fh)}


def evaluate_predictions(preds, targets, ids=None) -> EvalReport:
    report = EvalReport()
    for i, (p, t) in enumerate(zip(preds, targets)):
        report.add(ids[i] if ids is not None else i, p, t)
    return report


def mean_predictor_report(train_targets: np.ndarray, test_targets: np.ndarray, ids=None) -> EvalReport:
    """Baseline: predict the train-split mean map for every test scene."""
    mean_map = np.asarray(train_targets, dtype=np.float64).mean(axis=0)
    return evaluate_predictions([mean_map] * len(test_targets), test_targets, ids)


def evaluate(state, test_dataset, sample_config=None, batch_size: int = 16) -> EvalReport:
    """Sample every test scene (noise seeded per scene) and score the clamped output.

    ``state`` is a ModelState or a ``v(x, t, c)`` callable. Rows follow the
    dataset order.
    """
    from .sample import SampleConfig, euler_integrate, scene_seed

    cfg = sample_config or SampleConfig()
    n = len(test_dataset)
    if n == 0:
        raise ValueError("empty test set")
    ids = test_dataset.seeds if len(test_dataset.seeds) == n else list(range(n))
    report = EvalReport()
    for lo in range(0, n, batch_size):
        c = test_dataset.conditions[lo : lo + batch_size]
        res = euler_integrate(state, c, cfg, seeds=[scene_seed(ci, cfg.seed) for ci in c])
        for j, pred in enumerate(res.maps):
            report.add(ids[lo + j], pred, test_dataset.targets[lo + j])
    return report
