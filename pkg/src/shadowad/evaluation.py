"""Detection metrics: binarization, confusion counts, balanced error rate,
dataset evaluation at a fixed network resolution, and the cumulative
distribution of error distances to the ground-truth shadow boundary."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from shadowad.errors import DataError, ValidationError
from shadowad.imaging import EPS_LOG, as_mask, distance_to_boundary, resize_array
from shadowad.nets import UNet


def check_prediction(pred) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 2:
        raise ValidationError(f"prediction map must be 2-D, got shape {pred.shape}")
    if np.any(pred < 0) or np.any(pred > 1) or not np.all(np.isfinite(pred)):
        raise ValidationError("prediction values must lie in [0, 1]")
    return pred


def binarize(pred, threshold: float = 0.5) -> np.ndarray:
    """Shadow where ``pred > threshold`` (strict)."""
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must be in (0, 1), got {threshold}")
    return check_prediction(pred) > threshold


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def has_both_classes(self) -> bool:
        return self.tp + self.fn > 0 and self.tn + self.fp > 0


def confusion_counts(pred_mask, gt_mask) -> ConfusionCounts:
    pred, gt = as_mask(pred_mask), as_mask(gt_mask)
    if pred.shape != gt.shape:
        raise ValidationError(f"dimension mismatch: {pred.shape} vs {gt.shape}")
    return ConfusionCounts(
        tp=int(np.sum(pred & gt)),
        tn=int(np.sum(~pred & ~gt)),
        fp=int(np.sum(pred & ~gt)),
        fn=int(np.sum(~pred & gt)),
    )


def _check_classes(c: ConfusionCounts):
    if not c.has_both_classes:
        raise ValidationError("BER undefined: ground truth lacks a class")


def shadow_error(c: ConfusionCounts) -> float:
    _check_classes(c)
    return 100.0 * c.fn / (c.tp + c.fn)


def nonshadow_error(c: ConfusionCounts) -> float:
    _check_classes(c)
    return 100.0 * c.fp / (c.tn + c.fp)


def ber(c: ConfusionCounts) -> float:
    """Balanced error rate in percent."""
    _check_classes(c)
    return 50.0 * (c.fn / (c.tp + c.fn) + c.fp / (c.tn + c.fp))


# -------------------------------------------------------------------- protocol


@dataclass(frozen=True)
class EvalProtocol:
    """Network input size and binarization threshold. The full-scale size is 256."""

    size: int = 64
    threshold: float = 0.5
    eps_log: float = EPS_LOG


def detector_predictor(net: UNet, protocol: EvalProtocol = EvalProtocol()):
    """Wrap a detector as ``f(linear_image_array) -> probability map at the input's size``."""

    def predict(image: np.ndarray) -> np.ndarray:
        h, w = image.shape[:2]
        small = np.clip(resize_array(image, protocol.size, protocol.size), 0.0, 1.0)
        x = np.log(np.maximum(small, protocol.eps_log))
        t = torch.from_numpy(np.ascontiguousarray(np.moveaxis(x, -1, 0)[None], dtype=np.float32))
        net.eval()
        with torch.no_grad():
            p = net(t)[0, 0].numpy().astype(np.float64)
        return np.clip(resize_array(p, h, w), 0.0, 1.0)

    return predict


def predict_batch(net: UNet, images: np.ndarray, protocol: EvalProtocol = EvalProtocol()) -> np.ndarray:
    """Probability maps for ``N x H x W x 3`` linear images of a common size."""
    n, h, w = images.shape[:3]
    small = np.stack([np.clip(resize_array(im, protocol.size, protocol.size), 0.0, 1.0) for im in images])
    x = np.log(np.maximum(small, protocol.eps_log))
    t = torch.from_numpy(np.ascontiguousarray(np.moveaxis(x, -1, 1), dtype=np.float32))
    net.eval()
    with torch.no_grad():
        p = net(t)[:, 0].numpy().astype(np.float64)
    return np.stack([np.clip(resize_array(pi, h, w), 0.0, 1.0) for pi in p])


@dataclass
class EvalReport:
    counts: ConfusionCounts
    ber: float
    shadow_error: float
    nonshadow_error: float
    per_image: list = field(default_factory=list)
    protocol: EvalProtocol = EvalProtocol()

    def to_dict(self):
        return {
            "aggregate": {
                "ber": self.ber,
                "shadow_error": self.shadow_error,
                "nonshadow_error": self.nonshadow_error,
                "counts": asdict(self.counts),
                "aggregation": "summed pixel counts over the dataset",
            },
            "per_image": self.per_image,
            "protocol": asdict(self.protocol),
        }

    def write(self, path):
        try:
            with open(path, "w") as fh:
                json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
                fh.write("\n")
        except OSError as exc:
            raise DataError(f"cannot write report {path}: {exc}") from exc


def report_from_predictions(names, pred_masks, gt_masks, protocol=EvalProtocol()) -> EvalReport:
    total = ConfusionCounts()
    rows = []
    for name, pred, gt in zip(names, pred_masks, gt_masks):
        c = confusion_counts(pred, gt)
        total = total + c
        row = {"name": name, "counts": asdict(c)}
        if c.has_both_classes:
            row.update(ber=ber(c), shadow_error=shadow_error(c), nonshadow_error=nonshadow_error(c))
        else:
            row.update(ber=None, shadow_error=None, nonshadow_error=None)
        rows.append(row)
    rows.sort(key=lambda r: r["name"])
    return EvalReport(total, ber(total), shadow_error(total), nonshadow_error(total), rows, protocol)


def evaluate_dataset(detector, samples, protocol: EvalProtocol = EvalProtocol()) -> EvalReport:
    """Evaluate a detector over ``samples`` at the samples' original resolution.

    ``detector`` is a :class:`UNet` or any callable mapping a linear ``H x W x 3``
    array to a probability map of the same height and width.
    """
    predict = detector_predictor(detector, protocol) if isinstance(detector, UNet) else detector
    names, preds, gts = [], [], []
    for s in samples:
        prob = check_prediction(predict(s.image.data))
        if prob.shape != s.mask.shape:
            raise ValidationError(f"dimension mismatch: {s.name}")
        names.append(s.name)
        preds.append(binarize(prob, protocol.threshold))
        gts.append(s.mask)
    return report_from_predictions(names, preds, gts, protocol)


# ------------------------------------------------------------ boundary distances


@dataclass
class BoundaryErrorCDF:
    """Cumulative fractions at integer distances ``0..max_distance``.

    A curve is ``None`` when there are no errors of that kind.
    """

    distances: np.ndarray
    fn_cum: np.ndarray | None
    fp_cum: np.ndarray | None
    n_fn: int = 0
    n_fp: int = 0

    def write_csv(self, path):
        try:
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["distance", "fn_cum", "fp_cum"])
                for i, d in enumerate(self.distances):
                    w.writerow([
                        int(d),
                        "empty" if self.fn_cum is None else repr(float(self.fn_cum[i])),
                        "empty" if self.fp_cum is None else repr(float(self.fp_cum[i])),
                    ])
        except OSError as exc:
            raise DataError(f"cannot write {path}: {exc}") from exc


def _cumulative(dist: np.ndarray, max_distance: int):
    if dist.size == 0:
        return None
    dist = np.sort(dist)
    steps = np.arange(max_distance + 1)
    return np.searchsorted(dist, steps, side="right") / dist.size


def error_distances(pred_mask, gt_mask):
    """Distances to the ground-truth boundary of the false-negative and false-positive pixels."""
    pred, gt = as_mask(pred_mask), as_mask(gt_mask)
    if pred.shape != gt.shape:
        raise ValidationError("dimension mismatch")
    dist = distance_to_boundary(gt)
    return dist[gt & ~pred], dist[pred & ~gt]


def boundary_error_cdf(pred_mask, gt_mask, max_distance: int = 50) -> BoundaryErrorCDF:
    fn_d, fp_d = error_distances(pred_mask, gt_mask)
    return cdf_from_distances(fn_d, fp_d, max_distance)


def cdf_from_distances(fn_d, fp_d, max_distance: int) -> BoundaryErrorCDF:
    if max_distance < 0:
        raise ValidationError("max_distance must be >= 0")
    return BoundaryErrorCDF(
        distances=np.arange(max_distance + 1),
        fn_cum=_cumulative(np.asarray(fn_d), max_distance),
        fp_cum=_cumulative(np.asarray(fp_d), max_distance),
        n_fn=int(np.size(fn_d)),
        n_fp=int(np.size(fp_d)),
    )


def dataset_boundary_error_cdf(pred_masks, gt_masks, max_distance: int = 50) -> BoundaryErrorCDF:
    """Pool error pixels over several images before accumulating."""
    fns, fps = [], []
    for p, g in zip(pred_masks, gt_masks):
        fn_d, fp_d = error_distances(p, g)
        fns.append(fn_d)
        fps.append(fp_d)
    return cdf_from_distances(np.concatenate(fns) if fns else np.empty(0),
                              np.concatenate(fps) if fps else np.empty(0), max_distance)
