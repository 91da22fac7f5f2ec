"""Attenuator and detector objectives and the alternating training loop.

Each iteration runs the attenuator once, forwards both the attenuated and the
original images through the detector, updates the detector, then updates the
attenuator through the (frozen) updated detector.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from shadowad.errors import DataError, NumericalError, ValidationError
from shadowad.imaging import (
    EPS_LOG,
    as_mask,
    boundary_bands,
    default_band_radius,
    resize_array,
    resize_mask,
)
from shadowad.nets import (
    AdamState,
    UNet,
    UNetConfig,
    adam_step,
    attenuator_config,
    detector_config,
    frozen_running_stats,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from shadowad.physics import LossWeights, adaptive_adv_weight, band_means_ratio, physics_loss

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "iteration",
    "loss_A",
    "loss_nsd",
    "loss_sd",
    "loss_ph",
    "loss_D",
    "loss_D_real",
    "loss_D_adv",
    "mean_kstrength_in",
    "mean_kstrength_att",
    "gated_fraction",
)


# ------------------------------------------------------------------------ losses


def loss_nsd(a_out, inp, mask):
    """Mean L1 change (summed over channels) on non-shadow pixels; returns ``(loss, grad)``."""
    a = np.asarray(a_out, dtype=np.float64)
    x = np.asarray(inp, dtype=np.float64)
    outside = ~as_mask(mask)
    n = int(outside.sum())
    if n == 0:
        raise ValidationError("loss_nsd needs at least one non-shadow pixel")
    diff = a - x
    loss = float(np.abs(diff[outside]).sum() / n)
    grad = np.where(outside[..., None], np.sign(diff) / n, 0.0)
    return loss, grad


def loss_sd(d_on_a, mask):
    """Mean detector output over shadow pixels; returns ``(loss, grad)``."""
    d = np.asarray(d_on_a, dtype=np.float64)
    mask = as_mask(mask)
    n = int(mask.sum())
    if n == 0:
        raise ValidationError("loss_sd needs at least one shadow pixel")
    return float(d[mask].sum() / n), np.where(mask, 1.0 / n, 0.0)


@dataclass
class AttenuatorLoss:
    total: float
    nsd: float
    sd: float
    ph: float
    grad_a: np.ndarray
    grad_d: np.ndarray


def attenuator_loss(inp, mask, a_out, d_on_a, weights: LossWeights = LossWeights()) -> AttenuatorLoss:
    """Weighted sum ``nsd * L_nsd + sd * L_sd + ph * L_ph``.

    ``grad_a`` is the derivative w.r.t. ``a_out`` of the nsd and ph terms;
    ``grad_d`` is the derivative w.r.t. the detector output, which the caller
    pushes back through the detector to reach ``a_out``.
    """
    nsd, g_nsd = loss_nsd(a_out, inp, mask)
    sd, g_sd = loss_sd(d_on_a, mask)
    ph, g_ph = physics_loss(a_out, inp, mask)
    total = weights.nsd * nsd + weights.sd * sd + weights.ph * ph
    return AttenuatorLoss(
        total, nsd, sd, ph,
        grad_a=weights.nsd * g_nsd + weights.ph * g_ph,
        grad_d=weights.sd * g_sd,
    )


@dataclass
class DetectorLoss:
    total: float
    real: float  # weighted: weights.real * mean|D(I) - M|
    adv: float  # weighted: lambda_adv * mean|D(A(I)) - M|
    grad_real: np.ndarray
    grad_adv: np.ndarray


def detector_loss(d_on_real, d_on_adv, mask, lambda_adv: float,
                  weights: LossWeights = LossWeights()) -> DetectorLoss:
    """``real * mean|D(I) - M| + lambda_adv * mean|D(A(I)) - M|``, means over all pixels."""
    real = np.asarray(d_on_real, dtype=np.float64)
    adv = np.asarray(d_on_adv, dtype=np.float64)
    m = as_mask(mask).astype(np.float64)
    if real.shape != m.shape or adv.shape != m.shape:
        raise ValidationError("dimension mismatch in detector_loss")
    n = m.size
    real_term = weights.real * float(np.abs(real - m).sum() / n)
    grad_real = weights.real * np.sign(real - m) / n
    if lambda_adv == 0.0:
        adv_term, grad_adv = 0.0, np.zeros_like(adv)
    else:
        adv_term = lambda_adv * float(np.abs(adv - m).sum() / n)
        grad_adv = lambda_adv * np.sign(adv - m) / n
    return DetectorLoss(real_term + adv_term, real_term, adv_term, grad_real, grad_adv)


# ------------------------------------------------------------------ configuration


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = LossWeights()
    batch_size: int = 8
    iterations: int = 2000
    adam_a: dict = field(default_factory=lambda: {"lr": 2e-4, "beta1": 0.5, "beta2": 0.999, "eps": 1e-8})
    adam_d: dict = field(default_factory=lambda: {"lr": 2e-4, "beta1": 0.5, "beta2": 0.999, "eps": 1e-8})
    band_radius: int | None = None
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 500
    image_size: int = 64
    attenuator: UNetConfig = attenuator_config()
    detector: UNetConfig = detector_config()
    use_attenuator: bool = True
    adaptive_gate: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ValidationError("log_every and checkpoint_every must be >= 1")
        if self.image_size % (2 ** max(self.attenuator.depth, self.detector.depth)):
            raise ValidationError("image_size must be divisible by 2**depth")
        if self.attenuator.kind != "attenuator" or not self.attenuator.residual:
            raise ValidationError("attenuator config must be a residual 4 -> 3 network")
        if self.detector.kind != "detector" or self.detector.output_activation != "sigmoid":
            raise ValidationError("detector config must be a 3 -> 1 sigmoid network")
        for name in ("adam_a", "adam_d"):
            extra = set(getattr(self, name)) - {"lr", "beta1", "beta2", "eps"}
            if extra:
                raise ValidationError(f"unknown {name} keys: {sorted(extra)}")

    @property
    def radius(self) -> int:
        return self.band_radius or default_band_radius(self.image_size, self.image_size)

    def to_dict(self):
        d = asdict(self)
        d["attenuator"] = self.attenuator.to_dict()
        d["detector"] = self.detector.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            if "weights" in d:
                d["weights"] = LossWeights(**d["weights"])
            if "attenuator" in d:
                d["attenuator"] = UNetConfig(**d["attenuator"])
            if "detector" in d:
                d["detector"] = UNetConfig(**d["detector"])
            for name in ("adam_a", "adam_d"):
                if name in d:
                    d[name] = {**cls.__dataclass_fields__[name].default_factory(), **d[name]}
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(str(exc)) from exc


@dataclass
class StepRecord:
    iteration: int
    loss_A: float
    loss_nsd: float
    loss_sd: float
    loss_ph: float
    loss_D: float
    loss_D_real: float
    loss_D_adv: float
    mean_kstrength_in: float
    mean_kstrength_att: float
    gated_fraction: float
    epoch: int = 0
    sample_kstrength_att: tuple = ()
    sample_lambda_adv: tuple = ()

    def row(self):
        return [repr(getattr(self, c)) if c != "iteration" else str(self.iteration) for c in METRIC_COLUMNS]

    def is_finite(self):
        return all(math.isfinite(getattr(self, c)) for c in METRIC_COLUMNS)


# ------------------------------------------------------------------------- data


@dataclass
class TrainingData:
    """Log-space tensors plus cached boundary bands for a fixed-size training set."""

    images: torch.Tensor  # N x 3 x S x S, log domain
    masks: torch.Tensor  # N x 1 x S x S, {0, 1}
    mask_arrays: np.ndarray  # N x S x S bool
    bands: list  # (b_in, b_out) per sample
    kstrength_in: np.ndarray

    def __len__(self):
        return self.images.shape[0]


def prepare_training_data(samples, image_size: int, band_radius: int) -> TrainingData:
    logs, masks, bands, ks, dropped = [], [], [], [], []
    for s in samples:
        img = s.image.data
        mask = as_mask(s.mask)
        if img.shape[:2] != (image_size, image_size):
            img = np.clip(resize_array(img, image_size, image_size), 0.0, 1.0)
            mask = resize_mask(mask, image_size, image_size)
        try:
            b_in, b_out = boundary_bands(mask, band_radius)
        except ValidationError:
            dropped.append(s.name)
            continue
        if mask.sum() < 2:
            dropped.append(s.name)
            continue
        logs.append(np.log(np.maximum(img, EPS_LOG)))
        masks.append(mask)
        bands.append((b_in, b_out))
        ks.append(band_means_ratio(img.mean(axis=2), b_in, b_out))
    if dropped:
        log.warning("skipping %d samples without usable boundary bands: %s", len(dropped), ", ".join(dropped[:10]))
    if not logs:
        raise DataError("no usable training samples")
    images = torch.from_numpy(np.ascontiguousarray(np.moveaxis(np.stack(logs), -1, 1), dtype=np.float32))
    mask_arr = np.stack(masks)
    return TrainingData(
        images=images,
        masks=torch.from_numpy(mask_arr[:, None].astype(np.float32)),
        mask_arrays=mask_arr,
        bands=bands,
        kstrength_in=np.asarray(ks),
    )


def batch_indices(n: int, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    """Indices for ``iteration`` (0-based) from the per-epoch shuffled index stream.

    Epoch ``e`` uses the permutation drawn from ``default_rng([seed, e])``, so
    the stream is a pure function of ``(seed, iteration)``.
    """
    start = iteration * batch_size
    out = []
    pos = start
    while len(out) < batch_size:
        epoch, offset = divmod(pos, n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        take = min(batch_size - len(out), n - offset)
        out.extend(perm[offset : offset + take].tolist())
        pos += take
    return np.asarray(out)


def epoch_of(iteration: int, batch_size: int, n: int) -> int:
    return (iteration * batch_size) // n


# ---------------------------------------------------------------------- training


def _seeds(seed: int):
    a, d = np.random.SeedSequence(seed).generate_state(2)
    return int(a), int(d)


def _as_tensor(arr: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr)).to(like.dtype)


@dataclass
class BatchState:
    idx: np.ndarray
    x: torch.Tensor  # log images, N x 3 x S x S
    m: torch.Tensor  # masks, N x 1 x S x S
    masks: np.ndarray  # N x S x S bool
    k_in: np.ndarray
    a: torch.Tensor | None  # attenuator output with its graph
    a_np: np.ndarray | None  # same, N x S x S x 3 float64
    k_att: np.ndarray
    lam: np.ndarray  # per-sample adversarial weight


def attenuator_objective(attenuator: UNet, detector: UNet, batch: BatchState, weights: LossWeights):
    """Batch-mean attenuator loss and its gradients w.r.t. the attenuator's parameters.

    The detector runs in train mode (batch statistics) but neither its
    parameters nor its running statistics change.
    Returns ``(loss, (nsd, sd, ph), grads_by_name)``.
    """
    n = len(batch.idx)
    x_np = np.moveaxis(batch.x.detach().numpy(), 1, -1).astype(np.float64)
    detector.train()
    # running statistics are restored only after the backward pass has used them
    with frozen_running_stats(detector):
        d_on_a = detector(batch.a)
        d_np = d_on_a.detach().numpy()[:, 0].astype(np.float64)
        losses = [attenuator_loss(x_np[j], batch.masks[j], batch.a_np[j], d_np[j], weights) for j in range(n)]
        g_a = np.moveaxis(np.stack([al.grad_a for al in losses]), -1, 1) / n
        g_d = np.stack([al.grad_d for al in losses])[:, None] / n
        names, params = zip(*attenuator.named_parameters())
        grads = torch.autograd.grad([batch.a, d_on_a], params,
                                    [_as_tensor(g_a, batch.a), _as_tensor(g_d, d_on_a)])
    parts = tuple(float(np.mean([getattr(al, k) for al in losses])) for k in ("nsd", "sd", "ph"))
    loss = float(np.mean([al.total for al in losses]))
    return loss, parts, dict(zip(names, grads))


class Trainer:
    """Holds both networks and their optimizer states between iterations."""

    def __init__(self, data: TrainingData, config: TrainConfig,
                 attenuator: UNet | None = None, detector: UNet | None = None,
                 adam_a: AdamState | None = None, adam_d: AdamState | None = None):
        self.data = data
        self.config = config
        seed_a, seed_d = _seeds(config.seed)
        self.detector = detector if detector is not None else init_params(config.detector, seed_d)
        self.adam_d = adam_d if adam_d is not None else AdamState(**config.adam_d)
        if config.use_attenuator:
            self.attenuator = attenuator if attenuator is not None else init_params(config.attenuator, seed_a)
            self.adam_a = adam_a if adam_a is not None else AdamState(**config.adam_a)
        else:
            self.attenuator, self.adam_a = None, None
        self.iteration = self.adam_d.step

    # -- one iteration -------------------------------------------------------

    def forward(self) -> "BatchState":
        """Draw the next batch and run the attenuator (train mode) on it."""
        cfg, w = self.config, self.config.weights
        idx = batch_indices(len(self.data), cfg.batch_size, cfg.seed, self.iteration)
        x = self.data.images[idx]
        m = self.data.masks[idx]
        k_in = self.data.kstrength_in[idx]
        if self.attenuator is None:
            return BatchState(idx, x, m, self.data.mask_arrays[idx], k_in, None, None,
                              k_in.copy(), np.zeros(len(idx)))
        self.attenuator.train()
        a = self.attenuator(torch.cat([x, m], dim=1))
        a_np = np.moveaxis(a.detach().numpy(), 1, -1).astype(np.float64)
        k_att = np.array([
            band_means_ratio(np.exp(a_np[j]).mean(axis=2), *self.data.bands[i]) for j, i in enumerate(idx)
        ])
        if cfg.adaptive_gate:
            lam = np.array([adaptive_adv_weight(k, w) for k in k_att])
        else:
            lam = np.full(len(idx), w.adv0)
        return BatchState(idx, x, m, self.data.mask_arrays[idx], k_in, a, a_np, k_att, lam)

    def update_detector(self, batch: "BatchState") -> StepRecord:
        """Forward the original and attenuated images through the detector and
        take one Adam step on the batch-mean detector loss."""
        cfg, w = self.config, self.config.weights
        n = len(batch.idx)
        self.detector.train()
        d_real = self.detector(batch.x)
        d_real_np = d_real.detach().numpy()[:, 0].astype(np.float64)
        if batch.a is not None:
            d_adv = self.detector(batch.a.detach())
            d_adv_np = d_adv.detach().numpy()[:, 0].astype(np.float64)
        else:
            d_adv, d_adv_np = None, np.zeros_like(d_real_np)
        losses = [detector_loss(d_real_np[j], d_adv_np[j], batch.masks[j], batch.lam[j], w) for j in range(n)]
        real = float(np.mean([dl.real for dl in losses]))
        adv = float(np.mean([dl.adv for dl in losses]))
        record = StepRecord(
            iteration=self.iteration + 1,
            loss_A=0.0, loss_nsd=0.0, loss_sd=0.0, loss_ph=0.0,
            loss_D=real + adv, loss_D_real=real, loss_D_adv=adv,
            mean_kstrength_in=float(np.mean(batch.k_in)),
            mean_kstrength_att=float(np.mean(batch.k_att)),
            gated_fraction=float(np.mean(batch.lam == 0.0)) if batch.a is not None else 0.0,
            epoch=epoch_of(self.iteration, cfg.batch_size, len(self.data)),
            sample_kstrength_att=tuple(float(v) for v in batch.k_att),
            sample_lambda_adv=tuple(float(v) for v in batch.lam),
        )
        if not record.is_finite():
            raise NumericalError("non-finite detector loss", record)
        outputs = [d_real]
        grads = [_as_tensor(np.stack([dl.grad_real for dl in losses])[:, None] / n, d_real)]
        if d_adv is not None and np.any(batch.lam > 0):
            outputs.append(d_adv)
            grads.append(_as_tensor(np.stack([dl.grad_adv for dl in losses])[:, None] / n, d_adv))
        names, params = zip(*self.detector.named_parameters())
        adam_step(self.detector, dict(zip(names, torch.autograd.grad(outputs, params, grads))), self.adam_d)
        return record

    def update_attenuator(self, batch: "BatchState", record: StepRecord) -> None:
        """One Adam step on the batch-mean attenuator loss; the detector is frozen."""
        loss, parts, grads = attenuator_objective(self.attenuator, self.detector, batch, self.config.weights)
        record.loss_A, (record.loss_nsd, record.loss_sd, record.loss_ph) = loss, parts
        if not record.is_finite():
            raise NumericalError("non-finite attenuator loss", record)
        adam_step(self.attenuator, grads, self.adam_a)

    def step(self) -> StepRecord:
        batch = self.forward()
        record = self.update_detector(batch)
        if self.attenuator is not None:
            self.update_attenuator(batch, record)
        self.iteration += 1
        return record

    # -- persistence -----------------------------------------------------------

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.detector, directory / "d.ckpt", self.adam_d)
        if self.attenuator is not None:
            save_checkpoint(self.attenuator, directory / "a.ckpt", self.adam_a)

    @classmethod
    def resume(cls, data: TrainingData, config: TrainConfig, snapshot_dir) -> "Trainer":
        snapshot_dir = Path(snapshot_dir)
        detector, adam_d = load_checkpoint(snapshot_dir / "d.ckpt", expected=config.detector)
        attenuator = adam_a = None
        if config.use_attenuator:
            attenuator, adam_a = load_checkpoint(snapshot_dir / "a.ckpt", expected=config.attenuator)
        if adam_d is None or (config.use_attenuator and adam_a is None):
            raise DataError(f"snapshot {snapshot_dir} lacks optimizer state")
        return cls(data, config, attenuator, detector, adam_a, adam_d)


@dataclass
class TrainResult:
    attenuator: UNet | None
    detector: UNet
    records: list
    config: TrainConfig

    def epoch_means(self, column="mean_kstrength_att"):
        """Per-epoch means of a record column, ordered by epoch."""
        by_epoch = {}
        for r in self.records:
            by_epoch.setdefault(r.epoch, []).append(getattr(r, column))
        return {e: float(np.mean(v)) for e, v in sorted(by_epoch.items())}


def _truncate_metrics(path: Path, iteration: int) -> None:
    """Drop rows logged after ``iteration`` (left over from an interrupted run)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    keep = rows[:1] + [r for r in rows[1:] if r and int(r[0]) <= iteration]
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(keep)


def train_loop(samples, config: TrainConfig, out_dir=None, resume_from=None, progress=None) -> TrainResult:
    """Train both networks for ``config.iterations`` iterations.

    With ``out_dir`` set, writes ``metrics.csv`` (one row per ``log_every``
    iterations), snapshots under ``snapshots/iter_NNNNNN/`` every
    ``checkpoint_every`` iterations, and ``a_final.ckpt`` / ``d_final.ckpt``.
    ``resume_from`` is a snapshot directory; the continued run is bitwise
    identical to an uninterrupted one.
    """
    if not samples:
        raise DataError("empty dataset")
    data = prepare_training_data(samples, config.image_size, config.radius)
    trainer = Trainer.resume(data, config, resume_from) if resume_from else Trainer(data, config)
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            metrics = out / "metrics.csv"
            fresh = not (resume_from and metrics.exists())
            if not fresh:
                _truncate_metrics(metrics, trainer.iteration)
            fh = open(metrics, "w" if fresh else "a", newline="")
        except OSError as exc:
            raise DataError(f"cannot write to {out}: {exc}") from exc
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(METRIC_COLUMNS)
    records = []
    try:
        while trainer.iteration < config.iterations:
            try:
                rec = trainer.step()
            except NumericalError as exc:
                if out is not None and exc.record is not None:
                    with open(out / "last_record.json", "w") as lf:
                        json.dump(asdict(exc.record), lf, indent=2)
                raise
            records.append(rec)
            if writer is not None and rec.iteration % config.log_every == 0:
                writer.writerow(rec.row())
            if out is not None and rec.iteration % config.checkpoint_every == 0 and rec.iteration < config.iterations:
                trainer.save(out / "snapshots" / f"iter_{rec.iteration:06d}")
            if progress is not None:
                progress(rec)
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        save_checkpoint(trainer.detector, out / "d_final.ckpt", trainer.adam_d)
        if trainer.attenuator is not None:
            save_checkpoint(trainer.attenuator, out / "a_final.ckpt", trainer.adam_a)
    return TrainResult(trainer.attenuator, trainer.detector, records, config)


def attenuate(attenuator: UNet, log_images: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Run the attenuator in inference mode on ``N x H x W x 3`` log images."""
    x = torch.from_numpy(np.ascontiguousarray(np.moveaxis(log_images, -1, 1), dtype=np.float32))
    m = torch.from_numpy(masks[:, None].astype(np.float32))
    attenuator.eval()
    with torch.no_grad():
        a = attenuator(torch.cat([x, m], dim=1))
    return np.moveaxis(a.numpy(), 1, -1).astype(np.float64)


def attenuate_linear(attenuator: UNet, images: np.ndarray, masks: np.ndarray, size: int) -> np.ndarray:
    """Attenuate linear ``N x H x W x 3`` images of any size.

    The network runs at ``size x size``; its log-domain change is resized back
    and applied to the full-resolution input.
    """
    n, h, w = images.shape[:3]
    small = np.stack([np.clip(resize_array(x, size, size), 0.0, 1.0) for x in images])
    small_masks = np.stack([resize_mask(m, size, size) for m in masks])
    log_in = np.log(np.maximum(small, EPS_LOG))
    delta = attenuate(attenuator, log_in, small_masks) - log_in
    full = np.log(np.maximum(images, EPS_LOG)) + np.stack([resize_array(d, h, w) for d in delta])
    return np.clip(np.exp(full), 0.0, 1.0)
