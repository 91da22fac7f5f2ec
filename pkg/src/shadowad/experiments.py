"""Desk-scale training workload: synthetic train/test splits, the full system
and its two ablations (no attenuator, no physics loss), and the summary
numbers the acceptance suite checks."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from shadowad.adversarial import TrainConfig, attenuate, train_loop
from shadowad.evaluation import evaluate_dataset
from shadowad.physics import LossWeights, physics_loss
from shadowad.synthdata import DatasetSpec, generate_dataset

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_attenuator", "no_physics")


@dataclass(frozen=True)
class DeskWorkload:
    train_count: int = 300
    test_count: int = 100
    size: int = 64
    train_k_range: tuple = (0.0, 0.6)
    weak_k_range: tuple = (0.6, 0.9)
    penumbra_sigma: float = 1.0
    texture: str = "smooth-noise"
    iterations: int = 2000
    batch_size: int = 8
    seeds: tuple = (0, 1, 2)
    test_seed: int = 5000
    weak_seed: int = 6000

    def train_spec(self, seed: int) -> DatasetSpec:
        return DatasetSpec(count=self.train_count, size=self.size, k_range=self.train_k_range,
                           penumbra_sigma=self.penumbra_sigma, texture=self.texture, seed=1000 + seed)

    def test_spec(self) -> DatasetSpec:
        return DatasetSpec(count=self.test_count, size=self.size, k_range=self.train_k_range,
                           penumbra_sigma=self.penumbra_sigma, texture=self.texture, seed=self.test_seed)

    def weak_spec(self) -> DatasetSpec:
        return DatasetSpec(count=self.test_count, size=self.size, k_range=self.weak_k_range,
                           penumbra_sigma=self.penumbra_sigma, texture=self.texture, seed=self.weak_seed)

    def train_config(self, variant: str, seed: int) -> TrainConfig:
        cfg = TrainConfig(iterations=self.iterations, batch_size=self.batch_size, seed=seed,
                          image_size=self.size, checkpoint_every=max(1, self.iterations // 4))
        if variant == "no_attenuator":
            return replace(cfg, use_attenuator=False)
        if variant == "no_physics":
            return replace(cfg, weights=replace(LossWeights(), ph=0.0))
        if variant != "full":
            raise ValueError(f"unknown variant {variant!r}")
        return cfg


@dataclass
class VariantResult:
    variant: str
    seed: int
    test_ber: float
    weak_ber: float
    seconds: float
    kstrength_att_by_epoch: dict = field(default_factory=dict)
    gated_fraction_last_epoch: float = 0.0
    generated_physics_loss: float | None = None

    @property
    def kstrength_drop(self) -> float:
        """Relative decrease of mean attenuated shadow strength, first to last epoch."""
        ks = list(self.kstrength_att_by_epoch.values())
        return (ks[0] - ks[-1]) / ks[0]


def generated_physics_loss(attenuator, samples) -> float:
    """Mean physics loss of the attenuator's outputs over ``samples`` (inference mode)."""
    logs = np.stack([np.log(np.maximum(s.image.data, 1 / 255)) for s in samples])
    masks = np.stack([s.mask for s in samples])
    out = attenuate(attenuator, logs, masks)
    return float(np.mean([physics_loss(o, x, m)[0] for o, x, m in zip(out, logs, masks)]))


def run_variant(workload: DeskWorkload, variant: str, seed: int, out_dir=None,
                datasets=None) -> VariantResult:
    train, test, weak = datasets or (
        generate_dataset(workload.train_spec(seed))[0],
        generate_dataset(workload.test_spec())[0],
        generate_dataset(workload.weak_spec())[0],
    )
    cfg = workload.train_config(variant, seed)
    start = time.perf_counter()
    result = train_loop(train, cfg, out_dir=out_dir)
    seconds = time.perf_counter() - start
    by_epoch = result.epoch_means("mean_kstrength_att")
    gated = result.epoch_means("gated_fraction")
    vr = VariantResult(
        variant=variant,
        seed=seed,
        test_ber=evaluate_dataset(result.detector, test).ber,
        weak_ber=evaluate_dataset(result.detector, weak).ber,
        seconds=seconds,
        kstrength_att_by_epoch=by_epoch,
        gated_fraction_last_epoch=list(gated.values())[-1],
    )
    if result.attenuator is not None:
        vr.generated_physics_loss = generated_physics_loss(result.attenuator, test)
    log.info("%s seed=%d test BER %.2f weak BER %.2f (%.0fs)", variant, seed, vr.test_ber, vr.weak_ber, seconds)
    return vr


def run_workload(workload: DeskWorkload = DeskWorkload(), out_dir=None, physics_seeds=None):
    """Run the full system and the no-attenuator ablation for every seed, and
    the no-physics ablation for ``physics_seeds`` (default: the first seed).

    Returns a dict of :class:`VariantResult` lists keyed by variant and writes
    ``summary.json`` into ``out_dir`` when given.
    """
    physics_seeds = workload.seeds[:1] if physics_seeds is None else physics_seeds
    test = generate_dataset(workload.test_spec())[0]
    weak = generate_dataset(workload.weak_spec())[0]
    results = {v: [] for v in VARIANTS}
    out = Path(out_dir) if out_dir is not None else None
    for seed in workload.seeds:
        train = generate_dataset(workload.train_spec(seed))[0]
        plan = ["full", "no_attenuator"] + (["no_physics"] if seed in physics_seeds else [])
        for variant in plan:
            run_dir = out / f"{variant}_seed{seed}" if out is not None else None
            results[variant].append(run_variant(workload, variant, seed, run_dir, (train, test, weak)))
            if out is not None:
                write_summary(results, workload, out / "summary.json")
    return results


def write_summary(results, workload: DeskWorkload, path):
    doc = {
        "workload": asdict(workload),
        "runs": {v: [asdict(r) | {"kstrength_drop": r.kstrength_drop} for r in rs] for v, rs in results.items()},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def median_weak_ber(results, variant: str) -> float:
    return float(np.median([r.weak_ber for r in results[variant]]))
