"""Semi-supervised training loop, checkpoints and evaluation."""
from __future__ import annotations

import io
import json
import logging
import math
import time
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import SplitSpec, load_dataset, split as make_split
from .io import CSVLog, atomic_write_bytes, atomic_write_csv, atomic_write_text
from .losses import LossBreakdown, WarmupClock, total_loss, warmup
from .metrics import MetricReport, evaluate_masks
from .net import DEMS
from .oaa import SamplePair, apply_plan, fallback_plan, sample_plan

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "NonFiniteLossError",
    "lr_schedule",
    "clock_at",
    "PoolSampler",
    "Batch",
    "make_batch",
    "Trainer",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "predict",
    "evaluate",
    "LOSS_COLUMNS",
]

LOSS_COLUMNS = ("iteration", "lambda", "fusion", "sensitivity_soft", "sensitivity_hard",
                "unsupervised", "total", "lr")
VAL_COLUMNS = ("iteration", "dsc", "iou", "sen", "pre", "pa")


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    max_iterations: int = 2000
    lambda_update_period: int = 150
    labeled_fraction: float = 0.2
    oaa_level: int = 5
    oaa: bool = True
    rre: bool = True
    sensitivity_loss: bool = True
    semi_supervised: bool = True
    seed: int = 0
    base_channels: int = 16
    input_size: int = 224
    val_every: int = 200
    num_threads: int | None = None

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")
        if self.lambda_update_period < 1:
            raise ValueError("lambda_update_period must be positive")
        if self.input_size % 16:
            raise ValueError(f"input_size must be divisible by 16, got {self.input_size}")
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError("labeled_fraction must be in (0, 1]")
        if not 1 <= self.oaa_level <= 5:
            raise ValueError("oaa_level must be in 1..5")

    @classmethod
    def from_mapping(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


class NonFiniteLossError(RuntimeError):
    def __init__(self, snapshot: dict):
        self.snapshot = snapshot
        super().__init__(f"non-finite loss at iteration {snapshot['iteration']}: {snapshot}")


def lr_schedule(iteration: int, config: TrainConfig) -> float:
    """Single-cycle cosine annealing from base_lr to 0."""
    return config.base_lr * 0.5 * (1 + math.cos(math.pi * iteration / config.max_iterations))


def clock_at(iteration: int, config: TrainConfig) -> WarmupClock:
    """Warm-up clock advancing once per ``lambda_update_period`` iterations."""
    period = config.lambda_update_period
    t_max = config.max_iterations // period
    return WarmupClock(min(iteration // period, t_max), t_max)


class PoolSampler:
    """Draws items from a pool epoch by epoch, reshuffling between epochs."""

    def __init__(self, items: list, rng: np.random.Generator):
        if not items:
            raise ValueError("cannot sample from an empty pool")
        self.items = list(items)
        self.rng = rng
        self._order: list[int] = []

    def draw(self, k: int) -> list:
        out = []
        for _ in range(k):
            if not self._order:
                self._order = list(self.rng.permutation(len(self.items)))
            out.append(self.items[self._order.pop(0)])
        return out


@dataclass
class Batch:
    labeled_images: torch.Tensor
    labeled_masks: torch.Tensor
    unlabeled_images: torch.Tensor | None
    identifiers: list[str] = field(default_factory=list)
    plans: list = field(default_factory=list)

    @property
    def n_labeled(self) -> int:
        return self.labeled_images.shape[0]

    @property
    def n_unlabeled(self) -> int:
        return 0 if self.unlabeled_images is None else self.unlabeled_images.shape[0]

    def images(self) -> torch.Tensor:
        if self.unlabeled_images is None:
            return self.labeled_images
        return torch.cat([self.labeled_images, self.unlabeled_images])


def _augment(pair: SamplePair, rng: np.random.Generator, config: TrainConfig):
    # without OAA, fall back to random flip + rotation
    plan = sample_plan(rng, config.oaa_level) if config.oaa else fallback_plan(rng)
    return apply_plan(pair, plan, rng), plan


def _stack(arrays) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(a, dtype=np.float32) for a in arrays])[:, None])


def make_batch(labeled: PoolSampler, unlabeled: PoolSampler | None, rng: np.random.Generator,
               config: TrainConfig, augment: bool = True) -> Batch:
    """Half labeled, half unlabeled; all labeled when there is no unlabeled pool."""
    if labeled is None:
        raise ValueError("labeled pool is empty")
    if unlabeled is None:
        lab_pairs, unl_pairs = labeled.draw(config.batch_size), []
    else:
        half = config.batch_size // 2
        lab_pairs, unl_pairs = labeled.draw(half), unlabeled.draw(half)
    plans = []
    out_lab, out_unl = [], []
    for p in lab_pairs:
        if augment:
            p, plan = _augment(p, rng, config)
            plans.append(plan)
        out_lab.append(p)
    for p in unl_pairs:
        p = SamplePair(p.image, None, p.identifier)
        if augment:
            p, plan = _augment(p, rng, config)
            plans.append(plan)
        out_unl.append(p)
    return Batch(
        _stack([p.image for p in out_lab]),
        _stack([p.mask for p in out_lab]),
        _stack([p.image for p in out_unl]) if out_unl else None,
        [p.identifier for p in out_lab + out_unl],
        plans,
    )


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, model: DEMS, config: TrainConfig, iteration: int, extra: dict | None = None) -> None:
    payload = {
        "state_dict": model.state_dict(),
        "base_channels": model.base_channels,
        "use_rre": model.use_rre,
        "input_size": config.input_size,
        "seed": config.seed,
        "iteration": iteration,
        "config": config.to_dict(),
        "version": __version__,
        **(extra or {}),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> tuple[DEMS, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = DEMS(payload["base_channels"], use_rre=payload.get("use_rre", True))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    return model, meta


@torch.no_grad()
def predict(model: DEMS, images, batch_size: int = 16) -> np.ndarray:
    """Main-decoder probabilities (N, H, W) in eval mode."""
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model(_stack(images[i:i + batch_size])).main[:, 0].numpy())
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0,))


# -- training ---------------------------------------------------------------

@dataclass
class TrainResult:
    out_dir: Path
    best_dsc: float
    best_iteration: int
    iterations: int
    val_history: list[dict]
    loss_history: list[dict]
    split: SplitSpec
    seconds: float


class Trainer:
    """Owns the model, optimizer, rng streams and logs for one run."""

    def __init__(self, config: TrainConfig, data_root, out_dir):
        self.config = config
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if config.num_threads:
            torch.set_num_threads(config.num_threads)

        size = (config.input_size, config.input_size)
        self.manifest, pairs = load_dataset(data_root, size)
        self.split = make_split(self.manifest, config.seed, config.labeled_fraction)
        self.split.save(self.out_dir / "split.json")
        by_id = {p.identifier: p for p in pairs}
        self.val_pairs = [by_id[i] for i in self.split.val_ids]

        aug_ss, pert_ss, batch_ss, init_ss = np.random.SeedSequence(config.seed).spawn(4)
        self.aug_rng = np.random.default_rng(aug_ss)
        self.batch_rng = np.random.default_rng(batch_ss)
        self.pert_gen = torch.Generator().manual_seed(int(pert_ss.generate_state(1)[0]))
        torch.manual_seed(int(init_ss.generate_state(1)[0]))

        self.labeled_pool = PoolSampler([by_id[i] for i in self.split.labeled_ids], self.batch_rng)
        unl = self.split.unlabeled_ids
        self.unlabeled_pool = None
        if config.semi_supervised and unl:
            self.unlabeled_pool = PoolSampler(
                [SamplePair(by_id[i].image, None, i) for i in unl], self.batch_rng)

        self.model = DEMS(config.base_channels, use_rre=config.rre)
        self.optimizer = torch.optim.SGD(self.model.parameters(), lr=config.base_lr,
                                         momentum=config.momentum, weight_decay=config.weight_decay)
        self.iteration = 0
        self.best_dsc = -1.0
        self.best_iteration = -1
        self.loss_history: list[dict] = []
        self.val_history: list[dict] = []
        if config.max_iterations < config.lambda_update_period:
            log.warning("max_iterations < lambda_update_period: warm-up weight fixed at 1")

    def step(self) -> dict:
        cfg = self.config
        it = self.iteration
        lr = lr_schedule(it, cfg)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        lam = warmup(clock_at(it, cfg))

        batch = make_batch(self.labeled_pool, self.unlabeled_pool, self.aug_rng, cfg)
        self.model.train()
        out = self.model(batch.images(), generator=self.pert_gen)
        nl = batch.n_labeled
        maps = out.all()
        labeled = [([m[:nl] for m in maps], batch.labeled_masks)]
        unlabeled = [[m[nl:] for m in maps]] if batch.n_unlabeled else []
        br: LossBreakdown = total_loss(labeled, unlabeled, lam, use_sensitivity=cfg.sensitivity_loss)
        row = {
            "iteration": it, "lambda": br.lam, "fusion": br.fusion,
            "sensitivity_soft": br.sensitivity_soft, "sensitivity_hard": br.sensitivity_hard,
            "unsupervised": br.unsupervised, "total": br.total, "lr": lr,
        }
        if not all(math.isfinite(row[k]) for k in LOSS_COLUMNS):
            snap = {k: row[k] for k in LOSS_COLUMNS}
            atomic_write_text(self.out_dir / "nonfinite_snapshot.json", json.dumps(snap, indent=2) + "\n")
            raise NonFiniteLossError(snap)
        self.optimizer.zero_grad(set_to_none=True)
        br.tensor.backward()
        self.optimizer.step()
        self.iteration += 1
        return row

    def validate(self) -> dict:
        probs = predict(self.model, [p.image for p in self.val_pairs])
        report = evaluate_masks([(pr > 0.5, p.mask) for pr, p in zip(probs, self.val_pairs)],
                                [p.identifier for p in self.val_pairs])
        return {"iteration": self.iteration, **report.mean}

    def run(self) -> TrainResult:
        cfg = self.config
        t0 = time.time()
        with CSVLog(self.out_dir / "loss.csv", LOSS_COLUMNS) as loss_log, \
                CSVLog(self.out_dir / "val.csv", VAL_COLUMNS) as val_log:
            while self.iteration < cfg.max_iterations:
                row = self.step()
                loss_log.write(row)
                self.loss_history.append(row)
                if self.iteration % cfg.val_every == 0 or self.iteration == cfg.max_iterations:
                    v = self.validate()
                    val_log.write(v)
                    self.val_history.append(v)
                    log.info("iter %d  loss %.4f  lambda %.4f  val DSC %.4f",
                             self.iteration, row["total"], row["lambda"], v["dsc"])
                    if v["dsc"] > self.best_dsc:
                        self.best_dsc, self.best_iteration = v["dsc"], self.iteration
                        save_checkpoint(self.out_dir / "best.ckpt", self.model, cfg, self.iteration,
                                        {"val_dsc": v["dsc"]})
        save_checkpoint(self.out_dir / "last.ckpt", self.model, cfg, self.iteration)
        return TrainResult(self.out_dir, self.best_dsc, self.best_iteration, self.iteration,
                           self.val_history, self.loss_history, self.split, time.time() - t0)


def train(config: TrainConfig, data_root, out_dir) -> TrainResult:
    return Trainer(config, data_root, out_dir).run()


# -- evaluation -------------------------------------------------------------

@dataclass
class Evaluation:
    report: MetricReport
    identifiers: list[str]
    probabilities: np.ndarray
    masks: list[np.ndarray]
    leaked: list[str]


def evaluate(checkpoint, data_root, split: str = "val", size: int | None = None,
             split_record=None) -> Evaluation:
    """Main-decoder evaluation of a checkpoint.

    ``split="val"`` restricts to the validation ids of the run's split record
    (``split.json`` beside the checkpoint unless ``split_record`` is given);
    ``"external"`` evaluates every image under ``data_root``.
    """
    model, meta = load_checkpoint(checkpoint)
    input_size = meta["input_size"]
    if size is not None and size != input_size:
        raise ValueError(f"resolution {size} does not match checkpoint input size {input_size}")
    _, pairs = load_dataset(data_root, (input_size, input_size))
    rec_path = Path(split_record) if split_record else Path(checkpoint).with_name("split.json")
    record = SplitSpec.load(rec_path) if rec_path.exists() else None
    if split == "val":
        if record is None:
            raise FileNotFoundError(f"split record {rec_path} not found")
        wanted = set(record.val_ids)
        pairs = [p for p in pairs if p.identifier in wanted]
        if len(pairs) != len(wanted):
            raise ValueError("dataset does not contain every validation identifier of the split record")
    elif split != "external":
        raise ValueError(f"unknown split {split!r}")
    leaked = sorted({p.identifier for p in pairs} & set(record.train_ids)) if record else []
    if leaked:
        log.warning("%d evaluation identifiers also appear in the training split", len(leaked))
    probs = predict(model, [p.image for p in pairs])
    ids = [p.identifier for p in pairs]
    report = evaluate_masks([(pr > 0.5, p.mask) for pr, p in zip(probs, pairs)], ids)
    return Evaluation(report, ids, probs, [p.mask for p in pairs], leaked)


def write_report(ev: Evaluation, out_dir) -> None:
    out = Path(out_dir)
    atomic_write_text(out / "metrics.json", json.dumps(ev.report.to_dict(), indent=2) + "\n")
    atomic_write_text(out / "metrics.txt", ev.report.summary() + "\n")
    atomic_write_csv(out / "per_image.csv", ev.report.per_image)
