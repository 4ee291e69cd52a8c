"""Deterministic multi-phase training loop.

Phase A trains the seen-side heads with phi_t frozen; phi_t is then warm
started from phi_s. Phase B trains all enabled heads jointly at the phase-1
learning rate. Phase C, when ``phase2_epochs > 0``, continues at the small
phase-2 rate and additionally trains the feature adapter if it is enabled.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dsen.data import ZslDataset, validate_dataset
from dsen.evaluation import evaluate
from dsen.losses import Batch, LossWeights, Toggles, total_loss
from dsen.model import DsenModel, config_hash, save_checkpoint
from dsen.nnkernel import AdamState, adam_step

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    toggles: Toggles = Toggles()
    weights: LossWeights = LossWeights()
    phase1_lr: float = 1e-3
    phase2_lr: float = 1e-5
    phase1_epochs: int = 50
    phase2_epochs: int = 0
    batch_size: int = 64
    beta1: float = 0.5
    beta2: float = 0.999
    weight_decay: float = 5e-5
    adam_eps: float = 1e-8
    hidden_dim: int = 1024
    seed: int = 0
    adapter_enabled: bool = False
    warm_start_epoch: int | None = None  # None -> phase1_epochs // 2
    probe_tau: float | None = None
    detach_pseudo: bool = True

    def __post_init__(self):
        if isinstance(self.toggles, dict):
            self.toggles = Toggles(**self.toggles)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.phase1_lr <= 0 or self.phase2_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if not self.toggles.enabled():
            raise ValueError("at least one loss term must be enabled")
        if self.warm_start_epoch is not None and not 0 <= self.warm_start_epoch <= self.phase1_epochs:
            raise ValueError("warm_start_epoch must lie in [0, phase1_epochs]")

    @classmethod
    def for_mode(cls, mode: str, **kwargs) -> "TrainConfig":
        return cls(toggles=Toggles.from_mode(mode), **kwargs)

    @property
    def resolved_warm_start(self) -> int:
        if self.warm_start_epoch is None:
            return self.phase1_epochs // 2
        return self.warm_start_epoch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    lr: float
    loss: float
    terms: dict
    metrics: dict = field(default_factory=dict)
    wall_time: float = field(default=0.0, compare=False)

    def log_line(self) -> str:
        # wall time stays out of the log so that reruns are byte-identical
        row = {"epoch": self.epoch, "phase": self.phase, "lr": self.lr, "loss": self.loss, **self.terms}
        row.update(self.metrics)
        return json.dumps(row, sort_keys=True)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    wall_time: float = field(default=0.0, compare=False)

    def term_history(self, name: str) -> list:
        return [r.terms[name] for r in self.epochs if name in r.terms]


def make_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded permutation of ``range(n)`` cut into consecutive batches."""
    if n < 1:
        raise ValueError("need at least one sample")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def init_model(ds: ZslDataset, config: TrainConfig) -> DsenModel:
    return DsenModel.init(
        ds.attr_dim,
        ds.feat_dim,
        config.hidden_dim,
        ds.seen_classes,
        ds.unseen_classes,
        seed=config.seed,
        adapter=config.adapter_enabled,
    )


def _phase_plan(config: TrainConfig) -> list[tuple[str, int, float]]:
    ws = config.resolved_warm_start
    plan = [("A", ws, config.phase1_lr), ("B", config.phase1_epochs - ws, config.phase1_lr)]
    plan.append(("C", config.phase2_epochs, config.phase2_lr))
    return plan


def train(
    ds: ZslDataset,
    config: TrainConfig,
    out_dir=None,
    model: DsenModel | None = None,
) -> tuple[DsenModel, TrainReport]:
    """Train a DSEN model on the seen training split of ``ds``.

    When ``out_dir`` is given, writes ``train_log.jsonl`` (one JSON object per
    epoch) and checkpoints ``phaseA.ckpt``, ``phaseB.ckpt``, ``phaseC.ckpt``
    and ``model.ckpt``.

    Raises:
        TrainingError: invalid dataset or empty training split.
        NonFiniteError: a loss term or gradient became NaN/inf.
    """
    problems = validate_dataset(ds)
    if problems:
        raise TrainingError("invalid dataset: " + "; ".join(problems))
    train_idx = ds.train_indices()
    if train_idx.size == 0:
        raise TrainingError("the seen training split is empty")

    model = init_model(ds, config) if model is None else model
    params = model.parameters()
    chash = config_hash(config.to_dict())
    state = AdamState(
        lr=config.phase1_lr,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )
    seen_attrs, unseen_attrs = ds.seen_attrs, ds.unseen_attrs
    labels = ds.seen_index(ds.labels[train_idx])
    features = ds.features[train_idx]

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w")

    report = TrainReport()
    t_start = time.perf_counter()
    epoch = 0
    total_epochs = config.phase1_epochs + config.phase2_epochs
    try:
        for phase, n_epochs, lr in _phase_plan(config):
            if phase == "B" and total_epochs > epoch:
                model.warm_start_unseen()
            if n_epochs == 0:
                continue
            state.lr = lr
            frozen = ("phi_t.", "adapter.") if phase == "A" else ("adapter.",)
            if phase == "C" and config.adapter_enabled:
                frozen = ()
            for _ in range(n_epochs):
                t0 = time.perf_counter()
                sums: dict = {}
                n_steps = 0
                for bidx in make_batches(train_idx.size, config.batch_size, config.seed, epoch):
                    batch = Batch(features[bidx], labels[bidx], seen_attrs, unseen_attrs)
                    res = total_loss(
                        model,
                        batch,
                        config.weights,
                        config.toggles,
                        need_grad=True,
                        frozen=frozen,
                        seen_only=phase == "A",
                        detach_pseudo=config.detach_pseudo,
                    )
                    adam_step(params, res.grads, state)
                    sums["loss"] = sums.get("loss", 0.0) + res.value
                    for k, v in res.terms.items():
                        sums[k] = sums.get(k, 0.0) + v
                    n_steps += 1
                epoch += 1
                means = {k: v / n_steps for k, v in sums.items()}
                loss = means.pop("loss")
                metrics = {}
                if config.probe_tau is not None:
                    r = evaluate(model, ds, config.probe_tau)
                    metrics = {"mca_s": r.mca_s, "mca_t": r.mca_t, "h": r.h}
                rec = EpochRecord(epoch, phase, lr, loss, means, metrics, time.perf_counter() - t0)
                report.epochs.append(rec)
                log.debug("epoch %d phase %s loss %.6f", epoch, phase, loss)
                if log_fh is not None:
                    log_fh.write(rec.log_line() + "\n")
            if out is not None:
                save_checkpoint(model, out / f"phase{phase}.ckpt", chash)
    finally:
        if log_fh is not None:
            log_fh.close()
    report.wall_time = time.perf_counter() - t_start
    if out is not None:
        save_checkpoint(model, out / "model.ckpt", chash)
    return model, report
