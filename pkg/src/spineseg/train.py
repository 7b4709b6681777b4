"""Training loop: balanced sampling, Adam, plateau decay, early stopping.

Batch size is one image (that is a contract, not a shortcut: per-view
balancing and the BN statistics were tuned for it). Every random stream --
sample order, augmentation draws, dropout -- derives from the config seed,
so one seed gives one bit-reproducible loss history.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .augment import augment
from .checkpoint import Checkpoint
from .losses import LossWeights, total_loss
from .optim import AdamState, adam_step
from .synth import balanced_batches, epoch_size
from .tensor import Tape, Tensor


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    lr_patience: int = 5
    lr_factor: float = 0.5
    lr_floor: float = 1e-6
    min_delta: float = 1e-5
    early_stop_patience: int = 15
    max_epochs: int = 150
    batch_size: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    augmentation: object = None  # AugmentationConfig or None for off
    seed: int = 0

    def validate(self):
        if self.batch_size != 1:
            raise ValueError("batch_size is fixed at 1")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not 0 < self.lr_factor <= 1 or self.lr0 <= 0 or self.lr_floor <= 0:
            raise ValueError("learning-rate settings must be positive "
                             "(factor in (0, 1])")
        self.weights.validate()
        return self


class PlateauSchedule:
    """Validation-loss bookkeeping: decay, early stop, best tracking.

    "Improved" means strictly below the best seen minus min_delta. After
    lr_patience consecutive non-improving epochs the rate halves (well,
    scales by lr_factor) and the decay counter restarts; after
    early_stop_patience of them the run is over. Kept free of any model
    code so the rules can be audited with a scripted loss sequence.
    """

    def __init__(self, cfg):
        self.cfg = cfg
        self.lr = cfg.lr0
        self.best = math.inf
        self.best_epoch = 0
        self.epochs_seen = 0
        self._since_improve = 0
        self._since_decay = 0

    def update(self, val_loss):
        """Feed one epoch's validation loss; returns (improved, stop)."""
        self.epochs_seen += 1
        improved = val_loss < self.best - self.cfg.min_delta
        if improved:
            self.best = val_loss
            self.best_epoch = self.epochs_seen
            self._since_improve = 0
            self._since_decay = 0
        else:
            self._since_improve += 1
            self._since_decay += 1
            if self._since_decay >= self.cfg.lr_patience:
                self.lr = max(self.lr * self.cfg.lr_factor, self.cfg.lr_floor)
                self._since_decay = 0
        return improved, self._since_improve >= self.cfg.early_stop_patience


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    history: list  # (train_loss, val_loss, lr) per epoch
    stopped_early: bool


def history_to_csv(history):
    lines = ["epoch,train_loss,val_loss,lr"]
    for i, (train, val, lr) in enumerate(history, start=1):
        lines.append(f"{i},{train!r},{val!r},{lr!r}")
    return "\n".join(lines) + "\n"


def validation_loss(model, samples, weights):
    """Mean total loss over a split, eval mode, no augmentation."""
    if not samples:
        raise ValueError("empty validation split")
    dtype = model.parameters()[0].data.dtype
    vals = []
    for s in samples:
        x = Tensor(np.asarray(s.image, dtype=dtype)[None, None])
        y = Tensor(np.asarray(s.mask, dtype=dtype)[None, None])
        coarse, fine = model.forward(x, mode="eval")
        vals.append(float(total_loss(coarse, fine, y, weights)
                          .data.reshape(-1)[0]))
    return float(np.mean(vals))


def train(model, datasets, cfg):
    """Train to the plateau rules; returns best/final checkpoints + history."""
    cfg.validate()
    train_split = list(datasets.get("train") or ())
    val_split = list(datasets.get("val") or ())
    if not train_split or not val_split:
        raise ValueError("training needs nonempty 'train' and 'val' splits")

    named = model.named_parameters()
    dtype = model.parameters()[0].data.dtype
    adam = AdamState.for_params(named)
    sched = PlateauSchedule(cfg)
    stream = balanced_batches(train_split, cfg.seed)
    steps = epoch_size(train_split)

    history = []
    best = None
    stopped_early = False
    for epoch in range(1, cfg.max_epochs + 1):
        lr_in_effect = sched.lr
        losses = []
        for step in range(steps):
            _, sample = next(stream)
            if cfg.augmentation is not None:
                sample = augment(sample, cfg.augmentation,
                                 seed=[cfg.seed, 11, epoch, step])
            x = Tensor(np.asarray(sample.image, dtype=dtype)[None, None])
            y = Tensor(np.asarray(sample.mask, dtype=dtype)[None, None])
            drop_rng = np.random.default_rng([cfg.seed, 7, epoch, step])
            with Tape() as tape:
                coarse, fine = model.forward(x, mode="train", rng=drop_rng)
                loss = total_loss(coarse, fine, y, cfg.weights)
                val = float(loss.data.reshape(-1)[0])
                if not math.isfinite(val):
                    raise RuntimeError(
                        f"non-finite loss {val} at epoch {epoch} step {step} "
                        f"(sample {sample.sample_id}/{sample.view}, "
                        f"lr {lr_in_effect:g}); aborting")
                tape.backward(loss)
            adam_step(named, adam, lr_in_effect)
            model.zero_grad()
            losses.append(val)

        val_loss = validation_loss(model, val_split, cfg.weights)
        history.append((float(np.mean(losses)), val_loss, lr_in_effect))
        improved, stop = sched.update(val_loss)
        if improved or best is None:
            best = Checkpoint.from_model(model, adam=adam, history=history)
        if stop:
            stopped_early = True
            break

    final = Checkpoint.from_model(model, adam=adam, history=history)
    return TrainResult(best=best, final=final, history=history,
                       stopped_early=stopped_early)
