"""Multi-task training: classification plus an optional self-supervised task.

Each iteration takes two optimizer steps. The first updates the trunk and the
class head on clean, labelled images; the second updates the trunk and the
auxiliary head on the auxiliary loss scaled by ``lam``. Neither head is in
the other step's parameter list, so it is untouched (momentum included).
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .model import AUX_TASKS, MultiHeadModel
from .rng import Rng
from .splits import HoldOutSplit
from .tensor import SGD, Tensor
from .transforms import RotationBatch, augment_crop_flip, random_center_mask, rotate_batch


@dataclass
class TrainConfig:
    lam: float = 0.5
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.1
    lr_schedule: list[tuple[int, float]] | None = None
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    aux_task: str = "none"
    rotation_mode: str = "all_four"
    mask_augment: bool = False
    crop_flip_pad: int = 0
    cpc_patch: int = 8
    cpc_stride: int = 4
    cpc_negatives: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.aux_task not in AUX_TASKS:
            raise ValueError(f"unknown aux task {self.aux_task!r}; expected one of {AUX_TASKS}")
        if self.lr_schedule is not None:
            self.lr_schedule = [(int(e), float(m)) for e, m in self.lr_schedule]

    def schedule(self) -> list[tuple[int, float]]:
        """Multiplier milestones; by default divide by 5 at 60% and 80% of training."""
        if self.lr_schedule is not None:
            return self.lr_schedule
        e = self.epochs
        return [(int(round(0.6 * e)), 0.2), (int(round(0.8 * e)), 0.2)]

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for start, mult in self.schedule():
            if epoch >= start:
                lr *= mult
        return lr


@dataclass
class EpochRecord:
    epoch: int
    learning_rate: float
    primary_loss: float
    aux_loss: float | None
    train_accuracy: float
    val_accuracy: float | None = None
    wall_clock: float = 0.0


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)

    def to_dict(self, with_timing: bool = False) -> list[dict]:
        rows = [asdict(r) for r in self.epochs]
        if not with_timing:
            for r in rows:
                r.pop("wall_clock")
        return rows


def combined_loss(primary_loss: float, aux_loss: float, lam: float) -> float:
    return primary_loss + lam * aux_loss


def rotation_loss(model: MultiHeadModel, batch: RotationBatch) -> Tensor:
    """Mean 4-way cross-entropy of the rotation head."""
    if not model.has_rot_head:
        raise ValueError("rotation_loss: model has no rotation head")
    return T.cross_entropy(model.rot_logits(batch.images), batch.rotation_labels)


# ---------------------------------------------------------------------------
# contrastive predictive coding, negatives taken from the same image


def info_nce(scores: Tensor) -> Tensor:
    """Mean cross-entropy of picking column 0 (the true candidate) in each row."""
    pick = np.zeros(scores.shape)
    pick[:, 0] = 1.0
    return T.neg(T.mean(T.sum_(T.mul(T.log_softmax(scores, axis=1), Tensor(pick)), axis=1)))


def cpc_terms(rows: int, cols: int, n_pred_steps: int) -> list[tuple[int, int, int]]:
    """(step, context cell, target cell) triples; cells are row-major indices in one image."""
    return [(d, r * cols + c, (r + d) * cols + c)
            for d in range(1, n_pred_steps + 1)
            for r in range(rows - d)
            for c in range(cols)]


def extract_patches(images: np.ndarray, rows: int, cols: int, patch: int, stride: int) -> np.ndarray:
    """N x C x H x W -> (N * rows * cols) x C x patch x patch, ordered image, row, col."""
    n, ch, h, w = images.shape
    if (rows - 1) * stride + patch > h or (cols - 1) * stride + patch > w:
        raise ValueError(f"patch grid {rows}x{cols} (patch {patch}, stride {stride}) does not fit {h}x{w}")
    out = np.empty((n, rows, cols, ch, patch, patch))
    for r in range(rows):
        for c in range(cols):
            out[:, r, c] = images[:, :, r * stride:r * stride + patch, c * stride:c * stride + patch]
    return out.reshape(n * rows * cols, ch, patch, patch)


def grid_for(image_side: int, patch: int, stride: int) -> tuple[int, int, int, int]:
    cells = (image_side - patch) // stride + 1
    return cells, cells, patch, stride


def cpc_loss(model: MultiHeadModel, images, patch_grid: tuple[int, int, int, int],
             n_pred_steps: int, rng: Rng, n_negatives: int | None = None) -> Tensor:
    """InfoNCE loss for predicting each patch encoding from the patch ``d`` rows above.

    Candidates for a prediction are the true patch plus ``n_negatives`` other
    patches of the same image (all of them when None).
    """
    rows, cols, patch, stride = patch_grid
    if rows <= n_pred_steps:
        raise ValueError(f"grid with {rows} rows is too small for {n_pred_steps} prediction steps")
    if not model.has_cpc_head:
        raise ValueError("cpc_loss: model has no CPC head")
    if n_pred_steps > model.arch.cpc_steps:
        raise ValueError(f"model predicts {model.arch.cpc_steps} step(s), asked for {n_pred_steps}")
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    n = len(images)
    cells = rows * cols
    if n_negatives is None:
        n_negatives = cells - 1
    if not 1 <= n_negatives <= cells - 1:
        raise ValueError(f"n_negatives must lie in [1, {cells - 1}]")

    z = model.encode_patches(extract_patches(images, rows, cols, patch, stride))
    ctx = model.cpc_context(z)
    losses = []
    for d in range(1, n_pred_steps + 1):
        terms = [(a, b) for step, a, b in cpc_terms(rows, cols, n_pred_steps) if step == d]
        ctx_idx, cand_idx = [], []
        for img in range(n):
            base = img * cells
            for a, b in terms:
                others = np.array([j for j in range(cells) if j != b])
                if n_negatives < len(others):
                    others = rng.choice(others, size=n_negatives, replace=False)
                ctx_idx.append(base + a)
                cand_idx.append(np.concatenate([[base + b], base + others]))
        cand_idx = np.array(cand_idx)
        m, k = cand_idx.shape
        pred = model.cpc_predict(T.take(ctx, ctx_idx), d)
        cand = T.reshape(T.take(z, cand_idx.reshape(-1)), (m, k, -1))
        scores = T.sum_(T.mul(T.reshape(pred, (m, 1, -1)), cand), axis=2)
        losses.append((info_nce(scores), m))
    total = sum(m for _, m in losses)
    out = T.scale(losses[0][0], losses[0][1] / total)
    for loss, m in losses[1:]:
        out = T.add(out, T.scale(loss, m / total))
    return out


# ---------------------------------------------------------------------------
# training


def _zero_grads(model: MultiHeadModel) -> None:
    for p in model.params.values():
        p.grad = None


def primary_step(model: MultiHeadModel, opt: SGD, images: np.ndarray, labels: np.ndarray,
                 learning_rate: float) -> tuple[float, int]:
    """Cross-entropy update of trunk and class head; returns (loss, correct count)."""
    _zero_grads(model)
    logits = model.class_logits(images)
    loss = T.cross_entropy(logits, labels)
    T.backward(loss)
    opt.step(model.primary_params(), learning_rate)
    return loss.item(), int((logits.data.argmax(axis=1) == labels).sum())


def aux_step(model: MultiHeadModel, opt: SGD, aux_batch, cfg: TrainConfig, learning_rate: float,
             rng: Rng) -> float:
    """``lam``-scaled auxiliary update of trunk and auxiliary head; returns the unscaled loss.

    With ``lam == 0`` the loss is evaluated but no update is taken.
    """
    _zero_grads(model)
    if cfg.aux_task == "rotation":
        aux = rotation_loss(model, aux_batch)
    else:
        grid = grid_for(aux_batch.shape[-1], cfg.cpc_patch, cfg.cpc_stride)
        aux = cpc_loss(model, aux_batch, grid, model.arch.cpc_steps, rng, cfg.cpc_negatives)
    if cfg.lam > 0:
        T.backward(T.scale(aux, cfg.lam))
        opt.step(model.aux_params(), learning_rate)
    _zero_grads(model)
    return aux.item()


def train_step_alternating(model: MultiHeadModel, opt: SGD, images: np.ndarray, labels: np.ndarray,
                           aux_batch, cfg: TrainConfig, learning_rate: float,
                           rng: Rng | None = None, on_step=None) -> tuple[float, float | None, int]:
    """Primary step then auxiliary step.

    Returns (primary loss, unscaled auxiliary loss or None, correct
    predictions in the primary batch). ``on_step(kind, model)`` is called
    after each step with kind ``"primary"`` or ``"aux"``.
    """
    if cfg.aux_task == "none" and aux_batch is not None:
        raise ValueError("auxiliary batch given but aux_task is 'none'")
    if cfg.aux_task != model.arch.aux_task:
        raise ValueError(f"config aux_task {cfg.aux_task!r} does not match model {model.arch.aux_task!r}")
    primary, correct = primary_step(model, opt, images, labels, learning_rate)
    if on_step is not None:
        on_step("primary", model)
    if cfg.aux_task == "none":
        return primary, None, correct
    aux = aux_step(model, opt, aux_batch, cfg, learning_rate, rng if rng is not None else Rng(cfg.seed))
    if on_step is not None:
        on_step("aux", model)
    return primary, aux, correct


def train(model: MultiHeadModel, split: HoldOutSplit, cfg: TrainConfig, rng: Rng | None = None,
          val: tuple[np.ndarray, np.ndarray] | None = None, on_step=None) -> tuple[MultiHeadModel, TrainLog]:
    """Train in place, freeze, and return the model with one log record per epoch.

    ``on_step`` is passed through to :func:`train_step_alternating`.
    """
    data = split.train
    if len(data) == 0:
        raise ValueError("split has an empty train set")
    if model.arch.aux_task != cfg.aux_task:
        raise ValueError(f"config aux_task {cfg.aux_task!r} does not match model {model.arch.aux_task!r}")
    rng = rng if rng is not None else Rng(cfg.seed)
    opt = SGD(cfg.momentum, cfg.nesterov, cfg.weight_decay)
    log = TrainLog()
    n = len(data)
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        lr = cfg.lr_at(epoch)
        order = rng.child("shuffle").child(epoch).permutation(n)
        aug = rng.child("augment").child(epoch)
        rot = rng.child("rotation").child(epoch)
        neg = rng.child("negatives").child(epoch)
        p_sum = a_sum = 0.0
        correct = batches = 0
        for b in range(0, n, cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            x = data.images[idx]
            y = data.labels[idx]
            if cfg.crop_flip_pad:
                x = np.stack([augment_crop_flip(img, cfg.crop_flip_pad, aug) for img in x])
            if cfg.mask_augment:
                x = np.stack([random_center_mask(img, aug) for img in x])
            if cfg.aux_task == "rotation":
                aux_batch = rotate_batch(x, rot, cfg.rotation_mode)
            elif cfg.aux_task == "cpc":
                aux_batch = x
            else:
                aux_batch = None
            p_loss, a_loss, c = train_step_alternating(model, opt, x, y, aux_batch, cfg, lr, neg, on_step)
            p_sum += p_loss * len(idx)
            a_sum += (a_loss or 0.0) * len(idx)
            correct += c
            batches += 1
        val_acc = None
        if val is not None:
            val_acc = float((model.predict(val[0]) == val[1]).mean())
        log.epochs.append(EpochRecord(
            epoch=epoch,
            learning_rate=lr,
            primary_loss=p_sum / n,
            aux_loss=a_sum / n if cfg.aux_task != "none" else None,
            train_accuracy=correct / n,
            val_accuracy=val_acc,
            wall_clock=time.perf_counter() - start,
        ))
        if not math.isfinite(log.epochs[-1].primary_loss):
            raise FloatingPointError(f"primary loss diverged at epoch {epoch}")
    model.freeze()
    return model, log
