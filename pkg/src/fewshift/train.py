"""Glue between models, losses, and the optimizer: whole-model gradient
assembly and the single-trainer loop with optional weight averaging over the
final epochs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import (
    ContrastiveLossValue,
    EmbeddingBatch,
    cross_entropy_batch,
    infonce_loss_and_grad,
)
from .models import DualEncoder, VisionClassifier
from .numerics import ParamEntry, ParamVector
from .optim import CosineAnnealSchedule, OptimizerConfig, SgdOptimizer, SwaState, cosine_anneal_lr


def clip_loss_and_grads(model: DualEncoder, images: np.ndarray, texts: np.ndarray):
    """Contrastive loss on aligned (image, caption) rows plus full-model
    gradients in the model's ParamVector layout."""
    img_emb, img_ctx = model._forward_image(images)
    txt_emb, txt_ctx = model._forward_text(texts)
    value, d_img, d_txt, d_tau = infonce_loss_and_grad(
        EmbeddingBatch(img_emb, txt_emb), model.temperature
    )
    img_enc_grads, d_ipw, d_ipb = model._backward_image(d_img, img_ctx)
    txt_enc_grads, d_tpw, d_tpb = model._backward_text(d_txt, txt_ctx)

    entries = []
    for i, (dw, db) in enumerate(img_enc_grads):
        entries.append(ParamEntry(f"image_encoder.{i}.weight", dw))
        entries.append(ParamEntry(f"image_encoder.{i}.bias", db))
    entries.append(ParamEntry("image_projection.weight", d_ipw))
    entries.append(ParamEntry("image_projection.bias", d_ipb))
    for i, (dw, db) in enumerate(txt_enc_grads):
        entries.append(ParamEntry(f"text_encoder.{i}.weight", dw))
        entries.append(ParamEntry(f"text_encoder.{i}.bias", db))
    entries.append(ParamEntry("text_projection.weight", d_tpw))
    entries.append(ParamEntry("text_projection.bias", d_tpb))
    entries.append(ParamEntry("temperature", np.array([d_tau])))
    return value, ParamVector(entries)


def classifier_loss_and_grads(model: VisionClassifier, images: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch plus full-model gradients."""
    logits, ctx = model._forward(images)
    loss, d_logits = cross_entropy_batch(logits, labels)
    enc_grads, d_hw, d_hb = model._backward(d_logits, ctx)
    entries = []
    for i, (dw, db) in enumerate(enc_grads):
        entries.append(ParamEntry(f"encoder.{i}.weight", dw))
        entries.append(ParamEntry(f"encoder.{i}.bias", db))
    entries.append(ParamEntry("head.weight", d_hw))
    entries.append(ParamEntry("head.bias", d_hb))
    return loss, ParamVector(entries)


@dataclass
class TrainResult:
    epoch_losses: list[float] = field(default_factory=list)
    diverged: bool = False


def train_model(
    model,
    images: np.ndarray,
    targets: np.ndarray,
    mode: str,                      # "clip": targets are caption rows; "vision": integer labels
    epochs: int,
    opt_config: OptimizerConfig,
    lr: float,
    seed: int = 0,
    swa_epochs: int | None = None,  # None disables weight averaging
    eta_min_ratio: float = 0.1,
) -> TrainResult:
    """Single-trainer loop. When swa_epochs is set, the final swa_epochs use a
    per-mini-batch cosine annealed LR (lr down to eta_min_ratio * lr) and the
    end-of-epoch weights are averaged and installed at the end of the run."""
    n = images.shape[0]
    opt = SgdOptimizer(opt_config)
    swa = SwaState(swa_epochs) if swa_epochs else None
    result = TrainResult()

    loss_fn = clip_loss_and_grads if mode == "clip" else classifier_loss_and_grads
    for epoch in range(epochs):
        order = np.random.default_rng([seed, 911, epoch]).permutation(n)
        batches = [order[i : i + opt_config.batch_size] for i in range(0, n, opt_config.batch_size)]
        in_swa_window = swa is not None and epoch >= epochs - swa.swa_epochs
        sched = (
            CosineAnnealSchedule(eta_min_ratio * lr, lr, len(batches)) if in_swa_window else None
        )
        epoch_loss = 0.0
        for step, idx in enumerate(batches):
            value, grads = loss_fn(model, images[idx], targets[idx])
            loss = value.total if isinstance(value, ContrastiveLossValue) else value
            if not np.isfinite(loss):
                result.diverged = True
                return result
            epoch_loss += loss
            step_lr = cosine_anneal_lr(step, sched) if sched else lr
            model.set_params(opt.step(model.get_params(), grads, step_lr))
        result.epoch_losses.append(epoch_loss / max(1, len(batches)))
        if in_swa_window:
            swa.update(model.get_params())
    if swa is not None:
        swa.finalize(model)
    return result
