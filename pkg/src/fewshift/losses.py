"""Symmetric temperature-scaled contrastive loss and cross-entropy.

The contrastive loss consumes raw (unnormalized) embedding matrices and
normalizes internally, so the normalization gradients are part of what the
finite-difference harness verifies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NumericsError, normalize_rows, softmax


@dataclass
class EmbeddingBatch:
    image_embeddings: np.ndarray  # (B, d)
    text_embeddings: np.ndarray   # (B, d)

    def __post_init__(self):
        self.image_embeddings = np.atleast_2d(np.asarray(self.image_embeddings, dtype=np.float64))
        self.text_embeddings = np.atleast_2d(np.asarray(self.text_embeddings, dtype=np.float64))
        if self.image_embeddings.shape != self.text_embeddings.shape:
            raise NumericsError("image/text embedding matrices must have identical shape")

    @property
    def batch_size(self) -> int:
        return self.image_embeddings.shape[0]


@dataclass
class ContrastiveLossValue:
    image_loss: float
    text_loss: float
    total: float


def _contrastive_core(batch: EmbeddingBatch, temperature: float):
    if temperature <= 0.0:
        raise NumericsError("temperature must be positive")
    if batch.batch_size < 1:
        raise NumericsError("empty batch")
    u, u_norms = normalize_rows(batch.image_embeddings)
    v, v_norms = normalize_rows(batch.text_embeddings)
    sim = u @ v.T
    logits = sim / temperature
    p_img = softmax(logits, axis=1)   # each image over all texts
    p_txt = softmax(logits, axis=0)   # each text over all images
    b = batch.batch_size
    diag = np.arange(b)
    image_loss = float(-np.mean(np.log(p_img[diag, diag])))
    text_loss = float(-np.mean(np.log(p_txt[diag, diag])))
    value = ContrastiveLossValue(image_loss, text_loss, (image_loss + text_loss) / 2.0)
    return value, (u, v, u_norms, v_norms, sim, p_img, p_txt)


def infonce_loss(batch: EmbeddingBatch, temperature: float) -> ContrastiveLossValue:
    value, _ = _contrastive_core(batch, temperature)
    return value


def infonce_loss_and_grad(batch: EmbeddingBatch, temperature: float):
    """Loss plus gradients of `total` w.r.t. both raw embedding matrices and
    the temperature. Returns (value, d_image, d_text, d_temperature)."""
    value, (u, v, u_norms, v_norms, sim, p_img, p_txt) = _contrastive_core(batch, temperature)
    b = batch.batch_size
    eye = np.eye(b)
    # d total / d logits: half image-side (row softmax) + half text-side (col softmax)
    g_logits = 0.5 * ((p_img - eye) + (p_txt - eye)) / b
    d_sim = g_logits / temperature
    d_temperature = float(-np.sum(g_logits * sim) / temperature**2)
    du = d_sim @ v
    dv = d_sim.T @ u
    # through row normalization: d raw = (d unit - (unit . d unit) unit) / |raw|
    d_image = (du - np.sum(du * u, axis=1, keepdims=True) * u) / u_norms
    d_text = (dv - np.sum(dv * v, axis=1, keepdims=True) * v) / v_norms
    return value, d_image, d_text, d_temperature


def cross_entropy_loss(logits: np.ndarray, label: int) -> float:
    logits = np.asarray(logits, dtype=np.float64).ravel()
    if not 0 <= label < logits.size:
        raise NumericsError(f"label {label} out of range for {logits.size} classes")
    p = softmax(logits)
    return float(-np.log(p[label]))


def cross_entropy_batch(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over a batch; returns (loss, d_logits)."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).ravel()
    b, n = logits.shape
    if labels.size != b:
        raise NumericsError("labels length must match batch size")
    if np.any(labels < 0) or np.any(labels >= n):
        raise NumericsError("label out of range")
    p = softmax(logits, axis=1)
    idx = np.arange(b)
    loss = float(-np.mean(np.log(p[idx, labels])))
    d_logits = p.copy()
    d_logits[idx, labels] -= 1.0
    d_logits /= b
    return loss, d_logits
