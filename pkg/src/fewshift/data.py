"""Synthetic two-modality dataset with disjoint ID/OOD domains.

Each class has a prototype vector and a fixed caption vector; each domain
applies a seeded affine transform (rotation + translation) whose deviation
from identity scales with the shift strength. ID and OOD splits draw from
disjoint domain sets, so OOD evaluation sees transforms never trained on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .numerics import NumericsError


@dataclass
class DatasetConfig:
    num_classes: int = 62
    input_dim: int = 16
    text_dim: int = 16
    num_id_domains: int = 4
    num_ood_domains: int = 2
    samples_per_class_per_domain: int = 16
    class_separation: float = 6.0
    domain_shift_strength: float = 0.12
    label_noise: float = 0.2
    seed: int = 0
    # extra knobs: sample noise around prototypes, geometric class imbalance,
    # and the held-out share of each ID domain
    feature_noise: float = 0.3
    class_imbalance: float = 0.0
    id_test_fraction: float = 0.2
    # when set, domain transforms draw from this seed instead of `seed`;
    # lets a pretext pool share class prototypes/captions with a task dataset
    # while drawing disjoint domains
    domain_seed: int | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise NumericsError("num_classes must be >= 2")
        if self.num_id_domains < 1 or self.num_ood_domains < 0:
            raise NumericsError("need at least one ID domain")
        if self.domain_shift_strength < 0.0:
            raise NumericsError("shift strength must be >= 0")
        if not 0.0 <= self.label_noise < 1.0:
            raise NumericsError("label_noise must lie in [0, 1)")
        if not 0.0 <= self.id_test_fraction < 1.0:
            raise NumericsError("id_test_fraction must lie in [0, 1)")


@dataclass
class Sample:
    image_vector: np.ndarray
    caption_vector: np.ndarray
    label: int
    domain_id: int


@dataclass
class SplitBundle:
    train: list[Sample]
    id_test: list[Sample]
    ood_test: list[Sample]


def caption_matrix(config: DatasetConfig) -> np.ndarray:
    """Fixed per-class caption vectors, pairwise cosine similarity < 0.99."""
    for attempt in range(32):
        rng = np.random.default_rng([config.seed, 7310, attempt])
        m = rng.normal(size=(config.num_classes, config.text_dim))
        unit = m / np.linalg.norm(m, axis=1, keepdims=True)
        gram = unit @ unit.T
        np.fill_diagonal(gram, -1.0)
        if gram.max() < 0.99:
            return m
    raise NumericsError("could not draw sufficiently distinct class captions")


def class_caption(label: int, config: DatasetConfig) -> np.ndarray:
    if not 0 <= label < config.num_classes:
        raise NumericsError(f"label {label} out of range")
    return caption_matrix(config)[label].copy()


def _domain_transform(rng: np.random.Generator, dim: int, strength: float):
    """Rotation + translation; exactly the identity when strength == 0."""
    g = rng.normal(size=(dim, dim))
    t = strength * rng.normal(size=dim)
    if strength == 0.0:
        return np.eye(dim), t
    q, r = np.linalg.qr(np.eye(dim) + strength * g)
    q = q * np.sign(np.diag(r))  # fix signs so strength -> 0 gives identity
    return q, t


def generate_dataset(config: DatasetConfig) -> SplitBundle:
    proto_rng = np.random.default_rng([config.seed, 101])
    domain_rng = np.random.default_rng(
        [config.seed if config.domain_seed is None else config.domain_seed, 202]
    )
    rng = np.random.default_rng([config.seed, 303])  # sample noise, label flips, splits
    d = config.input_dim
    protos = config.class_separation * proto_rng.normal(size=(config.num_classes, d)) / math.sqrt(d)
    captions = caption_matrix(config)

    total_domains = config.num_id_domains + config.num_ood_domains
    transforms = [
        _domain_transform(domain_rng, d, config.domain_shift_strength) for _ in range(total_domains)
    ]

    def domain_samples(domain_id: int) -> list[Sample]:
        q, t = transforms[domain_id]
        out = []
        for c in range(config.num_classes):
            n_c = max(1, int(round(config.samples_per_class_per_domain * (1.0 - config.class_imbalance) ** c)))
            noise = config.feature_noise * rng.normal(size=(n_c, d))
            x = (protos[c] + noise) @ q.T + t
            for i in range(n_c):
                label = c
                if config.label_noise > 0.0 and rng.random() < config.label_noise:
                    label = int(rng.integers(config.num_classes - 1))
                    if label >= c:
                        label += 1
                out.append(Sample(x[i].copy(), captions[label].copy(), label, domain_id))
        return out

    train: list[Sample] = []
    id_test: list[Sample] = []
    for domain_id in range(config.num_id_domains):
        samples = domain_samples(domain_id)
        order = rng.permutation(len(samples))
        n_test = int(round(config.id_test_fraction * len(samples)))
        test_idx = set(order[:n_test].tolist())
        for i, s in enumerate(samples):
            (id_test if i in test_idx else train).append(s)

    ood_test: list[Sample] = []
    for domain_id in range(config.num_id_domains, total_domains):
        ood_test.extend(domain_samples(domain_id))

    return SplitBundle(train, id_test, ood_test)


def subsample_fraction(train: list[Sample], fraction: float, seed: int) -> list[Sample]:
    """Seeded uniform subset without replacement of size round(fraction * N)."""
    if not 0.0 <= fraction <= 1.0:
        raise NumericsError("fraction must lie in [0, 1]")
    if fraction == 1.0:
        return list(train)
    n = int(math.floor(fraction * len(train) + 0.5))
    if n == 0:
        return []
    rng = np.random.default_rng([seed, 4217])
    idx = rng.choice(len(train), size=n, replace=False)
    return [train[int(i)] for i in sorted(idx)]


def samples_to_arrays(samples: list[Sample]):
    """Stack a sample list into (images, captions, labels, domains)."""
    images = np.stack([s.image_vector for s in samples])
    captions = np.stack([s.caption_vector for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    domains = np.array([s.domain_id for s in samples], dtype=np.int64)
    return images, captions, labels, domains


def export_ndjson(samples: list[Sample], path: str) -> None:
    with open(path, "w") as f:
        for s in samples:
            rec = {
                "label": int(s.label),
                "domain_id": int(s.domain_id),
                "image_vector": s.image_vector.tolist(),
                "caption_vector": s.caption_vector.tolist(),
            }
            f.write(json.dumps(rec) + "\n")


def load_ndjson(path: str) -> list[Sample]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out.append(
                Sample(
                    np.array(rec["image_vector"], dtype=np.float64),
                    np.array(rec["caption_vector"], dtype=np.float64),
                    int(rec["label"]),
                    int(rec["domain_id"]),
                )
            )
    return out
