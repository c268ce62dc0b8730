"""Float64 numerics shared by every other module.

Parameters live in a flat, named ParamVector so the optimizer, weight
averaging, serialization, and the ring collective all agree on one layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class NumericsError(ValueError):
    """Raised on invalid numeric inputs (zero norms, empty tensors, ...)."""


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity a.b / (|a| |b|). Raises on zero-norm inputs."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or a.shape != b.shape:
        raise NumericsError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise NumericsError("cosine similarity undefined for zero-norm input")
    return float(a @ b / (na * nb))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-shifted)."""
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise NumericsError("softmax of empty input")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def normalize_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize a matrix; returns (unit rows, row norms)."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise NumericsError("zero-norm row cannot be normalized")
    return m / norms, norms


@dataclass
class ParamEntry:
    name: str
    value: np.ndarray
    trainable: bool = True


class ParamVector:
    """Ordered, named collection of float64 parameter arrays.

    Ordering is part of the contract: two ParamVectors built the same way
    (e.g. on different workers) flatten to identical layouts.
    """

    def __init__(self, entries: list[ParamEntry]):
        names = [e.name for e in entries]
        if len(set(names)) != len(names):
            raise NumericsError("duplicate parameter names")
        self.entries = [
            ParamEntry(e.name, np.asarray(e.value, dtype=np.float64), e.trainable)
            for e in entries
        ]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, name: str) -> np.ndarray:
        for e in self.entries:
            if e.name == name:
                return e.value
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def num_params(self) -> int:
        return sum(e.value.size for e in self.entries)

    def copy(self) -> "ParamVector":
        return ParamVector(
            [ParamEntry(e.name, e.value.copy(), e.trainable) for e in self.entries]
        )

    def zeros_like(self) -> "ParamVector":
        return ParamVector(
            [ParamEntry(e.name, np.zeros_like(e.value), e.trainable) for e in self.entries]
        )

    def to_flat(self) -> np.ndarray:
        if not self.entries:
            return np.zeros(0)
        return np.concatenate([e.value.ravel() for e in self.entries])

    def from_flat(self, flat: np.ndarray) -> "ParamVector":
        """New ParamVector with this one's layout and `flat`'s values."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.num_params():
            raise NumericsError("flat size does not match parameter layout")
        out, offset = [], 0
        for e in self.entries:
            n = e.value.size
            out.append(
                ParamEntry(e.name, flat[offset : offset + n].reshape(e.value.shape).copy(), e.trainable)
            )
            offset += n
        return ParamVector(out)

    def save(self, path: str) -> None:
        doc = {
            "entries": [
                {
                    "name": e.name,
                    "shape": list(e.value.shape),
                    "data": e.value.ravel().tolist(),
                    "trainable": e.trainable,
                }
                for e in self.entries
            ]
        }
        with open(path, "w") as f:
            json.dump(doc, f)

    @staticmethod
    def load(path: str) -> "ParamVector":
        with open(path) as f:
            doc = json.load(f)
        entries = []
        for rec in doc["entries"]:
            arr = np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])
            entries.append(ParamEntry(rec["name"], arr, rec["trainable"]))
        return ParamVector(entries)

    def allclose(self, other: "ParamVector", atol: float = 0.0, rtol: float = 0.0) -> bool:
        if self.names != other.names:
            return False
        return all(
            np.allclose(a.value, b.value, atol=atol, rtol=rtol)
            for a, b in zip(self.entries, other.entries)
        )


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_parameter: str


def finite_difference_check(
    loss_fn,
    params: ParamVector,
    epsilon: float = 1e-6,
    num_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Verify loss_fn's analytic gradient against central differences.

    loss_fn(params) must return (loss: float, grads: ParamVector) with grads
    aligned to the trainable entries of params. Checks every trainable
    coordinate, or a seeded random subset of num_coords of them.
    """
    if not (0.0 < epsilon <= 1e-2):
        raise NumericsError("epsilon must lie in (0, 1e-2]")
    loss1, grads = loss_fn(params)
    loss2, _ = loss_fn(params)
    if loss1 != loss2:
        raise NumericsError("loss_fn is not deterministic")

    coords = []  # (entry_index, flat_index)
    for i, e in enumerate(params.entries):
        if e.trainable:
            coords.extend((i, j) for j in range(e.value.size))
    if not coords:
        return GradCheckReport(0.0, "")
    if num_coords is not None and num_coords < len(coords):
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(coords), size=num_coords, replace=False)
        coords = [coords[int(p)] for p in picked]

    grad_by_name = {e.name: e.value for e in grads.entries}
    worst_err, worst_name = 0.0, params.entries[coords[0][0]].name
    for ei, fi in coords:
        entry = params.entries[ei]
        perturbed = params.copy()
        flat = perturbed.entries[ei].value.ravel()
        orig = flat[fi]
        flat[fi] = orig + epsilon
        lp, _ = loss_fn(perturbed)
        flat[fi] = orig - epsilon
        lm, _ = loss_fn(perturbed)
        numeric = (lp - lm) / (2.0 * epsilon)
        analytic = float(grad_by_name[entry.name].ravel()[fi])
        denom = max(abs(analytic), abs(numeric), 1e-8)
        err = abs(analytic - numeric) / denom
        if err > worst_err:
            worst_err, worst_name = err, entry.name
    return GradCheckReport(worst_err, worst_name)
