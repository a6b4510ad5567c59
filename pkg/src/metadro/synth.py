"""Synthetic grouped Gaussian embeddings with a shifted minority group."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from metadro.dataset import EmbeddingRecord, EmbeddingStore
from metadro.errors import ConfigError


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings.

    Each class gets ``groups_per_class`` groups. When there are at least two,
    the last group is the minority: it holds a ``minority_fraction`` share of
    the class records and its mean is translated by ``shift`` along a fixed
    unit direction per class. The other groups split the rest evenly.

    ``group_scope="class"`` gives every class its own group codes
    (``c03/g1``); ``"global"`` shares them across classes (``g1``), so a group
    is a subpopulation cutting through all classes.

    ``shift_axis="shared"`` uses one shift direction for every class, so the
    minority groups of all classes move the same way (a common site or
    acquisition effect); ``"class"`` draws a direction per class.
    """

    dim: int = 16
    classes: int = 20
    groups_per_class: int = 1
    records_per_class: int = 100
    scale: float = 5.0
    noise: float = 1.0
    shift: float = 0.0
    minority_fraction: float = 0.1
    group_scope: str = "class"
    shift_axis: str = "class"
    seed: int = 0

    def __post_init__(self):
        checks = [
            ("dim", self.dim >= 1, "must be >= 1"),
            ("classes", self.classes >= 1, "must be >= 1"),
            ("groups_per_class", self.groups_per_class >= 1, "must be >= 1"),
            ("records_per_class", self.records_per_class >= 1, "must be >= 1"),
            ("scale", np.isfinite(self.scale) and self.scale >= 0, "must be finite and >= 0"),
            ("noise", np.isfinite(self.noise) and self.noise > 0, "must be finite and > 0"),
            ("shift", np.isfinite(self.shift), "must be finite"),
            ("minority_fraction", 0 < self.minority_fraction <= 1, "must be in (0, 1]"),
        ]
        checks.append(("group_scope", self.group_scope in ("class", "global"), "must be 'class' or 'global'"))
        checks.append(("shift_axis", self.shift_axis in ("class", "shared"), "must be 'class' or 'shared'"))
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(name, f"{msg}, got {getattr(self, name)!r}")


def class_label(i: int, n: int) -> str:
    return f"c{i:0{len(str(max(n - 1, 1)))}d}"


def group_code(label: str, j: int, scope: str = "class") -> str:
    return f"g{j}" if scope == "global" else f"{label}/g{j}"


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return v / norms


def _draw_geometry(spec: SynthSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    means = spec.scale * _unit_rows(rng, spec.classes, spec.dim)
    directions = _unit_rows(rng, spec.classes, spec.dim)
    if spec.shift_axis == "shared":
        directions = np.repeat(directions[:1], spec.classes, axis=0)
    return means, directions


def geometry(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Class means [classes, dim] and minority shift directions used by :func:`generate`."""
    return _draw_geometry(spec, np.random.default_rng(spec.seed))


def group_sizes(spec: SynthSpec) -> list[int]:
    n, g = spec.records_per_class, spec.groups_per_class
    if g == 1:
        return [n]
    minority = min(n, max(1, int(round(spec.minority_fraction * n))))
    rest = n - minority
    base, extra = divmod(rest, g - 1)
    return [base + (1 if j < extra else 0) for j in range(g - 1)] + [minority]


def generate(spec: SynthSpec) -> EmbeddingStore:
    rng = np.random.default_rng(spec.seed)
    means, directions = _draw_geometry(spec, rng)
    sizes = group_sizes(spec)
    minority = spec.groups_per_class - 1 if spec.groups_per_class > 1 else None
    records = []
    for c in range(spec.classes):
        label = class_label(c, spec.classes)
        noise = spec.noise * rng.standard_normal((spec.records_per_class, spec.dim))
        k = 0
        for j, size in enumerate(sizes):
            center = means[c] + (spec.shift * directions[c] if j == minority else 0.0)
            for _ in range(size):
                records.append(
                    EmbeddingRecord(f"{label}-{k:05d}", None, center + noise[k], label, group_code(label, j, spec.group_scope))
                )
                k += 1
    return EmbeddingStore(records, dim=spec.dim)
