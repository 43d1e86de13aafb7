"""Near-duplicate removal with element-resolved pair-distance fingerprints."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import erf

from .structure import CrystalStructure, composition_of, neighbor_pairs

DEFAULT_THRESHOLD = 0.98


@dataclass(frozen=True)
class FingerprintParams:
    cutoff: float = 10.0
    bin_width: float = 0.1
    smearing_sigma: float = 0.05

    def __post_init__(self):
        if not self.cutoff > 2 * self.bin_width:
            raise ValueError("cutoff must exceed twice the bin width")
        if not self.bin_width > 0:
            raise ValueError("bin_width must be positive")
        if not self.smearing_sigma > 0:
            raise ValueError("smearing_sigma must be positive")

    @property
    def nbins(self) -> int:
        return int(round(self.cutoff / self.bin_width))


@dataclass(frozen=True)
class StructureFingerprint:
    channels: dict  # (e1, e2) with e1 <= e2 -> np.ndarray of length nbins
    natoms: int
    params: FingerprintParams

    def vector(self, keys) -> np.ndarray:
        zero = np.zeros(self.params.nbins)
        return np.concatenate([self.channels.get(k, zero) for k in keys])


def fingerprint(s: CrystalStructure, p: FingerprintParams = FingerprintParams()) -> StructureFingerprint:
    """Gaussian-smeared pair-distance histograms, one per unordered element pair.

    Every ordered pair (images included) within the cutoff deposits weight
    ``1/natoms``, integrated exactly over each bin.
    """
    ii, jj, dd = neighbor_pairs(s, p.cutoff)
    elements = s.elements
    n = len(elements)
    edges = np.arange(p.nbins + 1) * p.bin_width
    scale = 1.0 / (p.smearing_sigma * math.sqrt(2.0))
    channels: dict = {}
    keys = [tuple(sorted((elements[i], elements[j]))) for i, j in zip(ii, jj)]
    by_key: dict = {}
    for k, d in zip(keys, dd):
        by_key.setdefault(k, []).append(d)
    for k in sorted(by_key):
        d = np.sort(np.array(by_key[k]))
        cdf = 0.5 * erf((edges[None, :] - d[:, None]) * scale)
        channels[k] = np.diff(cdf, axis=1).sum(axis=0) / n
    return StructureFingerprint(channels, n, p)


def similarity(f1: StructureFingerprint, f2: StructureFingerprint) -> float:
    """Cosine similarity over the union of channels; two empty fingerprints are identical."""
    if f1.params != f2.params:
        raise ValueError("fingerprints were computed with different parameters")
    keys = sorted(set(f1.channels) | set(f2.channels))
    if not keys:
        return 1.0
    v1, v2 = f1.vector(keys), f2.vector(keys)
    n1, n2 = float(np.linalg.norm(v1)), float(np.linalg.norm(v2))
    if n1 == 0.0 and n2 == 0.0:
        return 1.0
    if n1 == 0.0 or n2 == 0.0:
        return 0.0
    return float(min(1.0, max(0.0, np.dot(v1, v2) / (n1 * n2))))


class ScoredStructure(NamedTuple):
    id: str
    structure: CrystalStructure
    energy: float


def dedup(items: Sequence[ScoredStructure], threshold: float = DEFAULT_THRESHOLD,
          params: FingerprintParams = FingerprintParams(), cache: dict | None = None
          ) -> list[ScoredStructure]:
    """Greedy lowest-energy-first near-duplicate removal.

    An item survives iff its similarity to every earlier survivor with the
    same reduced composition is below ``threshold``.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    cache = {} if cache is None else cache

    def fp(item: ScoredStructure) -> StructureFingerprint:
        if item.id not in cache:
            cache[item.id] = fingerprint(item.structure, params)
        return cache[item.id]

    kept: list[ScoredStructure] = []
    by_comp: dict[str, list[ScoredStructure]] = {}
    for item in sorted(items, key=lambda it: (it.energy, it.id)):
        comp = composition_of(item.structure).reduced()
        group = by_comp.setdefault(comp.formula, [])
        f = fp(item)
        if all(similarity(f, fp(other)) < threshold for other in group):
            group.append(item)
            kept.append(item)
    return kept
