"""Independent reference computations used by the tests.

Nothing here imports the code paths it checks.
"""

from __future__ import annotations

import hashlib
import itertools
import math

import numpy as np


def brute_force_hull_energy(points: np.ndarray, energies: np.ndarray, query: np.ndarray) -> float:
    """Minimum of sum(w_i E_i) over every subset of <= n points whose convex
    combination with non-negative weights reproduces ``query``.

    ``points`` are full atomic-fraction vectors (rows sum to 1), so the
    sum-to-one constraint is implied by matching all n fractions.
    """
    m, n = points.shape
    best = math.inf
    for k in range(1, n + 1):
        subsets = np.array(list(itertools.combinations(range(m), k)))
        if len(subsets) == 0:
            continue
        mats = np.transpose(points[subsets], (0, 2, 1))  # (S, n, k)
        pinv = np.linalg.pinv(mats)  # (S, k, n)
        w = pinv @ query  # (S, k)
        resid = np.abs(np.einsum("snk,sk->sn", mats, w) - query).max(axis=1)
        ok = (resid < 1e-10) & (w.min(axis=1) >= -1e-12)
        if ok.any():
            vals = np.einsum("sk,sk->s", w[ok], energies[subsets[ok]])
            best = min(best, float(vals.min()))
    return best


def brute_force_min_image(lattice: np.ndarray, f1, f2, reach: int = 5, exclude_zero: bool = False) -> float:
    best = math.inf
    d = np.asarray(f2, float) - np.asarray(f1, float)
    for t in itertools.product(range(-reach, reach + 1), repeat=3):
        if exclude_zero and t == (0, 0, 0):
            continue
        best = min(best, float(np.linalg.norm((d + np.array(t)) @ lattice)))
    return best


def brute_force_neighbors(lattice: np.ndarray, frac: np.ndarray, cutoff: float, reach: int = 8):
    """(i, j, d) for every ordered pair and image with 0 < d <= cutoff, by plain loops."""
    out = []
    cart = frac @ lattice
    for i in range(len(frac)):
        for j in range(len(frac)):
            for t in itertools.product(range(-reach, reach + 1), repeat=3):
                d = float(np.linalg.norm(cart[j] + np.array(t) @ lattice - cart[i]))
                if 1e-10 < d <= cutoff:
                    out.append((i, j, d))
    return out


def injective_assignment_count(k: int, n: int) -> int:
    """Count maps from k labels to n targets with distinct images, by enumeration."""
    return sum(1 for m in itertools.product(range(n), repeat=k) if len(set(m)) == k)


def _unit(text: str) -> float:
    return int(hashlib.sha256(text.encode()).hexdigest()[:16], 16) / 2.0**64


def surrogate_reference(lattice, elements, frac, cutoff=6.0) -> float:
    """Per-atom surrogate energy written out directly from its definition."""
    total = 0.0
    for i, j, d in brute_force_neighbors(np.asarray(lattice, float), np.asarray(frac, float), cutoff, reach=4):
        a, b = sorted((elements[i], elements[j]))
        A = 0.5 + 1.5 * _unit(f"A:{a}-{b}")
        B = 1.0 + 3.0 * _unit(f"B:{a}-{b}")
        r0 = 1.5 + 1.5 * _unit(f"r0:{a}-{b}")
        total += 0.5 * (-A * math.exp(-d / r0) + B * math.exp(-2 * d / r0))
    n = len(elements)
    shift = sum(-1.0 + 2.0 * _unit(f"ref:{e}") for e in elements) / n
    return total / n + shift


def smeared_histogram(distances, weight, nbins, width, sigma) -> np.ndarray:
    """Per-bin integral of Gaussians by midpoint quadrature (1000 sub-intervals per bin)."""
    hist = np.zeros(nbins)
    sub = 1000
    for b in range(nbins):
        xs = b * width + (np.arange(sub) + 0.5) * width / sub
        for d in distances:
            hist[b] += weight * np.sum(np.exp(-0.5 * ((xs - d) / sigma) ** 2)) * (width / sub) / (
                sigma * math.sqrt(2 * math.pi))
    return hist
