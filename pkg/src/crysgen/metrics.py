"""Desk-scale generation metrics: validity, uniqueness, novelty, composition
Jensen-Shannon distance, and descriptor MMD."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .core import Crystal, DegenerateCellError, ElementTable, cell_volume, pairwise_min_image_distances
from .policy import Composition, charge_balanced

MIN_VALID_VOLUME = 10.0  # cubic Angstrom
MIN_INTERATOMIC_DISTANCE = 0.5  # Angstrom
LENGTH_QUANTUM = 0.1  # Angstrom
ANGLE_QUANTUM = 1.0  # degrees
AVOGADRO = 6.02214076e23


@dataclass(frozen=True)
class StructureFingerprint:
    """Hashable, symmetry-invariant structure summary used for dedup/novelty."""

    composition: str
    cell: tuple
    distances: tuple


def fingerprint(
    crystal: Crystal,
    length_quantum: float = LENGTH_QUANTUM,
    angle_quantum: float = ANGLE_QUANTUM,
) -> StructureFingerprint:
    comp = "".join(
        f"{sym}{count}" for sym, count in sorted(crystal.composition().items())
    )
    a, b, c, al, be, ga = crystal.lattice.invariants()
    cell = tuple(
        int(round(v / q))
        for v, q in zip(
            (a, b, c, al, be, ga),
            (length_quantum,) * 3 + (angle_quantum,) * 3,
        )
    )
    dm = pairwise_min_image_distances(crystal)
    iu = np.triu_indices(crystal.num_atoms, k=1)
    dists = tuple(sorted(int(round(d / length_quantum)) for d in dm[iu]))
    return StructureFingerprint(comp, cell, dists)


def is_valid(crystal: Crystal, table: ElementTable) -> bool:
    """Volume >= 10 A^3, all minimum-image distances >= 0.5 A, N >= 1, and a
    charge-balanced composition."""
    if crystal.num_atoms < 1:
        return False
    try:
        if cell_volume(crystal.lattice) < MIN_VALID_VOLUME:
            return False
    except DegenerateCellError:
        return False
    if crystal.num_atoms > 1:
        dm = pairwise_min_image_distances(crystal)
        iu = np.triu_indices(crystal.num_atoms, k=1)
        if np.min(dm[iu]) < MIN_INTERATOMIC_DISTANCE:
            return False
    return charge_balanced(Composition.from_species(crystal.species), table)


def uniqueness(samples) -> float:
    """Percentage of distinct fingerprints among the samples."""
    if not samples:
        raise ValueError("samples must be non-empty")
    fps = {fingerprint(c) for c in samples}
    return 100.0 * len(fps) / len(samples)


def novelty(samples, reference) -> float:
    """Percentage of samples whose fingerprint is absent from the reference set."""
    if not samples:
        raise ValueError("samples must be non-empty")
    ref = {fingerprint(c) for c in reference}
    return 100.0 * sum(1 for c in samples if fingerprint(c) not in ref) / len(samples)


def jsd(p, q) -> float:
    """Jensen-Shannon distance (sqrt of the base-2 JS divergence), in [0,1]."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"histogram shape mismatch {p.shape} vs {q.shape}")
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl2(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log2(a[mask] / b[mask])))

    js = 0.5 * kl2(p, m) + 0.5 * kl2(q, m)
    return float(np.sqrt(max(js, 0.0)))


def element_histograms(samples, reference, table: ElementTable):
    """Aligned element-frequency histograms over the union of symbols."""
    symbols = sorted(
        {s for c in samples for s in c.species} | {s for c in reference for s in c.species},
        key=table.atomic_number,
    )
    index = {s: i for i, s in enumerate(symbols)}

    def hist(crystals):
        h = np.zeros(len(symbols))
        for c in crystals:
            for s in c.species:
                h[index[s]] += 1
        return h

    return hist(samples), hist(reference), symbols


def descriptor(crystal: Crystal, table: ElementTable) -> np.ndarray:
    """(density g/cm^3, volume A^3, atom count) structure descriptor."""
    vol = cell_volume(crystal.lattice)
    mass = sum(table.mass(s) for s in crystal.species)  # g/mol
    density = mass / AVOGADRO / (vol * 1e-24)
    return np.array([density, vol, float(crystal.num_atoms)])


def mmd(sample_a, sample_b, biased: bool = False) -> float:
    """Squared maximum mean discrepancy with an RBF kernel.

    Bandwidth follows the median pairwise-distance heuristic over the pooled
    sample. The unbiased estimate is clamped at zero; the biased variant keeps
    diagonal terms and is exactly zero for identical samples.
    """
    a = np.atleast_2d(np.asarray(sample_a, dtype=float))
    b = np.atleast_2d(np.asarray(sample_b, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.vstack([a, b])
    d2 = np.sum((pooled[:, None, :] - pooled[None, :, :]) ** 2, axis=-1)
    iu = np.triu_indices(len(pooled), k=1)
    median_sq = float(np.median(d2[iu])) if iu[0].size else 1.0
    gamma = 1.0 / max(median_sq, 1e-12)

    def kernel(x, y):
        return np.exp(-gamma * np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1))

    k_aa, k_bb, k_ab = kernel(a, a), kernel(b, b), kernel(a, b)
    m, n = len(a), len(b)
    if biased:
        value = k_aa.mean() + k_bb.mean() - 2.0 * k_ab.mean()
    else:
        sum_aa = (k_aa.sum() - np.trace(k_aa)) / (m * (m - 1)) if m > 1 else 0.0
        sum_bb = (k_bb.sum() - np.trace(k_bb)) / (n * (n - 1)) if n > 1 else 0.0
        value = sum_aa + sum_bb - 2.0 * k_ab.mean()
    return float(max(value, 0.0))


@dataclass
class MetricsReport:
    n_samples: int
    valid_pct: float
    unique_pct: float
    novel_pct: float
    jsd: float
    mmd: float
    seconds_per_sample: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_csv_row(self) -> str:
        cols = ["n_samples", "valid_pct", "unique_pct", "novel_pct", "jsd", "mmd", "seconds_per_sample"]
        header = ",".join(cols)
        row = ",".join("" if getattr(self, c) is None else f"{getattr(self, c)}" for c in cols)
        return header + "\n" + row + "\n"


def evaluate(samples, reference, table: ElementTable, seconds_per_sample=None) -> MetricsReport:
    """Compute the full desk-scale report for generated samples vs a reference set."""
    if not samples:
        return MetricsReport(0, 0.0, 0.0, 0.0, 0.0, 0.0, seconds_per_sample)
    valid_pct = 100.0 * sum(1 for c in samples if is_valid(c, table)) / len(samples)
    hist_s, hist_r, _ = element_histograms(samples, reference, table)
    desc_s = np.array([descriptor(c, table) for c in samples])
    desc_r = np.array([descriptor(c, table) for c in reference])
    return MetricsReport(
        n_samples=len(samples),
        valid_pct=valid_pct,
        unique_pct=uniqueness(samples),
        novel_pct=novelty(samples, reference),
        jsd=jsd(hist_s, hist_r) if hist_s.sum() and hist_r.sum() else 0.0,
        mmd=mmd(desc_s, desc_r) if len(reference) else 0.0,
        seconds_per_sample=seconds_per_sample,
    )
