"""Hypothetical candidates from prototype templates by element substitution.

Substitution is label-wise: every site carrying a given template species
receives the same target element, and distinct species always receive
distinct targets.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .structure import CrystalStructure, PoscarError, StructureError, check_element, parse_poscar

logger = logging.getLogger(__name__)

DEFAULT_MAX_CANDIDATES = 100_000
TEMPLATE_PATTERNS = ("*.vasp", "*.poscar", "POSCAR*")


class TemplateError(RuntimeError):
    """No usable templates could be loaded."""


class SubstitutionError(RuntimeError):
    """Enumeration produced no candidates."""


@dataclass
class TemplateSet:
    templates: list[CrystalStructure]
    source_labels: list[str]
    errors: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.templates:
            raise TemplateError("template set is empty")
        if len(self.templates) != len(self.source_labels):
            raise ValueError("templates and source_labels differ in length")

    def __len__(self) -> int:
        return len(self.templates)


@dataclass(frozen=True)
class SubstitutionSpec:
    target_elements: tuple[str, ...]
    max_candidates: int = DEFAULT_MAX_CANDIDATES
    allow_fewer: bool = False

    def __post_init__(self):
        targets = tuple(self.target_elements)
        for el in targets:
            check_element(el)
        if len(set(targets)) != len(targets):
            raise ValueError(f"target elements must be distinct: {targets}")
        if not 1 <= len(targets) <= 6:
            raise ValueError(f"need 1 to 6 target elements, got {len(targets)}")
        if self.max_candidates < 1:
            raise ValueError("max_candidates must be positive")
        object.__setattr__(self, "target_elements", targets)


@dataclass
class CandidateSet:
    structures: list[CrystalStructure]
    truncated: bool = False
    raw_count: int = 0
    skipped_templates: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.structures)


def _template_files(directory: Path) -> list[Path]:
    found = set()
    for pattern in TEMPLATE_PATTERNS:
        found.update(p for p in directory.glob(pattern) if p.is_file())
    return sorted(found, key=lambda p: p.name)


def ingest_templates(directory) -> TemplateSet:
    """Load every POSCAR-like file in ``directory`` in lexicographic filename order.

    Unreadable or malformed files are collected in ``errors`` rather than
    raised; an empty result is fatal.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise TemplateError(f"template directory does not exist: {directory}")
    templates, labels, errors = [], [], []
    for path in _template_files(directory):
        try:
            s = parse_poscar(path.read_text(encoding="utf-8"))
        except (OSError, UnicodeDecodeError, PoscarError, StructureError) as exc:
            msg = f"{path.name}: {exc}"
            logger.warning("skipping template %s", msg)
            errors.append(msg)
            continue
        templates.append(s)
        labels.append(path.name)
    if not templates:
        raise TemplateError(f"no parsable templates in {directory} ({len(errors)} failed)")
    return TemplateSet(templates, labels, errors)


def assignments(species: Sequence[str], targets: Sequence[str], allow_fewer: bool):
    """Injective maps species -> targets, in lexicographic order over ``targets``."""
    k, n = len(species), len(targets)
    if k > n or (k < n and not allow_fewer):
        return
    for perm in itertools.permutations(targets, k):
        yield dict(zip(species, perm))


def enumerate_substitutions(templates: TemplateSet, spec: SubstitutionSpec) -> CandidateSet:
    targets = spec.target_elements
    seen: set = set()
    out: list[CrystalStructure] = []
    skipped: list[str] = []
    raw = 0
    truncated = False
    for template, source in zip(templates.templates, templates.source_labels):
        species = template.species
        if len(species) > len(targets):
            logger.warning("template %s has %d species but only %d targets; skipped",
                           source, len(species), len(targets))
            skipped.append(source)
            continue
        if len(species) < len(targets) and not spec.allow_fewer:
            logger.info("template %s uses fewer species than targets and allow_fewer is off", source)
            skipped.append(source)
            continue
        for mapping in assignments(species, targets, spec.allow_fewer):
            raw += 1
            tag = ",".join(f"{a}->{b}" for a, b in mapping.items())
            candidate = template.relabel(mapping, label=f"{source} {tag}")
            key = candidate.geometry_key()
            if key in seen:
                continue
            if len(out) >= spec.max_candidates:
                truncated = True
                break
            seen.add(key)
            out.append(candidate)
        if truncated:
            break
    if truncated:
        logger.warning("candidate list truncated at max_candidates=%d", spec.max_candidates)
    if not out:
        raise SubstitutionError("substitution produced no candidates")
    return CandidateSet(out, truncated=truncated, raw_count=raw, skipped_templates=skipped)


def candidate_ids(n: int) -> list[str]:
    return [f"c{i:06d}" for i in range(n)]
