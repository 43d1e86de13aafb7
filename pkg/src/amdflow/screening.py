"""Formation-energy screening: predictor adapters and candidate selection.

Two predictors are available. The built-in surrogate is a deterministic
pair potential whose parameters come from hashing element symbols, so the
whole pipeline can run without model weights or data files. The external
predictor hands structures to any command through a directory protocol::

    <batch_dir>/input/<id>.vasp        written by us
    <batch_dir>/output/energies.tsv    written by the command: "<id>\\t<eV/atom>"

The command is invoked as ``command... <batch_dir>``.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import signal
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .structure import CrystalStructure, composition_of, neighbor_pairs, write_poscar

logger = logging.getLogger(__name__)

SURROGATE_CUTOFF = 6.0
A_RANGE = (0.5, 2.0)
B_RANGE = (1.0, 4.0)
R0_RANGE = (1.5, 3.0)
REF_RANGE = (-1.0, 1.0)


class PredictorError(RuntimeError):
    def __init__(self, message: str, structure_ids: Sequence[str] = ()):
        self.structure_ids = list(structure_ids)
        if self.structure_ids:
            message = f"{message} (structures: {', '.join(self.structure_ids)})"
        super().__init__(message)


@dataclass(frozen=True)
class EnergyPrediction:
    structure_id: str
    predicted_ef: float
    predictor_name: str

    def __post_init__(self):
        if not math.isfinite(self.predicted_ef):
            raise ValueError(f"non-finite prediction for {self.structure_id}")
        if not self.predictor_name:
            raise ValueError("predictor_name must be non-empty")


@dataclass(frozen=True)
class PredictorConfig:
    kind: str = "builtin-surrogate"
    command: tuple[str, ...] | None = None
    batch_size: int = 64
    threshold_ef: float | None = 0.0
    top_k: int | None = None
    timeout: float = 3600.0

    def __post_init__(self):
        if self.kind not in ("builtin-surrogate", "external-command"):
            raise ValueError(f"unknown predictor kind {self.kind!r}")
        if self.kind == "external-command" and not self.command:
            raise ValueError("external-command predictor requires a command")
        if self.command is not None:
            object.__setattr__(self, "command", tuple(self.command))
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.threshold_ef is None and self.top_k is None:
            raise ValueError("set threshold_ef, top_k, or both")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError("top_k must be positive")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")

    @property
    def name(self) -> str:
        if self.kind == "builtin-surrogate":
            return "builtin-surrogate"
        return "external:" + os.path.basename(self.command[0])


# ---------------------------------------------------------------------------
# Built-in surrogate


def stable_unit(text: str) -> float:
    """Map ``text`` to [0, 1) through the first 64 bits of its SHA-256."""
    h = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")
    return h / 2.0**64


def _in_range(u: float, bounds: tuple[float, float]) -> float:
    lo, hi = bounds
    return lo + u * (hi - lo)


def pair_parameters(e1: str, e2: str) -> tuple[float, float, float]:
    """(A, B, r0) for an element pair; symmetric in its arguments."""
    a, b = sorted((e1, e2))
    pair = f"{a}-{b}"
    return (
        _in_range(stable_unit("A:" + pair), A_RANGE),
        _in_range(stable_unit("B:" + pair), B_RANGE),
        _in_range(stable_unit("r0:" + pair), R0_RANGE),
    )


def element_reference(el: str) -> float:
    return _in_range(stable_unit("ref:" + el), REF_RANGE)


def surrogate_energy_per_atom(s: CrystalStructure) -> float:
    """Pair-potential energy per atom plus hashed per-element offsets (eV/atom).

    Each unordered pair within 6 A contributes
    ``-A exp(-d/r0) + B exp(-2d/r0)``.
    """
    ii, jj, dd = neighbor_pairs(s, SURROGATE_CUTOFF)
    elements = s.elements
    species = s.species
    params = {(a, b): pair_parameters(a, b) for a in species for b in species}
    el = np.array([species.index(e) for e in elements])
    total = 0.0
    for (a, b), (A, B, r0) in params.items():
        mask = (el[ii] == species.index(a)) & (el[jj] == species.index(b))
        if not mask.any():
            continue
        d = dd[mask]
        total += float(np.sum(-A * np.exp(-d / r0) + B * np.exp(-2.0 * d / r0)))
    # ordered pairs count every bond twice
    total *= 0.5
    n = len(elements)
    comp = composition_of(s)
    shift = sum(cnt * element_reference(e) for e, cnt in comp.items) / n
    return total / n + shift


# ---------------------------------------------------------------------------
# External command


def _run_command(cmd: Sequence[str], cwd: str | None, timeout: float,
                 stdout_path: Path, stderr_path: Path) -> tuple[int | None, bool]:
    """Run ``cmd`` in its own session; returns (returncode, timed_out).

    On timeout the whole process group is killed so grandchildren holding
    the log files do not outlive us.
    """
    with open(stdout_path, "wb") as out, open(stderr_path, "wb") as err:
        proc = subprocess.Popen(list(cmd), cwd=cwd, stdout=out, stderr=err,
                                stdin=subprocess.DEVNULL, start_new_session=True)
        try:
            return proc.wait(timeout=timeout), False
        except subprocess.TimeoutExpired:
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            proc.wait()
            return None, True


def _predict_external(structures, ids, cfg: PredictorConfig) -> list[float]:
    with tempfile.TemporaryDirectory(prefix="amdflow-predict-") as tmp:
        batch = Path(tmp)
        (batch / "input").mkdir()
        (batch / "output").mkdir()
        for sid, s in zip(ids, structures):
            (batch / "input" / f"{sid}.vasp").write_text(write_poscar(s), encoding="utf-8")
        try:
            code, timed_out = _run_command([*cfg.command, str(batch)], None, cfg.timeout,
                                           batch / "stdout.log", batch / "stderr.log")
        except OSError as exc:
            raise PredictorError(f"cannot start predictor: {exc}", ids) from None
        if timed_out:
            raise PredictorError(f"predictor timed out after {cfg.timeout:g} s", ids)
        if code != 0:
            tail = (batch / "stderr.log").read_text(errors="replace").strip()[-500:]
            raise PredictorError(f"predictor exited with nonzero status {code}: {tail}", ids)
        out_file = batch / "output" / "energies.tsv"
        if not out_file.exists():
            raise PredictorError("predictor wrote no output/energies.tsv", ids)
        values: dict[str, float] = {}
        for lineno, line in enumerate(out_file.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            try:
                values[parts[0].strip()] = float(parts[1])
            except (IndexError, ValueError):
                raise PredictorError(f"energies.tsv line {lineno} is malformed: {line!r}") from None
    missing = [sid for sid in ids if sid not in values]
    if missing:
        raise PredictorError("predictor output is missing structures", missing)
    extra = sorted(set(values) - set(ids))
    if extra:
        raise PredictorError("predictor output has unexpected ids", extra)
    bad = [sid for sid in ids if not math.isfinite(values[sid])]
    if bad:
        raise PredictorError("predictor returned non-finite energies", bad)
    return [values[sid] for sid in ids]


def predict_batch(structures: Sequence[CrystalStructure], cfg: PredictorConfig,
                  ids: Sequence[str] | None = None) -> list[EnergyPrediction]:
    """One prediction per structure, aligned with the input order."""
    if not structures:
        raise ValueError("empty batch")
    if ids is None:
        ids = [f"s{i:06d}" for i in range(len(structures))]
    if len(ids) != len(structures):
        raise ValueError("ids and structures differ in length")
    if len(set(ids)) != len(ids):
        raise ValueError("structure ids in a batch must be unique")
    if cfg.kind == "builtin-surrogate":
        values = [surrogate_energy_per_atom(s) for s in structures]
    else:
        values = _predict_external(structures, ids, cfg)
    return [EnergyPrediction(sid, v, cfg.name) for sid, v in zip(ids, values)]


def select_candidates(preds: Sequence[EnergyPrediction], cfg: PredictorConfig) -> list[str]:
    """Ids passing the energy threshold and/or top-k cut, lowest energy first."""
    ranked = sorted(preds, key=lambda p: (p.predicted_ef, p.structure_id))
    keep = ranked
    if cfg.threshold_ef is not None:
        keep = [p for p in keep if p.predicted_ef <= cfg.threshold_ef]
    if cfg.top_k is not None:
        lowest = {p.structure_id for p in ranked[:cfg.top_k]}
        keep = [p for p in keep if p.structure_id in lowest]
    if not keep:
        logger.info("screening kept 0 of %d structures", len(preds))
    seen = set()
    out = []
    for p in keep:
        if p.structure_id not in seen:
            seen.add(p.structure_id)
            out.append(p.structure_id)
    return out
