"""First-principles calculator adapter.

An external calculator is any command honouring this contract, run with
the job directory as its working directory::

    POSCAR       input structure (written by us)
    result.tsv   "key<TAB>value" lines; ``energy`` (eV, whole cell) is required,
                 ``converged`` (true/false) is optional and defaults to true
    CONTCAR      optional final structure in POSCAR format

Failures (nonzero exit, timeout, unreadable output) come back as
non-converged :class:`CalcResult` objects instead of exceptions.
"""

from __future__ import annotations

import json
import math
import shutil
import time
from dataclasses import dataclass
from pathlib import Path

from .screening import _run_command, surrogate_energy_per_atom
from .structure import CrystalStructure, PoscarError, StructureError, parse_poscar, write_poscar

RESOURCE_CLASSES = ("cpu", "accelerator")


@dataclass(frozen=True)
class CalcJobSpec:
    structure_id: str
    structure: CrystalStructure
    kind: str = "mock"
    command: tuple[str, ...] | None = None
    time_limit: float = 3600.0
    resource_class: str = "cpu"
    mock_delay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("mock", "external-command"):
            raise ValueError(f"unknown calculator kind {self.kind!r}")
        if self.kind == "external-command" and not self.command:
            raise ValueError("external-command calculator requires a command")
        if self.command is not None:
            object.__setattr__(self, "command", tuple(self.command))
        if not self.time_limit > 0:
            raise ValueError("time_limit must be positive")
        if self.resource_class not in RESOURCE_CLASSES:
            raise ValueError(f"resource_class must be one of {RESOURCE_CLASSES}")


@dataclass(frozen=True)
class CalcResult:
    structure_id: str
    total_energy: float
    final_structure: CrystalStructure
    converged: bool
    wall_time: float
    cause: str = ""

    def to_json(self) -> str:
        return json.dumps({
            "structure_id": self.structure_id,
            "total_energy": self.total_energy if math.isfinite(self.total_energy) else None,
            "converged": self.converged,
            "wall_time": self.wall_time,
            "cause": self.cause,
            "final_structure": write_poscar(self.final_structure),
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> CalcResult:
        d = json.loads(text)
        energy = d["total_energy"]
        return cls(d["structure_id"], math.nan if energy is None else float(energy),
                   parse_poscar(d["final_structure"]), bool(d["converged"]),
                   float(d["wall_time"]), d.get("cause", ""))


def mock_total_energy(s: CrystalStructure) -> float:
    return len(s) * surrogate_energy_per_atom(s)


def _failed(job: CalcJobSpec, cause: str, started: float) -> CalcResult:
    return CalcResult(job.structure_id, math.nan, job.structure, False,
                      time.monotonic() - started, cause)


def _parse_result_tsv(path: Path) -> tuple[float, bool]:
    values = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("\t")
        if not sep:
            raise ValueError(f"malformed result.tsv line {line!r}")
        values[key.strip()] = value.strip()
    if "energy" not in values:
        raise ValueError("result.tsv has no 'energy' entry")
    energy = float(values["energy"])
    flag = values.get("converged", "true").lower()
    if flag not in ("true", "false"):
        raise ValueError(f"converged must be true/false, got {flag!r}")
    return energy, flag == "true"


def run_calculation(job: CalcJobSpec, job_dir) -> CalcResult:
    """Run one calculation in ``job_dir`` (recreated empty before use)."""
    started = time.monotonic()
    job_dir = Path(job_dir)
    if job_dir.exists():
        shutil.rmtree(job_dir)
    job_dir.mkdir(parents=True)
    (job_dir / "POSCAR").write_text(write_poscar(job.structure), encoding="utf-8")

    if job.kind == "mock":
        if job.mock_delay > 0:
            time.sleep(job.mock_delay)
        energy = mock_total_energy(job.structure)
        return CalcResult(job.structure_id, energy, job.structure, True, time.monotonic() - started)

    try:
        code, timed_out = _run_command(job.command, str(job_dir), job.time_limit,
                                       job_dir / "stdout.log", job_dir / "stderr.log")
    except OSError as exc:
        return _failed(job, f"cannot start calculator: {exc}", started)
    if timed_out:
        return _failed(job, f"timeout after {job.time_limit:g} s", started)
    if code != 0:
        return _failed(job, f"calculator exited with status {code}", started)
    try:
        energy, converged = _parse_result_tsv(job_dir / "result.tsv")
    except (OSError, ValueError) as exc:
        return _failed(job, f"unparsable result.tsv: {exc}", started)
    if not math.isfinite(energy):
        return _failed(job, "non-finite energy", started)
    final = job.structure
    contcar = job_dir / "CONTCAR"
    if contcar.exists():
        try:
            final = parse_poscar(contcar.read_text(encoding="utf-8")).with_label(job.structure.label)
        except (PoscarError, StructureError) as exc:
            return _failed(job, f"unparsable CONTCAR: {exc}", started)
    return CalcResult(job.structure_id, energy, final, converged, time.monotonic() - started,
                      "" if converged else "calculator reported non-convergence")
