"""The five-stage discovery workflow expressed as engine tasks.

    generate -> screen (one task per batch) -> filter -> calc (one per structure) -> postprocess

Stages that fan out submit their children from inside their handler, so
the ledger alone describes the whole DAG and ``resume`` needs no extra
bookkeeping. Each handler writes its data files first, submits children,
and only then commits its declared outputs file; a crash anywhere before
the commit reruns the handler, and resubmitting children is a no-op.

Work directory layout::

    ledger.jsonl, config.snapshot.json, pools.conf
    candidates/<id>.vasp, candidates/manifest.json
    screen/<batch>.tsv
    filtered/ids.txt, filtered/energies.tsv
    calc/<id>/{POSCAR, result.tsv, CONTCAR, result.json}
    hull.tsv, phase_diagram.svg, promoted/<id>.vasp, promoted.txt, report.json
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from pathlib import Path

from .calculator import CalcJobSpec, CalcResult, run_calculation
from .config import RunConfig
from .engine import Engine, TaskContext, TaskSpec, WorkerPool, atomic_write, canonical_payload
from .hull import PhaseEntry, ReferenceSet, build_hull, promote_candidates, read_references
from .phase_diagram import export_phase_diagram
from .screening import EnergyPrediction, predict_batch, select_candidates
from .similarity import ScoredStructure, dedup
from .structure import composition_of, read_poscar, write_poscar
from .substitution import (SubstitutionSpec, _template_files, candidate_ids, enumerate_substitutions,
                           ingest_templates)

logger = logging.getLogger(__name__)

MANIFEST = "candidates/manifest.json"
FILTERED = "filtered/ids.txt"
REPORT = "report.json"


class NoResultsError(RuntimeError):
    """No converged calculation results are available for post-processing."""


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def templates_digest(templates_dir) -> list[list[str]]:
    return [[p.name, _sha(p.read_bytes())] for p in _template_files(Path(templates_dir))]


class Pipeline:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.work = Path(cfg.work_dir)

    def handlers(self) -> dict:
        return {
            "generate": self.generate,
            "screen": self.screen,
            "filter": self.filter,
            "calc": self.calc,
            "postprocess": self.postprocess,
        }

    def pools(self) -> list[WorkerPool]:
        return [WorkerPool(p.name, p.resource_class, p.size) for p in self.cfg.pools]

    def engine(self, **kwargs) -> Engine:
        return Engine(self.work / "ledger.jsonl", self.handlers(), max_attempts=self.cfg.max_attempts,
                      pools_conf=self.work / "pools.conf", **kwargs)

    def generate_spec(self) -> TaskSpec:
        cfg = self.cfg
        payload = {
            "system": cfg.system,
            "templates": templates_digest(cfg.templates_dir),
            "allow_fewer": cfg.allow_fewer,
            "max_candidates": cfg.max_candidates,
        }
        return TaskSpec("generate", canonical_payload(payload), (), "cpu", MANIFEST)

    def seed(self, engine: Engine) -> str:
        return engine.submit(self.generate_spec())

    # -- stage handlers ----------------------------------------------------

    def generate(self, spec: TaskSpec, ctx: TaskContext) -> None:
        cfg = self.cfg
        templates = ingest_templates(cfg.templates_dir)
        for err in templates.errors:
            logger.warning("template skipped: %s", err)
        result = enumerate_substitutions(
            templates, SubstitutionSpec(tuple(cfg.system), cfg.max_candidates, cfg.allow_fewer))
        ids = candidate_ids(len(result.structures))
        cand_dir = self.work / "candidates"
        cand_dir.mkdir(parents=True, exist_ok=True)
        for cid, s in zip(ids, result.structures):
            atomic_write(cand_dir / f"{cid}.vasp", write_poscar(s))
        logger.info("generated %d candidates from %d templates%s", len(ids), len(templates),
                    " (truncated)" if result.truncated else "")

        pc = cfg.predictor
        pred = pc.predictor_config()
        screen_keys = []
        for start in range(0, len(ids), pc.batch_size):
            batch = ids[start:start + pc.batch_size]
            payload = {"ids": batch, "kind": pred.kind, "command": pred.command, "timeout": pred.timeout}
            key = _sha(canonical_payload(payload))[:16]
            screen_keys.append(ctx.submit(TaskSpec(
                "screen", canonical_payload(payload), (spec.key,), pc.resource_class, f"screen/{key}.tsv")))
        filter_payload = {
            "threshold_ef": pred.threshold_ef, "top_k": pred.top_k, "keep_elemental": pc.keep_elemental,
            "dedup_threshold": cfg.dedup_threshold, "fingerprint": vars(cfg.fingerprint),
        }
        ctx.submit(TaskSpec("filter", canonical_payload(filter_payload), tuple(screen_keys), "cpu", FILTERED))

        manifest = {"ids": ids, "labels": [s.label for s in result.structures],
                    "truncated": result.truncated, "raw_count": result.raw_count,
                    "template_errors": templates.errors}
        atomic_write(ctx.outputs_path, json.dumps(manifest, indent=1) + "\n")

    def screen(self, spec: TaskSpec, ctx: TaskContext) -> None:
        data = spec.data
        ids = data["ids"]
        structures = [read_poscar(self.work / "candidates" / f"{cid}.vasp") for cid in ids]
        preds = predict_batch(structures, self.cfg.predictor.predictor_config(), ids)
        lines = [f"{p.structure_id}\t{p.predicted_ef!r}\t{p.predictor_name}" for p in preds]
        atomic_write(ctx.outputs_path, "\n".join(lines) + "\n")

    def filter(self, spec: TaskSpec, ctx: TaskContext) -> None:
        cfg = self.cfg
        preds: list[EnergyPrediction] = []
        for dep in spec.inputs:
            for line in ctx.outputs_of(dep).read_text(encoding="utf-8").splitlines():
                sid, value, name = line.split("\t")
                preds.append(EnergyPrediction(sid, float(value), name))
        energy = {p.structure_id: p.predicted_ef for p in preds}
        selected = set(select_candidates(preds, cfg.predictor.predictor_config()))
        structures = {sid: read_poscar(self.work / "candidates" / f"{sid}.vasp") for sid in energy}
        if cfg.predictor.keep_elemental:
            selected |= {sid for sid, s in structures.items() if len(s.species) == 1}
        items = [ScoredStructure(sid, structures[sid], energy[sid]) for sid in sorted(selected)]
        kept = dedup(items, cfg.dedup_threshold, cfg.fingerprint)
        logger.info("screening kept %d of %d; %d after near-duplicate removal",
                    len(selected), len(preds), len(kept))
        out = self.work / "filtered"
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / "energies.tsv", "".join(f"{k.id}\t{k.energy!r}\n" for k in kept))

        calc = cfg.calculator
        calc_keys = []
        for item in kept:
            text = write_poscar(item.structure)
            payload = {"id": item.id, "structure_sha256": _sha(text.encode()), "kind": calc.kind,
                       "command": calc.command, "time_limit": calc.time_limit, "mock_delay": calc.mock_delay}
            calc_keys.append(ctx.submit(TaskSpec(
                "calc", canonical_payload(payload), (spec.key,), calc.resource_class,
                f"calc/{item.id}/result.json")))
        post_payload = {"system": cfg.system, "e_cut": cfg.e_cut_promote,
                        "references": read_references(cfg.references) if cfg.references else None}
        ctx.submit(TaskSpec("postprocess", canonical_payload(post_payload),
                            tuple(calc_keys) or (spec.key,), "cpu", REPORT))
        atomic_write(ctx.outputs_path, "".join(f"{k.id}\n" for k in kept))

    def calc(self, spec: TaskSpec, ctx: TaskContext) -> None:
        data = spec.data
        calc = self.cfg.calculator
        sid = data["id"]
        structure = read_poscar(self.work / "candidates" / f"{sid}.vasp")
        job = CalcJobSpec(sid, structure, calc.kind, tuple(calc.command) if calc.command else None,
                          calc.time_limit, calc.resource_class, calc.mock_delay)
        result = run_calculation(job, self.work / "calc" / sid)
        if not result.converged:
            logger.warning("calculation %s failed: %s", sid, result.cause)
        atomic_write(ctx.outputs_path, result.to_json())

    def postprocess(self, spec: TaskSpec, ctx: TaskContext) -> None:
        report = analyze(self.cfg)
        atomic_write(ctx.outputs_path, json.dumps(report, indent=1, sort_keys=True) + "\n")


def load_results(work_dir) -> tuple[list[str], dict[str, CalcResult]]:
    """Filtered ids and every calculation result stored for them."""
    work = Path(work_dir)
    ids_file = work / FILTERED
    if not ids_file.exists():
        raise NoResultsError(f"no filtered candidate list at {ids_file}")
    ids = [line.strip() for line in ids_file.read_text().splitlines() if line.strip()]
    results = {}
    for sid in ids:
        path = work / "calc" / sid / "result.json"
        if path.exists():
            results[sid] = CalcResult.from_json(path.read_text(encoding="utf-8"))
    return ids, results


def analyze(cfg: RunConfig) -> dict:
    """Hull analysis over stored results: writes hull.tsv, the SVG and promoted/."""
    work = Path(cfg.work_dir)
    ids, results = load_results(work)
    good = {sid: r for sid, r in results.items() if r.converged and math.isfinite(r.total_energy)}
    if not good:
        raise NoResultsError("no converged calculation results to analyze")
    entries = [PhaseEntry.from_total(sid, composition_of(r.final_structure), r.total_energy)
               for sid, r in sorted(good.items())]
    user_refs = read_references(cfg.references) if cfg.references else {}
    refs = ReferenceSet.from_entries(entries, {k: v for k, v in user_refs.items() if k in cfg.system})
    hull = build_hull(entries, refs, cfg.system)
    export_phase_diagram(hull, entries, work)
    structures = {sid: r.final_structure for sid, r in good.items()}
    promoted = promote_candidates(entries, hull, cfg.e_cut_promote, work / "promoted", structures)
    atomic_write(work / "promoted.txt", "".join(f"{p}\n" for p in promoted))
    failed = sorted(sid for sid in ids if sid not in good)
    return {
        "elements": list(hull.elements),
        "entries": len(entries),
        "failed_calculations": failed,
        "hull_vertices": hull.vertices,
        "promoted": promoted,
        "references": {k: refs[k] for k in hull.elements},
    }
