import math
import sys

import pytest

from amdflow.calculator import CalcJobSpec, CalcResult, mock_total_energy, run_calculation
from amdflow.structure import parse_poscar
from conftest import cubic

FE = cubic(2.87, ["Fe", "In"], [[0, 0, 0], [0.5, 0.5, 0.5]], "FeIn")


def test_mock_deterministic(tmp_path):
    job = CalcJobSpec("x", FE)
    a = run_calculation(job, tmp_path / "a")
    b = run_calculation(job, tmp_path / "b")
    assert a.total_energy == b.total_energy and a.converged and a.final_structure == FE
    assert parse_poscar((tmp_path / "a" / "POSCAR").read_text()) == FE


def test_mock_size_extensive():
    assert mock_total_energy(FE.supercell((2, 1, 1))) == pytest.approx(2 * mock_total_energy(FE), abs=1e-6)


def _script(tmp_path, body):
    p = tmp_path / "calc.py"
    p.write_text(body)
    return (sys.executable, str(p))


def test_external_energy_echo(tmp_path):
    cmd = _script(tmp_path, "open('result.tsv', 'w').write('energy\\t-12.5\\n')\n")
    r = run_calculation(CalcJobSpec("x", FE, "external-command", cmd), tmp_path / "job")
    assert r.converged and r.total_energy == -12.5 and r.final_structure == FE


def test_external_timeout(tmp_path):
    cmd = _script(tmp_path, "import time\ntime.sleep(10)\n")
    r = run_calculation(CalcJobSpec("x", FE, "external-command", cmd, time_limit=1), tmp_path / "job")
    assert not r.converged and "timeout" in r.cause and math.isnan(r.total_energy)
    assert r.wall_time < 5


def test_external_nonzero_exit(tmp_path):
    r = run_calculation(CalcJobSpec("x", FE, "external-command", ("false",)), tmp_path / "job")
    assert not r.converged and "status 1" in r.cause


def test_external_unparsable(tmp_path):
    cmd = _script(tmp_path, "open('result.tsv', 'w').write('energy\\tabc\\n')\n")
    r = run_calculation(CalcJobSpec("x", FE, "external-command", cmd), tmp_path / "job")
    assert not r.converged and "unparsable" in r.cause
    cmd = _script(tmp_path, "open('result.tsv', 'w').write('energy\\t1.0\\n')\nopen('CONTCAR','w').write('junk')\n")
    r = run_calculation(CalcJobSpec("x", FE, "external-command", cmd), tmp_path / "job")
    assert not r.converged and "CONTCAR" in r.cause


def test_external_not_converged_flag(tmp_path):
    cmd = _script(tmp_path, "open('result.tsv', 'w').write('energy\\t-3.0\\nconverged\\tfalse\\n')\n")
    r = run_calculation(CalcJobSpec("x", FE, "external-command", cmd), tmp_path / "job")
    assert not r.converged and r.total_energy == -3.0


def test_mock_dft_adapter(tmp_path):
    log = tmp_path / "exec.log"
    cmd = (sys.executable, "-m", "amdflow.mock_dft", "--log", str(log))
    r = run_calculation(CalcJobSpec("x", FE, "external-command", cmd), tmp_path / "x")
    assert r.converged
    assert r.total_energy == mock_total_energy(FE)
    assert r.final_structure == FE
    assert log.read_text().count("\n") == 1


def test_fresh_job_dir(tmp_path):
    (tmp_path / "job").mkdir()
    (tmp_path / "job" / "stale").write_text("x")
    run_calculation(CalcJobSpec("x", FE), tmp_path / "job")
    assert not (tmp_path / "job" / "stale").exists()


def test_result_json_round_trip(tmp_path):
    r = run_calculation(CalcJobSpec("x", FE), tmp_path / "j")
    assert CalcResult.from_json(r.to_json()) == r
    bad = CalcResult("y", math.nan, FE, False, 0.1, "boom")
    back = CalcResult.from_json(bad.to_json())
    assert math.isnan(back.total_energy) and back.cause == "boom"


def test_job_validation():
    with pytest.raises(ValueError):
        CalcJobSpec("x", FE, "external-command")
    with pytest.raises(ValueError):
        CalcJobSpec("x", FE, time_limit=0)
