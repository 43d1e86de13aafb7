"""Stand-in for a DFT code speaking the job-directory protocol.

Run inside a job directory holding ``POSCAR``; writes ``result.tsv`` with
the surrogate total energy and copies the input to ``CONTCAR``::

    python -m amdflow.mock_dft [--delay S] [--log FILE] [--fail]
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

from .calculator import mock_total_energy
from .structure import read_poscar, write_poscar


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m amdflow.mock_dft")
    ap.add_argument("--delay", type=float, default=0.0, help="seconds to sleep before answering")
    ap.add_argument("--log", help="append one line per completed execution to this file")
    ap.add_argument("--fail", action="store_true", help="exit with status 3 without output")
    args = ap.parse_args(argv)
    if args.fail:
        return 3
    s = read_poscar("POSCAR")
    parent = os.getppid()
    deadline = time.monotonic() + args.delay
    while time.monotonic() < deadline:
        time.sleep(min(0.01, max(0.0, deadline - time.monotonic())))
        if os.getppid() != parent:
            return 4  # the scheduler died; nobody will read the result
    Path("CONTCAR").write_text(write_poscar(s), encoding="utf-8")
    tmp = Path(".result.tsv.tmp")
    tmp.write_text(f"energy\t{mock_total_energy(s)!r}\nconverged\ttrue\n", encoding="utf-8")
    os.replace(tmp, "result.tsv")
    if args.log:
        with open(args.log, "a", encoding="utf-8") as fh:
            fh.write(f"{Path.cwd().name}\t{os.getpid()}\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
