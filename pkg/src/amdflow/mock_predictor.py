"""Stand-in predictor for the external-command protocol.

``python -m amdflow.mock_predictor <batch_dir>`` reads ``input/*.vasp`` and
writes ``output/energies.tsv`` with the built-in surrogate energies.
"""

from __future__ import annotations

import sys
from pathlib import Path

from .screening import surrogate_energy_per_atom
from .structure import read_poscar


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python -m amdflow.mock_predictor <batch_dir>", file=sys.stderr)
        return 2
    batch = Path(argv[0])
    lines = [f"{p.stem}\t{surrogate_energy_per_atom(read_poscar(p))!r}\n"
             for p in sorted((batch / "input").glob("*.vasp"))]
    (batch / "output").mkdir(exist_ok=True)
    (batch / "output" / "energies.tsv").write_text("".join(lines), encoding="utf-8")
    return 0


if __name__ == "__main__":
    sys.exit(main())
