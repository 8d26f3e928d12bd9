"""Run every CLI experiment end to end into one output tree.

    python scripts/run_experiments.py --out results [--quick]

Layout: ``<out>/<command>/`` holds each command's reports plus manifest.json.
``--quick`` shrinks the sweeps for a smoke run.
"""

import argparse
import json
import sys
import tempfile
from pathlib import Path

from kvcurate import cli
from kvcurate.qkio import write_dump
from kvcurate.synthlab import generate, preset

CONFIGS = Path(__file__).resolve().parent / "configs"


def _quick(path: Path, tmp: Path, **patch) -> Path:
    spec = json.loads(path.read_text()) | patch
    out = tmp / path.name
    out.write_text(json.dumps(spec))
    return out


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="results")
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    out = Path(args.out)
    tmp = Path(tempfile.mkdtemp())

    dump, seq = generate(preset("depth_specialized"))
    write_dump(dump, tmp / "dump.qkd")
    (tmp / "seq.json").write_text(seq.dumps())
    io = ["--dump", tmp / "dump.qkd", "--seq", tmp / "seq.json"]
    layers = ["--ell_grd", 1, "--ell_syn", dump.layers - 1]

    sweep, table, cost = CONFIGS / "event_bottleneck.json", CONFIGS / "table1.json", CONFIGS / "cost.json"
    if args.quick:
        sweep = _quick(sweep, tmp, seeds=[0], slots=[5, 20])
        table = _quick(table, tmp, seeds=[0], slots=[30])
        cost = _quick(cost, tmp, history_tokens=[25000], repeats=1)

    runs = [
        ["probe", *io, *layers],
        ["plan", *io, *layers],
        ["evict", *io, *layers],
        ["diagnose", *io, "--reference-turn", 1],
        ["simulate", "--config", sweep],
        ["ablate", "--manifest", table],
        ["cost", "--config", cost],
    ]
    for argv in runs:
        code = cli.main([str(a) for a in argv] + ["--out-dir", str(out / argv[0])])
        print(f"{argv[0]:9s} exit {code}")
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
