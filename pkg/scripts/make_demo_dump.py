"""Write a synthetic probing dump (.qkd) and its sequence sidecar for CLI experiments.

    python scripts/make_demo_dump.py --out demo --preset depth_specialized --seed 0
"""

import argparse
import json
from pathlib import Path

from kvcurate.qkio import write_dump
from kvcurate.synthlab import PRESETS, generate, preset


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="demo", help="directory for dump.qkd and seq.json")
    ap.add_argument("--preset", default="depth_specialized", choices=sorted(PRESETS))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--m", type=int, help="override the number of history turns")
    args = ap.parse_args()
    over = {"seed": args.seed} | ({"m": args.m} if args.m is not None else {})
    cfg = preset(args.preset, **over)
    dump, seq = generate(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dump(dump, out / "dump.qkd")
    (out / "seq.json").write_text(seq.dumps())
    (out / "synth.json").write_text(json.dumps(cfg.to_json(), indent=2) + "\n")
    print(f"wrote {out}/dump.qkd ({dump.layers} layers, {dump.num_tokens} tokens) and {out}/seq.json")


if __name__ == "__main__":
    main()
