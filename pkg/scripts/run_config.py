"""Run the full pipeline for one configuration and print the FSC table.

    python scripts/run_config.py configs/desk_spin.cfg --out results/desk_spin
"""
import argparse
import sys
from pathlib import Path

from specvol import cli, io
from specvol.config import load_config


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", type=Path)
    ap.add_argument("--out", type=Path, default=None)
    ap.add_argument("--deterministic", action="store_true")
    args = ap.parse_args()
    argv = ["pipeline", "--config", str(args.config), "-v"]
    if args.out:
        argv += ["--out", str(args.out)]
    if args.deterministic:
        argv.append("--deterministic")
    code = cli.run(argv)
    if code:
        return code
    out = args.out or Path(load_config(args.config).output)
    summary = io.read_json(out / "eval" / "summary.json")
    cg = io.read_json(out / "spectral" / "cg.json")
    print(f"{'r':>3} {'FSC(low quarter)':>17} {'CG iters':>9}")
    for r, value in sorted(summary["band_mean_quarter"].items(), key=lambda kv: int(kv[0])):
        print(f"{int(r):3d} {value:17.4f} {cg[r]['iterations']:9d}")
    emb = out / "basis" / "embedding.json"
    if emb.exists():
        print("embedding:", io.read_json(emb))
    return 0


if __name__ == "__main__":
    sys.exit(main())
