"""FSC band mean against the number of spectral volumes for several seeds.

Reuses one results directory per seed; prints a table of band means."""
import argparse
from pathlib import Path

from specvol import cli, io


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", type=Path)
    ap.add_argument("--seeds", type=int, nargs="+", default=[7, 8, 9])
    ap.add_argument("--out", type=Path, default=Path("results/sweep"))
    args = ap.parse_args()
    rows = {}
    for seed in args.seeds:
        out = args.out / f"seed{seed}"
        if cli.run(["pipeline", "--config", str(args.config), "--out", str(out), "--seed", str(seed)]):
            raise SystemExit(f"seed {seed} failed")
        rows[seed] = io.read_json(out / "eval" / "summary.json")["band_mean_quarter"]
    rs = sorted(rows[args.seeds[0]], key=int)
    print("seed " + " ".join(f"r={r:>4}" for r in rs))
    for seed, vals in rows.items():
        print(f"{seed:4d} " + " ".join(f"{vals[r]:6.3f}" for r in rs))


if __name__ == "__main__":
    main()
