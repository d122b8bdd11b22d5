"""Run the full scale-search battery on one workspace and print headlines.

Chains the CLI subcommands (embed, gridsearch, scaling, displaced, qini,
interpret) into per-command subdirectories of --out, then summarizes the
gain report and the scaling curve. Any nonzero exit aborts the battery.
"""
import argparse
import json
import os

from multiscale_cate import cli

COMMANDS = ("embed", "gridsearch", "scaling", "displaced", "qini", "interpret")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="demo/demo.toml")
    ap.add_argument("--out", default="runs/scale_search")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--skip", default="", help="comma list of subcommands to skip")
    args = ap.parse_args()

    skip = set(filter(None, args.skip.split(",")))
    for command in COMMANDS:
        if command in skip:
            continue
        outdir = os.path.join(args.out, command)
        code = cli.main([
            command, "--config", args.config,
            "--out", outdir, "--threads", str(args.threads),
        ])
        if code != 0:
            print(f"{command} failed with exit code {code}")
            return code
        print(f"{command}: wrote {outdir}/")

    gain_path = os.path.join(args.out, "gridsearch", "gain.json")
    if os.path.exists(gain_path):
        with open(gain_path, "r", encoding="utf-8") as fh:
            gain = json.load(fh)
        bm, bs = gain["best_multi"], gain["best_single"]
        print(
            f"best pair ({bm['s1']}, {bm['s2']}) ratio {bm['ratio']:.2f}; "
            f"best single {bs['s']} ratio {bs['ratio']:.2f}; "
            f"G = {gain['gain']:.2f} (se {gain['se_gain']:.2f})"
        )
    curve_path = os.path.join(args.out, "scaling", "scaling_curve.csv")
    if os.path.exists(curve_path):
        with open(curve_path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()[1:]
        curve = ", ".join(
            f"C={row.split(',')[0]}: {float(row.split(',')[1]):.2f}" for row in lines
        )
        print(f"mean RATE ratio by number of scales: {curve}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
