"""Synthesize a demo workspace: raster, units with a planted two-scale CATE.

Writes raster.bin (+ .json sidecar), units.csv, and a copy of the bundled
demo config into --out. The treatment effect is a step function of the
band-0 window means at scales 16 and 64, so the multi-scale grid search
has a real pair to find.
"""
import argparse
import os
import shutil

import numpy as np

from multiscale_cate import RasterBundle, UnitRecord, save_raster, save_units
from multiscale_cate.imaging import FetchMode, fetch

EFFECT_SCALES = (16, 64)


def build_workspace(out: str, seed: int, side: int, n_units: int) -> None:
    rng = np.random.Generator(np.random.Philox(seed))
    data = rng.standard_normal((2, side, side)).astype(np.float32)
    bundle = RasterBundle(width=side, height=side, bands=2, pixel_size_m=10.0, data=data)

    margin = 40
    cols = rng.integers(margin, side - margin, n_units)
    rows = rng.integers(margin, side - margin, n_units)
    centers = [(float(c) + 0.5, float(r) + 0.5) for c, r in zip(cols, rows)]
    w = rng.integers(0, 2, n_units)

    # tau steps on the sign of the window mean at each effect scale
    z = np.zeros(n_units)
    for s in EFFECT_SCALES:
        means = np.array(
            [fetch(bundle, c, s, mode=FetchMode.CLAMP).data[0].mean() for c in centers]
        )
        z += means > 0
    tau = 6.0 * z - 6.0
    y = w * tau + rng.standard_normal(n_units)

    units = [
        UnitRecord(id=f"u{i:04d}", x=centers[i], w=int(w[i]), y=float(y[i]))
        for i in range(n_units)
    ]

    os.makedirs(out, exist_ok=True)
    save_raster(bundle, os.path.join(out, "raster.bin"))
    save_units(units, os.path.join(out, "units.csv"))
    repo_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    shutil.copyfile(
        os.path.join(repo_root, "configs", "demo.toml"),
        os.path.join(out, "demo.toml"),
    )


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="demo", help="workspace directory")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--side", type=int, default=256, help="raster width and height")
    ap.add_argument("--units", type=int, default=400)
    args = ap.parse_args()
    build_workspace(args.out, args.seed, args.side, args.units)
    print(f"wrote raster.bin, units.csv, demo.toml under {args.out}/")
    print(f"next: mscate gridsearch --config {args.out}/demo.toml")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
