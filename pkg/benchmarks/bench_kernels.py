"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is warmed up once per backend (so JIT compilation is excluded),
then timed as the best of ``--repeat`` runs. Both backends must agree: bitwise
for the integer and rendering kernels, within 1e-12 for the MI sums, whose
accumulation order differs. The script exits non-zero otherwise.
"""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from decompseg import _kernels
from decompseg.episodes import DomainSpec, generate_domain


def _raster_case():
    rng = np.random.default_rng(0)
    prims = [(k % 3, *rng.uniform(0, 64, 2), *rng.uniform(2, 12, 2), rng.uniform(0, np.pi),
              rng.uniform(0.05, 0.4), rng.uniform(0, np.pi), rng.random(), rng.random())
             for k in range(40)]

    def run():
        img = np.zeros((3, 64, 64))
        mask = np.zeros((64, 64), np.uint8)
        owner = np.zeros((64, 64), np.int32)
        for k, (shape, cx, cy, rx, ry, ang, freq, tex, phase, hue) in enumerate(prims):
            _kernels.rasterize(img, mask, owner, k + 1, shape, cx, cy, rx, ry, np.cos(ang),
                               np.sin(ang), freq, np.cos(tex), np.sin(tex), phase, hue, 0.3, 1)
        return img.tobytes() + mask.tobytes() + owner.tobytes()

    return run


def _splitmix_case():
    return lambda: _kernels.splitmix_fill(np.uint64(12345), 200_000).tobytes()


def _downsample_case():
    masks = (np.random.default_rng(1).random((64, 64, 64)) > 0.5).astype(np.uint8)
    return lambda: b"".join(_kernels.majority_downsample(m, 8).tobytes() for m in masks)


def _mi_case():
    rng = np.random.default_rng(2)
    a = rng.random((4096, 16))
    b = a + 0.3 * rng.random((4096, 16))
    return lambda: _kernels.binned_mi(a, b, 8)


def _domain_case():
    spec = DomainSpec(seed=3)

    def run():
        ds = generate_domain(spec, 4, 6)
        return b"".join(r.image.tobytes() + r.mask.tobytes() for r in ds.records)

    return run


CASES = {
    "rasterize 40 prims 64x64": _raster_case,
    "splitmix 200k draws": _splitmix_case,
    "majority downsample 64 masks": _downsample_case,
    "binned MI 4096x16": _mi_case,
    "generate_domain 4x6": _domain_case,
}


def _same(a, b):
    if isinstance(a, bytes):
        return a == b
    return bool(np.allclose(a, b, rtol=0, atol=1e-12))


def bench(repeat):
    rows = []
    for name, factory in CASES.items():
        run = factory()
        times, outputs = {}, {}
        for backend in ("numpy", "numba"):
            _kernels.set_backend(backend)
            outputs[backend] = run()  # warm-up, and JIT compile on numba
            times[backend] = min(timeit.repeat(run, number=1, repeat=repeat))
        rows.append({"case": name, "numpy_s": times["numpy"], "numba_s": times["numba"],
                     "speedup": times["numpy"] / times["numba"],
                     "agree": _same(outputs["numpy"], outputs["numba"])})
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", metavar="PATH", help="also write the rows as JSON")
    args = ap.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1
    rows = bench(args.repeat)
    print(f"{'case':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  same")
    for r in rows:
        print(f"{r['case']:32s} {1e3 * r['numpy_s']:10.2f} {1e3 * r['numba_s']:10.2f} "
              f"{r['speedup']:8.1f}  {'yes' if r['agree'] else 'NO'}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
    return 0 if all(r["agree"] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
