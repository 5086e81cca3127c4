"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Shapes follow the default toy model: a 64x64 input, a 32x32x48 conv5 map,
16 RoIs on a 6x6 grid, and NMS over every anchor of the map, full and
stopped at the 32 boxes proposal keeps.
"""

import argparse
import timeit

import numpy as np

from jointface import _pykernels, kernels


def cases(rng):
    x = rng.standard_normal((4, 16, 64, 64)).astype(np.float32)
    out, arg = _pykernels.maxpool2d_forward(x, 2, 2)
    g_pool = rng.standard_normal(out.shape).astype(np.float32)

    feat = rng.standard_normal((48, 32, 32)).astype(np.float32)
    x0 = rng.integers(0, 20, 16)
    y0 = rng.integers(0, 20, 16)
    rois = np.stack([x0, y0, x0 + rng.integers(6, 13, 16), y0 + rng.integers(6, 13, 16)], 1).astype(np.int64)
    pooled, mask = _pykernels.roi_pool_forward(feat, rois, 6, 6)
    g_roi = rng.standard_normal(pooled.shape).astype(np.float32)

    n = 32 * 32 * 3
    xy = rng.uniform(0, 60, (n, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(8, 30, (n, 2))], axis=1)
    order = np.argsort(-rng.random(n), kind="stable").astype(np.int64)

    return {
        "maxpool forward": lambda k: k.maxpool2d_forward(x, 2, 2),
        "maxpool backward": lambda k: k.maxpool2d_backward(g_pool, arg, 64, 64),
        "roi_pool forward": lambda k: k.roi_pool_forward(feat, rois, 6, 6),
        "roi_pool backward": lambda k: k.roi_pool_backward(g_roi, mask, 48, 32, 32),
        "nms (full)": lambda k: k.nms(boxes, order, 0.7),
        "nms (keep 32)": lambda k: k.nms(boxes, order, 0.7, 32),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    compiled = kernels.BACKENDS.get("cython")
    if compiled is None:
        print("compiled extension not built; run `pip install --no-build-isolation -e .` first")
        return
    print(f"{'kernel':<20}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in cases(np.random.default_rng(0)).items():
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat)) * 1e3
        t_c = min(timeit.repeat(lambda: fn(compiled), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<20}{t_py:12.3f}{t_c:12.3f}{t_py / t_c:9.1f}x")


if __name__ == "__main__":
    main()
