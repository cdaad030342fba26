"""Compare the compiled and numpy rasterization kernels.

    python benchmarks/bench_rasterize.py [--sizes 100 500 1500] [--resolution 64] [--repeats 5]

Prints median forward and backward wall time per backend and checks the two
backends agree on the image and gradients.
"""

import argparse
import statistics
import time

import numpy as np

from wildsplat import _backend
from wildsplat.core import GaussianCloud, View, logit
from wildsplat.renderer import RenderSettings, rasterize_backward, rasterize_forward


def make_cloud(rng, n):
    return GaussianCloud(
        positions=rng.uniform(0.1, 0.9, (n, 2)),
        log_scales=np.log(rng.uniform(0.01, 0.05, (n, 2))),
        rotations=rng.uniform(0, np.pi, n),
        opacity_logits=logit(rng.uniform(0.1, 0.9, n)),
        colors=rng.uniform(0.0, 1.0, (n, 3)),
        depths=rng.permutation(n).astype(float),
    )


def timed(fn, repeats):
    out, times = None, []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return out, statistics.median(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[100, 500, 1500])
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    backends = ["python"]
    try:
        _backend.load("cython")
        backends.insert(0, "cython")
    except ImportError:
        print("compiled kernel not built; timing the numpy fallback only")

    rng = np.random.default_rng(args.seed)
    r = args.resolution
    view = View(A=np.eye(2), t=np.zeros(2), gt_image=np.zeros((r, r, 3)), view_id=0)
    dL = rng.normal(size=(r, r, 3))
    print(f"{'N':>6} {'backend':>8} {'forward ms':>11} {'backward ms':>12}")
    for n in args.sizes:
        cloud = make_cloud(rng, n)
        results = {}
        for name in backends:
            s = RenderSettings(backend=name)
            fwd, t_f = timed(lambda: rasterize_forward(cloud, view, s), args.repeats)
            bwd, t_b = timed(lambda: rasterize_backward(cloud, view, dL, fwd, s), args.repeats)
            results[name] = (fwd, bwd, t_f, t_b)
            print(f"{n:>6} {name:>8} {1e3 * t_f:>11.2f} {1e3 * t_b:>12.2f}")
        if len(results) == 2:
            (f1, b1, tf1, tb1), (f2, b2, tf2, tb2) = results["cython"], results["python"]
            err = max(np.abs(f1.image - f2.image).max(),
                      *(np.abs(b1.per_attribute[a] - b2.per_attribute[a]).max() for a in b1.per_attribute))
            print(f"{n:>6} {'speedup':>8} {tf2 / tf1:>10.1f}x {tb2 / tb1:>11.1f}x   max |diff| {err:.2e}")


if __name__ == "__main__":
    main()
