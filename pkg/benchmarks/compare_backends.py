"""Time the compiled and NumPy rasterizer backends on the same scenes.

    python3 benchmarks/compare_backends.py [--sizes 128,256,512] [--spheres 1000,10000,100000]

Prints one row per (size, spheres, backend) and checks that both backends
produce the same image.
"""

import argparse
import time

import numpy as np

from splatview.cli import _bench_cloud
from splatview.raster import BACKENDS, RenderSettings, default_threads, render, render_backward


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="128,256,512")
    ap.add_argument("--spheres", default="1000,10000,100000")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--threads", type=int, default=default_threads())
    args = ap.parse_args()

    settings = RenderSettings()
    print(f"{'size':>6} {'spheres':>8} {'backend':>9} {'fwd ms':>9} {'bwd ms':>9}")
    for size in (int(s) for s in args.sizes.split(",")):
        for n in (int(s) for s in args.spheres.split(",")):
            cloud, cam = _bench_cloud(n, size, size, seed=0)
            g = np.ones((size, size, 3))
            images = {}
            for name in sorted(BACKENDS):
                run = lambda: render(cloud, cam, settings, threads=args.threads, backend=name)  # noqa: E731
                images[name] = run().features
                fwd = best_of(run, args.repeats)
                bwd = best_of(lambda: render_backward(cloud, cam, settings, g, threads=args.threads,
                                                      backend=name), args.repeats)
                print(f"{size:>6} {n:>8} {name:>9} {fwd:>9.2f} {bwd:>9.2f}")
            if len(images) == 2:
                diff = np.abs(images["compiled"] - images["python"]).max()
                print(f"{'':>6} {'':>8} {'max diff':>9} {diff:>9.2e}")


if __name__ == "__main__":
    main()
