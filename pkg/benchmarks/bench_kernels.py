"""Time the compiled and numpy kernel backends on texture-world sized batches.

Run ``python benchmarks/bench_kernels.py [--repeat N]``. Each kernel is
checked for agreement between backends before timing.
"""

import argparse
import timeit

import numpy as np

from egoeq.kernels import available_backends


def cases(rng, batch=32):
    x = rng.normal(size=(batch, 1, 24, 24))
    w = rng.normal(size=(8, 1, 5, 5))
    b = rng.normal(size=8)
    y_conv = rng.normal(size=(batch, 8, 20, 20))
    h = rng.normal(size=(batch, 8, 20, 20))
    g_pool = rng.normal(size=(batch, 8, 9, 9))

    def conv_fwd(k):
        return k.conv2d_forward(x, w, b, 1)

    def conv_bwd(k):
        return k.conv2d_backward(x, w, y_conv, 1)

    def max_fwd(k):
        return k.maxpool_forward(h, 3, 2)

    def max_bwd(k):
        _, argmax = k.maxpool_forward(h, 3, 2)
        return k.maxpool_backward(g_pool, argmax, 20, 20)

    def avg_fwd(k):
        return k.avgpool_forward(h, 3, 2)

    def avg_bwd(k):
        return k.avgpool_backward(g_pool, 20, 20, 3, 2)

    return {"conv2d_forward": conv_fwd, "conv2d_backward": conv_bwd, "maxpool_forward": max_fwd,
            "maxpool_backward": max_bwd, "avgpool_forward": avg_fwd, "avgpool_backward": avg_bwd}


def _flat(out):
    return [np.asarray(o, dtype=np.float64) for o in (out if isinstance(out, tuple) else (out,))]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--batch", type=int, default=32)
    args = p.parse_args(argv)
    backends = available_backends()
    rng = np.random.default_rng(0)
    print(f"backends: {', '.join(backends)}")
    print(f"{'kernel':<18}" + "".join(f"{name + ' ms':>14}" for name in backends) + f"{'speedup':>10}")
    for name, fn in cases(rng, args.batch).items():
        ref = _flat(fn(backends["python"]))
        for other in backends.values():
            for a, b in zip(ref, _flat(fn(other))):
                np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-10)
        ms = {k: 1e3 * min(timeit.repeat(lambda m=m: fn(m), number=1, repeat=args.repeat))
              for k, m in backends.items()}
        speed = ms["python"] / ms["cython"] if "cython" in ms else float("nan")
        print(f"{name:<18}" + "".join(f"{ms[k]:>14.3f}" for k in backends) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
