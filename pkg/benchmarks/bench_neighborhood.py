"""Time neighborhood attention forward+backward on both backends.

    python benchmarks/bench_neighborhood.py [--sizes 32 64 128] [--repeat 5]
"""
import argparse
import time

import torch

from jointfuse import neighborhood
from jointfuse.neighborhood import neighborhood_attention


def bench(backend, n, size, dim, window, dtype, repeat):
    gen = torch.Generator().manual_seed(0)
    shape = (n, size, size, dim)
    q, k, v = (torch.randn(shape, generator=gen, dtype=dtype).requires_grad_() for _ in range(3))
    times = []
    for _ in range(repeat + 1):
        t0 = time.perf_counter()
        out, _ = neighborhood_attention(q * dim ** -0.5, k, v, window, backend=backend)
        out.square().sum().backward()
        times.append(time.perf_counter() - t0)
        q.grad = k.grad = v.grad = None
    return min(times[1:])


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[16, 32, 64, 96])
    p.add_argument("--batch", type=int, default=4, help="batch x heads")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--window", type=int, default=7)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    dtype = getattr(torch, args.dtype)
    backends = ["torch"] + (["cython"] if neighborhood._na_ext is not None else [])
    print(f"window={args.window} dim={args.dim} batch={args.batch} dtype={args.dtype} "
          f"threads={torch.get_num_threads()}")
    print(f"{'size':>6}" + "".join(f"{b + ' (ms)':>14}" for b in backends) + f"{'speedup':>10}")
    for size in args.sizes:
        ms = [1e3 * bench(b, args.batch, size, args.dim, args.window, dtype, args.repeat) for b in backends]
        speed = f"{ms[0] / ms[1]:.2f}x" if len(ms) == 2 else "-"
        print(f"{size:>6}" + "".join(f"{m:>14.2f}" for m in ms) + f"{speed:>10}")


if __name__ == "__main__":
    main()
