"""Time the embedding-bag kernels on both backends and check they agree.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--dim 32]
"""
import argparse
import time

import numpy as np

from xlst import kernels
from xlst.model import bag_weights


def _time(fn, repeat):
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--vocab", type=int, default=410)
    ap.add_argument("--seq-len", type=int, default=16)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled kernels not built; only the python backend is timed")
    rng = np.random.default_rng(0)
    emb = rng.standard_normal((args.vocab, args.dim))
    print(f"{'batch':>6} {'op':>9} " + " ".join(f"{b + ' ms':>12}" for b in backends)
          + f" {'speedup':>8} {'equal':>6}")
    for batch in (32, 256, 2000):
        ids = rng.integers(3, args.vocab, size=(batch, args.seq_len))
        ids[:, args.seq_len // 2:] *= rng.random((batch, args.seq_len - args.seq_len // 2)) < 0.7
        weights = bag_weights(ids)
        grad = rng.standard_normal((batch, args.dim))
        ops = {
            "forward": lambda: kernels.bag_forward(emb, ids, weights),
            "backward": lambda: kernels.bag_backward(grad, ids, weights, args.vocab),
        }
        for name, op in ops.items():
            times, outs = [], []
            for b in backends:
                kernels.use_backend(b)
                times.append(_time(op, args.repeat))
                outs.append(op())
            same = all(np.array_equal(outs[0], o) for o in outs[1:])
            speed = times[-1] / times[0] if len(times) > 1 else 1.0
            print(f"{batch:>6} {name:>9} " + " ".join(f"{1e3 * t:>12.3f}" for t in times)
                  + f" {speed:>7.1f}x {str(same):>6}")
    kernels.use_backend(backends[0])


if __name__ == "__main__":
    main()
