"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--batch 32] [--length 100] [--repeat 20]
"""

import argparse
import time

import numpy as np

from driftselect import kernels, nn
from driftselect.model import HstuHyper, HstuModel, SequenceChunk


def make_chunks(rng, batch, length, vocab, users):
    out = []
    for i in range(batch):
        ts = np.sort(rng.integers(0, 30 * 86400, length))
        out.append(SequenceChunk(int(rng.integers(users)), rng.integers(0, vocab, length),
                                 rng.integers(0, 4, length), rng.integers(0, 4, length), ts,
                                 chunk_id=(i, 0, length)))
    return out


def bench(fn, repeat):
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--length", type=int, default=100)
    ap.add_argument("--d", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    hyper = HstuHyper(d=args.d, depth=2, max_len=args.length)
    model = HstuModel.init(hyper, 2000, 200, seed=0)
    batch = nn.make_batch(make_chunks(rng, args.batch, args.length, 2000, 200), args.length)
    negs = nn.draw_negatives(np.random.default_rng(1), batch.items, model.vocab, 64)

    B, N, d = args.batch, args.length + 1, args.d
    Q, K, V = (rng.standard_normal((B, N, d)) for _ in range(3))
    rp, rt = rng.standard_normal(N), rng.standard_normal(32)

    results = {}
    for be in kernels.available_backends():
        kernels.use_backend(be)
        Y, S = kernels.attention_forward(Q, K, V, rp, rt, batch.time_bucket)
        results[be] = {
            "attention fwd": bench(lambda: kernels.attention_forward(Q, K, V, rp, rt, batch.time_bucket), args.repeat),
            "attention bwd": bench(lambda: kernels.attention_backward(Y, Q, K, V, S, batch.time_bucket, N, 32),
                                   args.repeat),
            "train step": bench(lambda: nn.loss_and_grad(batch, model, negatives=negs), args.repeat),
        }
    names = list(next(iter(results.values())))
    print(f"{'kernel':16s}" + "".join(f"{be:>12s}" for be in results) + ("     speedup" if len(results) > 1 else ""))
    for n in names:
        row = [results[be][n] * 1e3 for be in results]
        line = f"{n:16s}" + "".join(f"{x:10.2f}ms" for x in row)
        if len(row) > 1:
            line += f"{row[0] / row[1]:11.2f}x"
        print(line)
    if len(results) == 1:
        print("compiled extension not built; only the NumPy backend was timed")


if __name__ == "__main__":
    main()
