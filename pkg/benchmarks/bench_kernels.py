"""Compare the compiled and numpy convolution kernels.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times im2col/col2im on the detector's layer shapes, then one full
forward+backward pass on a batch of 16, once per backend.
"""
import argparse
import timeit

import numpy as np

from advshift import kernels
from advshift.detector import DetectorConfig, backward, batch_loss, forward_batch, init_params, BoxLabel

# (padded input side, channels, stride, output side) for each F1 conv
LAYERS = [(66, 3, 2, 32), (34, 8, 2, 16), (18, 16, 2, 8), (10, 32, 1, 8)]


def _kernel_cases(batch=16):
    rng = np.random.default_rng(0)
    for hp, c, s, ho in LAYERS:
        xp = rng.normal(size=(batch, hp, hp, c))
        dcols = rng.normal(size=(batch, ho, ho, 3, 3, c))
        yield f"{hp}x{hp}x{c}/s{s}", xp, dcols, s, ho, hp


def _train_step(params, x, labels):
    _, raw, cache = forward_batch(params, x)
    _, g = batch_loss(raw, labels, params.config)
    backward(params, cache, g, need_input=True)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the numpy fallback is available")

    results = {}
    for name in backends:
        kernels.set_backend(name)
        for label, xp, dcols, s, ho, hp in _kernel_cases():
            t_i = min(timeit.repeat(lambda: kernels.im2col(xp, 3, s, ho, ho), number=20, repeat=args.repeat)) / 20
            t_c = min(timeit.repeat(lambda: kernels.col2im(dcols, s, hp, hp), number=20, repeat=args.repeat)) / 20
            results[(name, "im2col " + label)] = t_i
            results[(name, "col2im " + label)] = t_c
        cfg = DetectorConfig()
        params = init_params(cfg, 0)
        rng = np.random.default_rng(1)
        x = rng.random((16, 64, 64, 3))
        labels = [[BoxLabel(i % 3, 0.5, 0.5, 0.3, 0.3)] for i in range(16)]
        t = min(timeit.repeat(lambda: _train_step(params, x, labels), number=3, repeat=args.repeat)) / 3
        results[(name, "forward+backward batch16")] = t

    rows = sorted({k[1] for k in results}, key=lambda r: (not r.startswith("im2col"), r))
    head = f"{'case':34s}" + "".join(f"{b:>12s}" for b in backends)
    if len(backends) == 2:
        head += f"{'speedup':>10s}"
    print(head)
    for r in rows:
        line = f"{r:34s}" + "".join(f"{results[(b, r)] * 1e3:10.3f}ms" for b in backends)
        if len(backends) == 2:
            line += f"{results[('python', r)] / results[('cython', r)]:9.2f}x"
        print(line)
    kernels.set_backend(backends[0])


if __name__ == "__main__":
    main()
