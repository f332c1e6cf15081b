"""Compare the compiled and numpy convolution kernels.

Times im2col / col2im on shapes the toy model actually hits, plus one full
training step, under each available backend. Run with::

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import timeit

import numpy as np

from cloudadapt import kernels
from cloudadapt import tensor as T
from cloudadapt.config import ExperimentConfig
from cloudadapt.model import CloudAdapterNet
from cloudadapt.training import AdamW, cross_entropy_loss

# (N, C, H, W, k, stride, pad): full-size 3x3, first downsampling block, a deep block
SHAPES = [
    (4, 32, 64, 64, 3, 1, 1),
    (4, 32, 64, 64, 3, 2, 1),
    (4, 64, 16, 16, 3, 2, 1),
]


def bench_kernel(shape, repeats):
    n, c, h, w, k, s, p = shape
    x = np.random.default_rng(0).standard_normal((n, c, h, w)).astype(np.float32)
    cols = kernels.im2col(x, k, k, s, p)
    t_fwd = min(timeit.repeat(lambda: kernels.im2col(x, k, k, s, p), number=1, repeat=repeats))
    t_bwd = min(timeit.repeat(lambda: kernels.col2im(cols, x.shape, k, k, s, p), number=1, repeat=repeats))
    return t_fwd, t_bwd


def bench_step(repeats):
    cfg = ExperimentConfig.from_dict({"backbone": {"preset": "toy"}}).validate()
    model = CloudAdapterNet(cfg.model, 42)
    opt = AdamW(model.trainable_named())
    rng = np.random.default_rng(0)
    x = rng.random((4, 3, 64, 64)).astype(np.float32)
    y = rng.integers(0, 4, (4, 64, 64))

    def step():
        opt.zero_grad()
        loss = cross_entropy_loss(model.forward(T.Tensor(x)), y)
        loss.backward()
        opt.step(1e-4)

    step()
    return min(timeit.repeat(step, number=1, repeat=repeats))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    results = {}
    for name in kernels.available_backends():
        kernels.use_backend(name)
        results[name] = ([bench_kernel(s, args.repeats) for s in SHAPES], bench_step(max(1, args.repeats // 2)))
    print(f"{'shape':<28}" + "".join(f"{b + ' im2col':>16}{b + ' col2im':>16}" for b in results))
    for i, shape in enumerate(SHAPES):
        row = f"{str(shape):<28}"
        for name in results:
            f, b = results[name][0][i]
            row += f"{f * 1e3:>13.2f} ms{b * 1e3:>13.2f} ms"
        print(row)
    print(f"{'train step (toy, batch 4)':<28}" + "".join(f"{results[n][1]:>30.3f} s  " for n in results))
    if "cython" in results and "numpy" in results:
        for i, shape in enumerate(SHAPES):
            (cf, cb), (nf, nb) = results["cython"][0][i], results["numpy"][0][i]
            print(f"speedup {shape}: im2col x{nf / cf:.2f}, col2im x{nb / cb:.2f}")


if __name__ == "__main__":
    main()
