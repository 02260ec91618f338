"""Time the im2col/col2im kernels and a full ToyRx gradient under both backends.

    python3 benchmarks/bench_kernels.py [--batch 8] [--repeat 5]

The backend is re-read from the environment on every kernel call, so one process
can time both paths by toggling ``IFRX_BACKEND``.
"""

from __future__ import annotations

import argparse
import os
import timeit

import numpy as np

from ifrx import kernels
from ifrx._accel import HAVE_NUMBA
from ifrx.linkgen import LinkConfig, generate_dataset
from ifrx.receiver import ToyRx


def _time(fn, repeat: int) -> float:
    fn()  # warm-up (and numba compilation)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    link = LinkConfig()
    model = ToyRx()
    ds = generate_dataset(link, 0, args.batch)
    theta = model.init_params(0)
    x = np.random.default_rng(0).standard_normal((args.batch, link.n_subcarriers, link.n_symbols, 16))
    cols = kernels.im2col(x, 3, 3)

    cases = {
        "im2col": lambda: kernels.im2col(x, 3, 3),
        "col2im": lambda: kernels.col2im(cols, x.shape, 3, 3),
        "grad": lambda: model.grad("bce", theta, ds),
        "hvp": lambda: model.hvp("bce", theta, ds, theta),
    }
    backends = ["numpy"] + (["numba"] if HAVE_NUMBA else [])
    results = {}
    saved = os.environ.get("IFRX_BACKEND")
    try:
        for be in backends:
            os.environ["IFRX_BACKEND"] = be
            results[be] = {name: _time(fn, args.repeat) for name, fn in cases.items()}
    finally:
        if saved is None:
            os.environ.pop("IFRX_BACKEND", None)
        else:
            os.environ["IFRX_BACKEND"] = saved

    print(f"batch={args.batch}  grid={link.n_subcarriers}x{link.n_symbols}  P={model.n_params}")
    print(f"{'kernel':<8}" + "".join(f"{be + ' ms':>12}" for be in backends) + ("   speedup" if len(backends) > 1 else ""))
    for name in cases:
        row = f"{name:<8}" + "".join(f"{results[be][name] * 1e3:12.2f}" for be in backends)
        if len(backends) > 1:
            row += f"{results['numpy'][name] / results['numba'][name]:9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
