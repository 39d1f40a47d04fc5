"""Compare the compiled and numpy convolution kernels.

Times each kernel on desk-sized inputs, then one forward+backward pass of the
desk model with each backend swapped in. Results are checked for agreement
before timing. Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import sys
import timeit
from contextlib import contextmanager

import numpy as np

from phydae.nn import kernels

_NAMES = ("im2col", "col2im", "dw_forward", "dw_backward_input", "dw_backward_weight")


@contextmanager
def use_backend(mod):
    saved = {n: getattr(kernels, n) for n in _NAMES}
    for n in _NAMES:
        setattr(kernels, n, getattr(mod, n))
    try:
        yield
    finally:
        for n, f in saved.items():
            setattr(kernels, n, f)


def kernel_cases(rng):
    n, h, w, c, k = 4, 64, 64, 16, 3
    xp = rng.normal(size=(n, h + k - 1, w + k - 1, c))
    w3 = rng.normal(size=(k, k, c))
    g = rng.normal(size=(n, h, w, c))
    cols = rng.normal(size=(n * h * w, k * k * c))
    return {
        "im2col": lambda m: m.im2col(xp, k, k, 1, h, w),
        "col2im": lambda m: m.col2im(cols, n, h + k - 1, w + k - 1, c, k, k, 1, h, w),
        "dw_forward": lambda m: m.dw_forward(xp, w3, 1, h, w),
        "dw_backward_input": lambda m: m.dw_backward_input(g, w3, h + k - 1, w + k - 1, 1),
        "dw_backward_weight": lambda m: m.dw_backward_weight(xp, g, k, k, 1),
    }


def model_step(rng):
    from phydae.pipeline import ModelConfig, PhyDAE
    model = PhyDAE(ModelConfig.desk(), seed=0)
    y = rng.uniform(size=(4, 64, 64, 3))

    def run(_mod):
        model.zero_grad()
        out = model.forward(y, k=2)
        out.restored.sum().backward()
        return out.restored.data
    return run


def bench(fn, repeat: int) -> float:
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", dest="json_out")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the numpy fallback is available", file=sys.stderr)
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    cases["model_fwd_bwd"] = model_step(rng)

    rows = {}
    for name, case in cases.items():
        ref = None
        times = {}
        for bname, mod in backends.items():
            with use_backend(mod):
                out = case(mod)
                if ref is None:
                    ref = out
                elif not np.allclose(out, ref, rtol=1e-10, atol=1e-10):
                    print(f"{name}: backends disagree", file=sys.stderr)
                    return 1
                times[bname] = bench(lambda: case(mod), args.repeat)
        rows[name] = times

    head = f"{'kernel':<20}" + "".join(f"{b:>12}" for b in backends) + (
        f"{'speedup':>10}" if "cython" in backends else "")
    print(head)
    for name, times in rows.items():
        line = f"{name:<20}" + "".join(f"{times[b] * 1e3:>10.2f}ms" for b in backends)
        if "cython" in times:
            line += f"{times['python'] / times['cython']:>9.2f}x"
        print(line)
    if args.json_out:
        with open(args.json_out, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
