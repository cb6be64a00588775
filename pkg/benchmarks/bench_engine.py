"""Compare the compiled and pure-Python graph sweep kernels.

Replays representative training graphs (a physics head loss and a
kernel-NLL filter graph) through both backends and reports per-sweep
timings. The backends are required to be bit-identical, so this is
purely a speed comparison.

Run:  python benchmarks/bench_engine.py
"""

import time

import numpy as np

from dualcast import nn, pinn, kernels
from dualcast.engine import _kernels_py

try:
    from dualcast.engine import _kernels_c
except ImportError:
    _kernels_c = None


def build_pinn_graph():
    rng = np.random.default_rng(0)
    tableau = pinn.gauss_legendre_tableau(10)
    net = nn.MLP((1, 48, 96, 48, 11), rng)
    head = pinn.CstrHead(net, dt=1.0, params=pinn.CstrParams(),
                         tableau=tableau)
    x = rng.uniform(1.8, 2.2, 15)[:, None]
    batch = pinn.SnapshotBatch(x, rng.uniform(0.4, 1.0, 15),
                               rng.uniform(0.4, 1.0, 15))
    compiled = pinn.compile_loss(head, batch)
    return compiled.tape, compiled.loss.i


def build_kernel_nll_graph():
    rng = np.random.default_rng(1)
    ys = 2.0 + 0.1 * np.sin(np.arange(2000) * 0.02) \
        + 0.01 * rng.standard_normal(2000)
    tape, loss, _, idx = kernels.nll_graph(kernels.KernelKind.MATERN32,
                                           ys, None, 1.0)
    p = kernels.initial_params(ys, 1.0)
    tape.set_values(idx, p.as_log_vector())
    return tape, loss.i


def time_backend(kernel_mod, tape, out, repeats):
    n = tape.n
    args = (tape._op[:n], tape._p1[:n], tape._p2[:n], tape._aux[:n])
    val = tape._val[:n].copy()
    grad = np.zeros(n)
    kernel_mod.forward(*args, val, n)  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        kernel_mod.forward(*args, val, n)
        grad[:] = 0.0
        kernel_mod.backward(*args, val, grad, out)
    return (time.perf_counter() - t0) / repeats


def main():
    cases = [("pinn loss (15 pts, q=10)", *build_pinn_graph(), 50, 3),
             ("matern NLL (T=2000)", *build_kernel_nll_graph(), 20, 2)]
    print(f"{'graph':<28}{'nodes':>10}{'compiled':>12}{'python':>12}"
          f"{'speedup':>9}")
    for name, tape, out, rep_c, rep_py in cases:
        t_py = time_backend(_kernels_py, tape, out, rep_py)
        if _kernels_c is not None:
            t_c = time_backend(_kernels_c, tape, out, rep_c)
            ratio = f"{t_py / t_c:8.0f}x"
            t_c_str = f"{t_c * 1e3:9.2f} ms"
        else:
            ratio = "     n/a"
            t_c_str = "   missing"
        print(f"{name:<28}{tape.n:>10}{t_c_str:>12}"
              f"{t_py * 1e3:>9.2f} ms{ratio:>9}")


if __name__ == "__main__":
    main()
