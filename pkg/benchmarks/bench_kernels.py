"""Time the compiled and pure-Python propagation kernels on the two-node gate.

    python3 benchmarks/bench_kernels.py --t-final 5 --repeat 3
"""

import argparse
import time

import numpy as np

from qlinksim import _core
from qlinksim.cqed import GateLayout, PhysicalParams, build_generator, build_jump_channels, sech_schedule, system_space
from qlinksim.linalg import product_state
from qlinksim.mcwf import IntegratorConfig, TrajectorySampler


def setup(n_max):
    p = PhysicalParams(kappa_loss_1=1.0, kappa_loss_2=1.0)
    pulses = sech_schedule(30.0, 22.68, 0.5, 1.0)
    space = system_space(n_max)
    layout = GateLayout("atom1", "atom2")
    gen = build_generator(p, pulses, layout, space)
    jumps = build_jump_channels(p, layout, space, pulses)
    psi = product_state(space, {"atom1": {"g": 0.6, "e": 0.8}, "atomb": "g", "atom2": "R", "atoma": "R",
                                "cav1": "0", "cav2": "0"})
    return gen, jumps, psi


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--t-final", type=float, default=5.0)
    ap.add_argument("--dt", type=float, default=1e-3)
    ap.add_argument("--n-max", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    gen, jumps, psi = setup(args.n_max)
    cfg = IntegratorConfig(dt=args.dt, t_final=args.t_final, sample_stride=1000)
    results = {}
    finals = {}
    for name, kernel in (("compiled", _core.kernel), ("python", _core.python_kernel)):
        sampler = TrajectorySampler(gen, jumps, cfg, kernel=kernel)
        times = []
        for r in range(args.repeat):
            t0 = time.perf_counter()
            final, _ = sampler.run(psi, seed=r)
            times.append(time.perf_counter() - t0)
        results[name] = min(times)
        finals[name] = final.amplitudes
    steps = int(round(args.t_final / args.dt))
    print(f"active backend: {_core.BACKEND}; dim {psi.space.total_dim}; {steps} RK4 steps per run")
    for name, t in results.items():
        print(f"{name:>9}: {t:8.3f} s  ({1e6 * t / steps:7.1f} us/step)")
    print(f"speedup: {results['python'] / results['compiled']:.1f}x")
    print(f"max |difference| of final states: {np.abs(finals['compiled'] - finals['python']).max():.2e}")


if __name__ == "__main__":
    main()
