"""Time the compiled and numpy kernels, plus one whole deconvolution stage.

    python3 benchmarks/bench_kernels.py [--voxels N] [--frames T] [--repeat R]
"""
import argparse
import time

import numpy as np

from perfmap import kernels
from perfmap.aif import gamma_variate
from perfmap.bolus_ctc import TimeSeries
from perfmap.deconvolution import (
    DeconvConfig,
    SvdFactors,
    _coefficients,
    _grid_ranks,
    _pad,
    build_system,
    deconvolve_curves,
)


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def problem(n_vox, n_frames, seed=0):
    rng = np.random.default_rng(seed)
    dt = 1.0
    aif = TimeSeries(gamma_variate(np.arange(n_frames) * dt, 10.0, -1.0, 3.0, 1.5), dt)
    system = build_system(aif, "osvd")
    factors = SvdFactors.of(system)
    k = 0.02 * np.exp(-np.arange(n_frames) / rng.uniform(2, 8, (n_vox, 1)))
    padded = np.zeros((n_vox, system.size))
    padded[:, :n_frames] = k
    curves = (padded @ system.matrix.T)[:, :n_frames]
    curves += rng.normal(0, 0.05 * curves.max(), curves.shape)
    return curves, factors


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--voxels", type=int, default=20000)
    p.add_argument("--frames", type=int, default=45)
    p.add_argument("--repeat", type=int, default=7)
    args = p.parse_args(argv)

    curves, factors = problem(args.voxels, args.frames)
    cfg = DeconvConfig(method="osvd")
    # kernel inputs exactly as deconvolve_curves builds them
    coef = _coefficients(factors, _pad(curves, factors.size))
    ranks = _grid_ranks(factors.s, cfg.lambda_grid)
    basis = factors.vt.T[: args.frames]

    print(f"{args.voxels} voxels x {args.frames} frames, best of {args.repeat}")
    base = None
    backends = kernels.available_backends()
    for name in sorted(backends, key=lambda b: b != "python"):
        mod = backends[name]
        t_oi = best_of(lambda: mod.oscillation_index_rows(curves), args.repeat)
        t_sel = best_of(lambda: mod.osvd_select(coef, basis, ranks, cfg.oi_threshold), args.repeat)
        # threshold 0: no voxel converges, every one walks the whole grid
        t_worst = best_of(lambda: mod.osvd_select(coef, basis, ranks, 0.0), args.repeat)
        base = base or (t_sel, t_worst)
        print(f"  {name:7s} oscillation_index_rows {t_oi * 1e3:7.2f} ms | osvd_select "
              f"{t_sel * 1e3:7.2f} ms (x{base[0] / t_sel:.1f}), full grid {t_worst * 1e3:7.2f} ms "
              f"(x{base[1] / t_worst:.1f})")
    t_all = best_of(lambda: deconvolve_curves(curves, factors, cfg), args.repeat)
    print(f"  deconvolve_curves (osvd, active backend {kernels.BACKEND}) {t_all * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
