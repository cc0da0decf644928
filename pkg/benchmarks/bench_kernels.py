"""Compare the numba kernels with their pure-numpy fallbacks.

Run: python3 benchmarks/bench_kernels.py --subjects 100 --days 12 --repeats 3
"""
import argparse
import time

import numpy as np

from heaprecall.kernels import jit, pure
from heaprecall.likelihood import MarginalLikelihood
from heaprecall.seeding import int_seeds, stream
from heaprecall.simulation import SCENARIOS, SimulationDesign, generate_dataset


def timed(func, args, repeats):
    best = float("inf")
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = func(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--scenario", default="case1", choices=sorted(SCENARIOS))
    p.add_argument("--subjects", type=int, default=100)
    p.add_argument("--days", type=int, default=12)
    p.add_argument("--nodes", type=int, default=20)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    theta, _ = SCENARIOS[args.scenario]()
    design = SimulationDesign(args.subjects, args.days)
    data = generate_dataset(theta, design, stream(args.seed, "bench"))
    lik = MarginalLikelihood(data.subjects, design.spec)
    lik_args = lik._args(theta)
    z, logw = lik._z, lik._logw
    d = lik.data
    mu, eta = d.offsets(theta)
    seeds = int_seeds(stream(args.seed, "bench-impute"), d.n_subjects)
    nan = np.full(d.n_subjects, np.nan)
    imp_args = (np.ascontiguousarray(d.recall_base(theta)), theta.beta1, np.log(d.x), eta, d.y,
                d.starts, theta.gamma1, theta.gamma2, theta.gamma3, theta.gamma0,
                theta.sigma_b, theta.sigma_u, seeds, 1_000_000, nan, nan, np.zeros(0))

    # compile outside the timings
    jit.subject_logliks(*lik_args, z, logw, 2)
    jit.impute(*imp_args)

    print(f"{args.subjects} subjects x {args.days} days, {args.nodes} nodes, best of {args.repeats}")
    print(f"{'kernel':<28}{'numba s':>10}{'numpy s':>10}{'speedup':>9}{'max |diff|':>12}")
    for name, code in (("loglik plain", 0), ("loglik adaptive", 1), ("loglik profile", 2)):
        t_nb, a = timed(jit.subject_logliks, (*lik_args, z, logw, code), args.repeats)
        t_np, b = timed(pure.subject_logliks, (*lik_args, z, logw, code), args.repeats)
        print(f"{name:<28}{t_nb:>10.4f}{t_np:>10.4f}{t_np / t_nb:>9.1f}{np.max(np.abs(a - b)):>12.2e}")
    t_nb, _ = timed(jit.subject_modes, lik_args, args.repeats)
    t_np, _ = timed(pure.subject_modes, lik_args, args.repeats)
    print(f"{'subject modes':<28}{t_nb:>10.4f}{t_np:>10.4f}{t_np / t_nb:>9.1f}{'':>12}")
    # the two backends use different generators, so draws are not compared
    t_nb, _ = timed(jit.impute, imp_args, args.repeats)
    t_np, _ = timed(pure.impute, imp_args, args.repeats)
    print(f"{'impute (prior mode)':<28}{t_nb:>10.4f}{t_np:>10.4f}{t_np / t_nb:>9.1f}{'':>12}")


if __name__ == "__main__":
    main()
