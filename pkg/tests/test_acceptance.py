"""One test per acceptance criterion; each prints a single PASS/FAIL line."""

import math
import os
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from heaprecall.diagnostics import marginal_heaping_curve, mean_recall_curve, table3_fit
from heaprecall.imputation import heap_fractions, impute_latents, restricted_day_pmf
from heaprecall.io import RunConfig, load_dataset
from heaprecall.likelihood import MarginalLikelihood, QuadratureRule
from heaprecall.model import (
    ModelSpec, ObservationDay, SubjectRecord, Theta, coarsen, heaping_pmf, inverse_coarsen,
)
from heaprecall.seeding import stream
from heaprecall.simulation import SimulationDesign, generate_dataset, run_simulation_study

from oracles import mc_subject_loglik, spike_ratio

N_JOBS = os.cpu_count() or 1


def test_criterion_1_probability_checkpoints(case1, case2, criterion):
    checks = []
    for theta, w, want in ((case1[0], 22, (28.3, 66.3, 5.4, 0.04)),
                           (case1[0], 36, (7.8, 71.2, 20.8, 0.2)),
                           (case2[0], 22, (29.6, 62.3, 7.1, 1.0))):
        got = 100 * heaping_pmf(theta, w)
        checks += [(f"pmf w={w} g={g + 1}", got[g], want[g]) for g in range(4)]
    for theta, mode, want in ((case1[0], "conditional_b0", (23.2, 25.8)),
                              (case1[0], "marginal", (24.3, 27.0)),
                              (case2[0], "marginal", (20.5, 30.8))):
        curve = mean_recall_curve(theta, [20, 30], mode=mode)
        checks += [(f"{mode} x={x}", curve.at(x, "mean_recall"), v) for x, v in zip((20, 30), want)]
    worst = max(checks, key=lambda c: abs(c[1] - c[2]))
    ok = all(abs(got - want) <= 0.05 + 1e-9 for _, got, want in checks)
    criterion(1, ok, f"{len(checks)} checkpoints within 0.05; worst {worst[0]}: "
                     f"{worst[1]:.3f} vs {worst[2]}")


def test_criterion_2_coarsening_oracle(criterion):
    bad = [(w, g) for w in range(201) for g in range(1, 5)
           if (w, g) not in inverse_coarsen(coarsen(w, g))]
    # every member of each inverse set maps back to its report
    bad += [(y, w, g) for y in range(201) for w, g in inverse_coarsen(y) if coarsen(w, g) != y]
    wg5 = {(int(w), int(g)) for w, g in inverse_coarsen(5)}
    listed = {(5, 1), (3, 2), (4, 2), (5, 2), (6, 2), (7, 2)}
    criterion(2, not bad and wg5 == listed,
              f"{201 * 4} (w, g) pairs round-trip, {len(bad)} mismatches; WG(5) = {sorted(wg5)}")


def test_criterion_3_quadrature_against_monte_carlo(case1, case2, criterion):
    worst_z, worst_rel = 0.0, 0.0
    for k, (theta, design) in enumerate((case1, case2)):
        data = generate_dataset(theta, SimulationDesign(n_subjects=20), stream(k, "c3"))
        lik = MarginalLikelihood(data.subjects, design.spec)
        ll = lik.subject_logliks(theta)
        rng = stream(k, "c3-mc")
        for i, s in enumerate(data.subjects):
            mc, se = mc_subject_loglik(theta, s, 1_000_000, np.random.default_rng(rng.spawn(1)[0]))
            worst_z = max(worst_z, abs(ll[i] - mc) / se)
        big = generate_dataset(theta, design, stream(k, "c3-nodes")).subjects
        l20 = MarginalLikelihood(big, design.spec)(theta)
        l40 = MarginalLikelihood(big, design.spec, QuadratureRule.gauss_hermite(40))(theta)
        worst_rel = max(worst_rel, abs(l20 - l40) / abs(l40))
    criterion(3, worst_z < 3 and worst_rel < 1e-6,
              f"40 subjects, max |quad - MC| = {worst_z:.2f} MC SE (< 3); "
              f"20 vs 40 nodes rel diff {worst_rel:.1e} (< 1e-6)")


def test_criterion_4_visit_day_rounding(criterion):
    theta, _ = table3_fit()
    non = marginal_heaping_curve(theta, [41], visit=False)
    vis = marginal_heaping_curve(theta, [41], visit=True)
    got = (non.at(41, "p_heaped"), vis.at(41, "p_heaped"), vis.at(41, "p_round5"))
    want = (0.84, 0.51, 0.39)
    ok = all(abs(g - w) <= 0.02 for g, w in zip(got, want))
    criterion(4, ok, "w=41 P(heaped) nonvisit {:.4f}, visit {:.4f}; visit P(round5) {:.4f}; "
                     "targets 0.84/0.51/0.39 +-0.02".format(*got))


def _mc_exact_multinomial(counts, probs, n_null, rng):
    """Monte Carlo p-value of the exact multinomial test (likelihood ordering)."""
    counts = np.asarray(counts)
    obs = stats.multinomial.logpmf(counts, counts.sum(), probs)
    null = rng.multinomial(counts.sum(), probs, size=n_null)
    null_lp = stats.multinomial.logpmf(null, counts.sum(), probs)
    return (1 + np.sum(null_lp <= obs + 1e-9)) / (n_null + 1)


def test_criterion_5_imputation_conditional_law(case1, criterion):
    theta = case1[0]
    b, u = 0.1, -0.5
    n = 100_000
    subject = SubjectRecord("s", tuple(ObservationDay(t + 1, 20, 20) for t in range(n)))
    run = impute_latents([theta], [subject], b=b, u=u, seed=5)
    (imp,) = run.imputations
    oracle = restricted_day_pmf(theta, 20, 20.0, b, u)
    cells = sorted(oracle)
    index = {c: j for j, c in enumerate(cells)}
    counts = np.zeros(len(cells), dtype=np.int64)
    for w, g in zip(imp.w.tolist(), imp.g.tolist()):
        counts[index[(w, g)]] += 1
    probs = np.array([oracle[c] for c in cells])
    p_exact = _mc_exact_multinomial(counts, probs, 20_000, np.random.default_rng(1))
    criterion(5, p_exact > 0.01,
              f"{n} draws over {len(cells)} (w, g) cells; exact multinomial p = {p_exact:.3f} "
              f"(> 0.01)")


def test_criterion_6_posterior_predictive_smoothness(case1, criterion):
    from heaprecall.cli import fit_dataset

    theta, design = case1
    data = generate_dataset(theta, design, stream(3, "c6"))
    payload, _ = fit_dataset(data.subjects, RunConfig(), seed=3)
    draws = [Theta.from_vector(v) for v in payload["sir_draws"][:20]]
    # the stated procedure: subject effects from their prior
    run = impute_latents(draws, data.subjects, seed=3, mode="prior")
    w = np.concatenate([imp.w for imp in run.imputations])
    y_frac = heap_fractions(data.y.ravel(), 5)
    w_frac = heap_fractions(w, 5)
    spike = spike_ratio(w)
    ok = y_frac > 0.5 and 0.18 <= w_frac <= 0.30 and spike < 1.5
    criterion(6, ok, f"y base-5 fraction {y_frac:.3f} (> 0.5); imputed w {w_frac:.3f} in "
                     f"[0.18, 0.30]; multiple-of-5 to neighbour ratio {spike:.2f} (< 1.5); "
                     f"{len(run.failures)} of {20 * 100} subject imputations hit the cap")


def _study_checks(report, case):
    lines, ok = [], True
    if case == "case2":
        for r in report.rows:
            z = abs(r.mean - r.true) / r.sem if r.sem > 0 else math.inf
            ok &= z <= 3
        worst = max(report.rows, key=lambda r: abs(r.mean - r.true) / r.sem)
        b1 = report.row("beta1").coverage
        g0 = abs(report.row("gamma0").bias)
        ok &= 86 <= b1 <= 100 and g0 < 0.01
        lines.append(f"case2 worst |bias|/SEM {worst.name} "
                     f"{abs(worst.mean - worst.true) / worst.sem:.2f} (<= 3), beta1 coverage "
                     f"{b1:.0f}% in [86, 100], |gamma0 bias| {g0:.4f} (< 0.01)")
    else:
        rel = {n: abs(report.row(n).bias) / abs(report.row(n).true)
               for n in ("beta0", "beta1", "sigma_b")}
        ok &= all(v < 0.01 for v in rel.values())
        lines.append("case1 relative bias " + ", ".join(f"{n} {100 * v:.2f}%" for n, v in rel.items())
                     + " (< 1%)")
    return ok, "; ".join(lines)


def test_criterion_7_simulation_study(case1, case2, criterion):
    r2 = run_simulation_study(case2[0], case2[1], 50, seed=2024, n_jobs=N_JOBS)
    r1 = run_simulation_study(case1[0], case1[1], 30, seed=2024, n_jobs=N_JOBS)
    ok2, d2 = _study_checks(r2, "case2")
    ok1, d1 = _study_checks(r1, "case1")
    print(r2.table())
    print(r1.table())
    criterion(7, ok1 and ok2, f"{d2}; {d1}; failed replicates {r2.n_failed}+{r1.n_failed}")


@pytest.mark.slow
def test_criterion_7_full_table(case1, case2, criterion):
    r2 = run_simulation_study(case2[0], case2[1], 100, seed=2025, n_jobs=N_JOBS)
    r1 = run_simulation_study(case1[0], case1[1], 100, seed=2025, n_jobs=N_JOBS)
    ok2, d2 = _study_checks(r2, "case2")
    ok1, d1 = _study_checks(r1, "case1")
    criterion("7 (100 replicates)", ok1 and ok2, f"{d2}; {d1}")


@pytest.mark.slow
def test_criterion_8_bootstrap_coverage(case1, criterion):
    rep = run_simulation_study(case1[0], case1[1], 30, ci_method="bootstrap", bootstrap_B=100,
                               seed=2026, n_jobs=N_JOBS)
    cov = rep.row("gamma3").coverage
    criterion(8, cov >= 82, f"case1 gamma3 bootstrap coverage {cov:.0f}% over 30 replicates (>= 82)")


def test_criterion_9_study_data(criterion):
    path = os.environ.get("HEAPRECALL_STUDY_CSV")
    if not path:
        criterion(9, None, "needs the original study data; set HEAPRECALL_STUDY_CSV to a CSV "
                           "in the documented layout to run the sign-pattern check")
    from heaprecall.estimation import find_posterior_mode

    spec = ModelSpec(visit_effect=True)
    subjects = load_dataset(Path(path), spec)
    res = find_posterior_mode(subjects, spec)
    th = res.theta_hat
    ci = res.wald_intervals(0.95)
    names = Theta.names(spec)
    lo = dict(zip(names, ci[:, 0]))
    hi = dict(zip(names, ci[:, 1]))
    ok = th.beta1 > 0 and lo["beta1"] > 0 and th.beta3[-1] < 0 and hi[names[-2]] < 0 \
        and th.sigma_u2 > 5 * th.sigma_b2
    criterion(9, ok, f"beta1 {th.beta1:.3f}, visit {th.beta3[-1]:.3f}, "
                     f"sigma_u^2 {th.sigma_u2:.2f} vs sigma_b^2 {th.sigma_b2:.3f}")
