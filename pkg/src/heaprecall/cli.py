"""Command-line entry point: ``heaprecall <command> [options]``.

Every option can also come from ``--config FILE`` (a JSON object keyed by
option name, or any artifact written by this tool); explicit flags win.
Exit codes: 0 success, 1 invalid input, 2 numerical failure, 3 finished
with warnings (e.g. optimizer not converged).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .io import DataError, RunConfig, load_config, load_dataset, provenance, write_dataset, write_json
from .likelihood import LikelihoodError
from .model import ModelSpec, Theta

log = logging.getLogger("heaprecall")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_WARN = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _csv_list(text):
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _model_options(p):
    g = p.add_argument_group("model")
    g.add_argument("--recall-covariates", dest="recall_covariates", type=_csv_list)
    g.add_argument("--heaping-covariates", dest="heaping_covariates", type=_csv_list)
    g.add_argument("--visit-effect", dest="visit_effect", action="store_true", default=None)
    g.add_argument("--nodes", dest="quadrature_nodes", type=int)
    g.add_argument("--quadrature", choices=("profile", "adaptive", "plain"))


def _common(p):
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="cap on worker threads and processes")
    p.add_argument("--out", help="output path")
    p.add_argument("-v", "--verbose", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="heaprecall", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"heaprecall {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="draw a synthetic dataset")
    _common(p)
    p.add_argument("--scenario", choices=("case1", "case2"))
    p.add_argument("--theta", help="JSON file with a parameter set (overrides --scenario)")
    p.add_argument("--subjects", type=int)
    p.add_argument("--days", type=int)
    p.add_argument("--visit-days", dest="visit_days", type=_csv_list)
    p.add_argument("--ema-mean", dest="ema_mean", type=float)
    p.add_argument("--ema-dispersion", dest="ema_dispersion", type=float)
    p.add_argument("--latent-out", dest="latent_out", help="CSV for the latent w, g, b, u")

    p = sub.add_parser("fit", help="posterior mode, information and SIR summaries")
    _common(p)
    _model_options(p)
    p.add_argument("--data")
    p.add_argument("--no-prior", dest="use_prior", action="store_false", default=None)
    p.add_argument("--independence", action="store_true", default=None,
                   help="fit without random effects")
    p.add_argument("--proposals", type=int)
    p.add_argument("--resample", type=int)
    p.add_argument("--df", type=float)
    p.add_argument("--max-iter", dest="max_iter", type=int)

    for name, text in (("impute", "impute latent w, g, b, u"),
                       ("check", "heap-fraction check of observed y against imputed w")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--data")
        p.add_argument("--fit", help="fit artifact supplying theta draws and the model")
        p.add_argument("--draws", type=int, help="number of SIR draws to use")
        p.add_argument("--mode", choices=("prior", "joint"))
        p.add_argument("--max-rejects", dest="max_rejects", type=int)

    p = sub.add_parser("predict", help="impute true counts from reported counts")
    _common(p)
    p.add_argument("--data", help="dataset; ema_count may be absent or empty")
    p.add_argument("--fit")
    p.add_argument("--theta")
    p.add_argument("--x-family", dest="x_family", choices=("point", "poisson", "negbin", "empirical"))
    p.add_argument("--x-value", dest="x_value", type=int)
    p.add_argument("--x-mean", dest="x_mean", type=float)
    p.add_argument("--x-dispersion", dest="x_dispersion", type=float)
    p.add_argument("--x-sample", dest="x_sample", help="dataset whose ema_count forms the pmf")
    p.add_argument("--imputations", type=int)
    p.add_argument("--max-rejects", dest="max_rejects", type=int)

    p = sub.add_parser("curves", help="mean-recall or rounding-probability curves")
    _common(p)
    p.add_argument("--kind", choices=("heaping", "recall"))
    p.add_argument("--preset", choices=("table3", "table4"))
    p.add_argument("--fit")
    p.add_argument("--theta")
    p.add_argument("--visit", action="store_true", default=None)
    p.add_argument("--conditional", action="store_true", default=None,
                   help="fix the subject effect at 0 instead of averaging over it")
    p.add_argument("--max-count", dest="max_count", type=int)
    p.add_argument("--z", type=float, nargs="*", help="covariate values held fixed")

    p = sub.add_parser("simstudy", help="replicate simulation study")
    _common(p)
    p.add_argument("--scenario", choices=("case1", "case2"))
    p.add_argument("--replicates", type=int)
    p.add_argument("--ci", choices=("hessian", "bootstrap"))
    p.add_argument("--bootstrap-b", dest="bootstrap_b", type=int)
    p.add_argument("--subjects", type=int)
    p.add_argument("--days", type=int)
    p.add_argument("--table", help="also write the text table here")
    return parser


DEFAULTS = {
    "simulate": dict(seed=0, scenario="case1", theta=None, subjects=100, days=12, visit_days=[],
                     ema_mean=22.0, ema_dispersion=5.0, latent_out=None, out=None),
    "fit": dict(data=None, out=None, **RunConfig().to_dict()),
    "impute": dict(seed=0, data=None, fit=None, draws=20, mode="prior", max_rejects=1_000_000,
                   out=None),
    "check": dict(seed=0, data=None, fit=None, draws=20, mode="prior", max_rejects=1_000_000,
                  out=None),
    "predict": dict(seed=0, data=None, fit=None, theta=None, x_family="negbin", x_value=20,
                    x_mean=22.0, x_dispersion=5.0, x_sample=None, imputations=20,
                    max_rejects=1_000_000, out=None),
    "curves": dict(seed=0, kind="heaping", preset="table3", fit=None, theta=None, visit=False,
                   conditional=False, max_count=60, z=[], out=None),
    "simstudy": dict(seed=0, scenario="case2", replicates=5, ci="hessian", bootstrap_b=100,
                     subjects=100, days=12, table=None, out=None),
}
REQUIRED = {"fit": ("data", "out"), "impute": ("data", "fit", "out"), "check": ("data", "fit"),
            "predict": ("data", "out"), "simulate": ("out",), "curves": ("out",),
            "simstudy": ("out",)}
RUNTIME_KEYS = ("config", "threads", "verbose", "command")


def effective_config(args) -> dict:
    """Defaults, then ``--config``, then explicit flags."""
    cfg = dict(DEFAULTS[args.command])
    if args.config:
        loaded = load_config(args.config)
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise DataError(f"{args.config}: unknown keys for {args.command}: {sorted(unknown)}")
        cfg.update(loaded)
    for k, v in vars(args).items():
        if k not in RUNTIME_KEYS and v is not None:
            cfg[k] = v
    missing = [k for k in REQUIRED[args.command] if cfg.get(k) in (None, "")]
    if missing:
        raise DataError(f"{args.command}: missing required setting(s) {missing}")
    return cfg


def _run_config(cfg: dict) -> RunConfig:
    return RunConfig.from_dict({k: cfg[k] for k in RunConfig().to_dict() if k in cfg})


def _artifact(command, cfg, **payload) -> dict:
    return {"provenance": provenance(command, cfg), "config": cfg, **payload}


def _load_theta(path) -> Theta:
    with open(path) as fh:
        data = json.load(fh)
    return Theta.from_dict(data.get("theta_hat", data.get("theta", data)))


def _load_fit(path) -> tuple:
    with open(path) as fh:
        fit = json.load(fh)
    if "theta_hat" not in fit or "config" not in fit:
        raise DataError(f"{path}: not a fit artifact")
    spec = _run_config(fit["config"]).spec()
    draws = [Theta.from_vector(v, spec.n_recall, spec.n_heaping) for v in fit.get("sir_draws", [])]
    return Theta.from_dict(fit["theta_hat"]), spec, draws


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(cfg, threads) -> int:
    from .simulation import SCENARIOS, NegativeBinomialEMA, SimulationDesign, generate_dataset
    from .seeding import stream

    theta, _ = SCENARIOS[cfg["scenario"]]()
    if cfg["theta"]:
        theta = _load_theta(cfg["theta"])
    spec = ModelSpec(visit_effect=theta.beta3.size == 1)
    if theta.beta2.size or theta.beta3.size > 1:
        raise DataError("simulate supports recall/heaping covariates only via the library API")
    design = SimulationDesign(cfg["subjects"], cfg["days"],
                              NegativeBinomialEMA(cfg["ema_mean"], cfg["ema_dispersion"]),
                              tuple(int(d) for d in cfg["visit_days"]), spec=spec)
    data = generate_dataset(theta, design, stream(cfg["seed"], "sim"))
    write_dataset(data.subjects, cfg["out"], spec, provenance("simulate", cfg))
    if cfg["latent_out"]:
        data.write_latent(cfg["latent_out"])
    write_json(_artifact("simulate", cfg, theta=theta.to_dict(), design=design.to_dict()),
               cfg["out"] + ".json")
    print(f"wrote {design.n_subjects} subjects x {design.days_per_subject} days to {cfg['out']}")
    return EXIT_OK


def fit_dataset(subjects, rc: RunConfig, seed: int) -> tuple:
    """Mode, information, SIR and BIC for one dataset. Returns ``(payload, warnings)``."""
    from .estimation import find_posterior_mode
    from .likelihood import MarginalLikelihood, bic
    from .sampling import draw_proposals, posterior_moments, posterior_target, sir_resample
    from .seeding import stream

    spec = rc.spec()
    lik = MarginalLikelihood(subjects, spec)
    fixed = {"sigma_b": 1e-6, "sigma_u": 1e-6} if rc.independence else None
    mode = find_posterior_mode(subjects, spec, use_prior=rc.use_prior, fixed=fixed, lik=lik,
                               max_iter=rc.max_iter, ftol=rc.ftol, gtol=rc.gtol)
    warnings = []
    if not mode.converged:
        warnings.append(f"optimizer did not converge: {mode.message}")
    if mode.ridge > 0:
        warnings.append(f"information matrix repaired with ridge {mode.ridge:.3g}")
    target = posterior_target(lik, mode, prior=rc.prior())
    props = draw_proposals(mode, rc.proposals, target, df=rc.df, seed=stream(seed, "fit"))
    summary = posterior_moments(props, mode.theta_hat, Theta.names(spec),
                                n_resampled=rc.resample)
    draws = sir_resample(props, rc.resample, seed=stream(seed, "sir"))
    payload = {
        "theta_hat": mode.theta_hat.to_dict(),
        "parameter_names": Theta.names(spec),
        "mode": mode.to_dict(),
        "posterior": summary.to_dict(),
        "ess": summary.ess,
        "n_dropped_proposals": props.n_dropped,
        "loglik": mode.loglik,
        "bic": bic(mode.loglik, mode.n_params, len(subjects)),
        "n_params": mode.n_params,
        "n_subjects": len(subjects),
        "sir_draws": [t.vector().tolist() for t in draws],
        "warnings": warnings,
    }
    return payload, warnings


def cmd_fit(cfg, threads) -> int:
    rc = _run_config(cfg)
    subjects = load_dataset(cfg["data"], rc.spec())
    payload, warnings = fit_dataset(subjects, rc, cfg["seed"])
    write_json(_artifact("fit", cfg, **payload), cfg["out"])
    names = payload["parameter_names"]
    post = payload["posterior"]["parameters"]
    print(f"{'parameter':<24}{'mode':>10}{'2.5%':>10}{'97.5%':>10}")
    for n in names:
        p = post[n]
        print(f"{n:<24}{p['mode']:>10.4f}{p['lower']:>10.4f}{p['upper']:>10.4f}")
    print(f"loglik {payload['loglik']:.3f}  BIC {payload['bic']:.1f}  ESS {payload['ess']:.0f}")
    for w in warnings:
        print("warning:", w, file=sys.stderr)
    return EXIT_WARN if warnings else EXIT_OK


def _imputation_run(cfg):
    from .imputation import impute_latents

    _, spec, draws = _load_fit(cfg["fit"])
    if not draws:
        raise DataError(f"{cfg['fit']}: fit artifact has no SIR draws")
    if cfg["draws"] < 1:
        raise DataError("draws must be >= 1")
    subjects = load_dataset(cfg["data"], spec)
    run = impute_latents(draws[: cfg["draws"]], subjects, spec, max_rejects=cfg["max_rejects"],
                         seed=cfg["seed"], mode=cfg["mode"])
    return subjects, run


def _failures(run) -> list:
    return [vars(f) for f in run.failures]


def cmd_impute(cfg, threads) -> int:
    subjects, run = _imputation_run(cfg)
    days = {s.subject_id: s for s in subjects}
    with open(cfg["out"], "w", newline="") as fh:
        fh.write("# provenance: " + json.dumps(provenance("impute", cfg), sort_keys=True) + "\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["theta_index", "subject_id", "day", "y", "w", "g", "b", "u"])
        for imp in run.imputations:
            s = days[imp.subject_id]
            for d, w, g in zip(s.days, imp.w, imp.g):
                wr.writerow([imp.theta_index, imp.subject_id, d.day_index, d.tlfb_count,
                             int(w), int(g), repr(imp.b), repr(imp.u)])
    write_json(_artifact("impute", cfg, n_imputations=len(run.imputations),
                         failures=_failures(run)), cfg["out"] + ".json")
    print(f"{len(run.imputations)} subject imputations, {len(run.failures)} failures")
    return EXIT_WARN if run.failures else EXIT_OK


def cmd_check(cfg, threads) -> int:
    from .diagnostics import heap_fraction_table, rows_to_csv

    subjects, run = _imputation_run(cfg)
    rows = heap_fraction_table(subjects, run)
    text = rows_to_csv(rows)
    print(text, end="")
    out = cfg["out"]
    if out:
        rows_to_csv(rows, out)
        write_json(_artifact("check", cfg, table=rows, failures=_failures(run)), out + ".json")
    return EXIT_WARN if run.failures else EXIT_OK


def cmd_predict(cfg, threads) -> int:
    from .imputation import TrueCountModel, predict_true_counts

    if cfg["fit"]:
        theta, spec, _ = _load_fit(cfg["fit"])
    elif cfg["theta"]:
        theta = _load_theta(cfg["theta"])
        spec = ModelSpec(visit_effect=theta.beta3.size == 1)
    else:
        raise DataError("predict needs --fit or --theta")
    sample = ()
    if cfg["x_family"] == "empirical":
        if not cfg["x_sample"]:
            raise DataError("x_family empirical needs --x-sample")
        sample = tuple(int(v) for s in load_dataset(cfg["x_sample"]) for v in s.ema)
    x_model = TrueCountModel(cfg["x_family"], value=cfg["x_value"], mean=cfg["x_mean"],
                             dispersion=cfg["x_dispersion"], sample=sample)
    subjects = load_dataset(cfg["data"], spec, require_ema=False)
    run = predict_true_counts(theta, subjects, x_model, spec, n_imputations=cfg["imputations"],
                              max_rejects=cfg["max_rejects"], seed=cfg["seed"])
    days = {s.subject_id: s for s in subjects}
    with open(cfg["out"], "w", newline="") as fh:
        fh.write("# provenance: " + json.dumps(provenance("predict", cfg), sort_keys=True) + "\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["imputation", "subject_id", "day", "y", "x", "w", "g", "b", "u"])
        for imp in run.imputations:
            for d, x, w, g in zip(days[imp.subject_id].days, imp.x, imp.w, imp.g):
                wr.writerow([imp.theta_index, imp.subject_id, d.day_index, d.tlfb_count,
                             int(x), int(w), int(g), repr(imp.b), repr(imp.u)])
    write_json(_artifact("predict", cfg, x_model=x_model.to_dict(), failures=_failures(run)),
               cfg["out"] + ".json")
    print(f"{len(run.imputations)} subject imputations, {len(run.failures)} failures")
    return EXIT_WARN if run.failures else EXIT_OK


def cmd_curves(cfg, threads) -> int:
    from .diagnostics import PRESETS, marginal_heaping_curve, mean_recall_curve

    theta, spec = PRESETS[cfg["preset"]]()
    if cfg["fit"]:
        theta, spec, _ = _load_fit(cfg["fit"])
    elif cfg["theta"]:
        theta = _load_theta(cfg["theta"])
    z = list(cfg["z"] or [])
    top = int(cfg["max_count"])
    if top < 1:
        raise DataError("max_count must be >= 1")
    if cfg["kind"] == "heaping":
        curve = marginal_heaping_curve(theta, np.arange(0, top + 1), z, visit=bool(cfg["visit"]),
                                       marginal=not cfg["conditional"])
        x_name = "w"
    else:
        if not z:
            z = [0.0] * theta.beta2.size
        mode = "conditional_b0" if cfg["conditional"] else "marginal"
        curve = mean_recall_curve(theta, np.arange(1, top + 1), z, mode)
        x_name = "x"
    curve.metadata["provenance"] = json.dumps(provenance("curves", cfg), sort_keys=True)
    curve.to_csv(cfg["out"], x_name=x_name)
    if cfg["kind"] == "heaping" and top >= 41:
        print(f"w=41: P(heaped)={curve.at(41, 'p_heaped'):.3f} "
              f"P(round5)={curve.at(41, 'p_round5'):.3f}")
    print(f"wrote {cfg['out']}")
    return EXIT_OK


def cmd_simstudy(cfg, threads) -> int:
    import dataclasses

    from .simulation import SCENARIOS, run_simulation_study

    theta, design = SCENARIOS[cfg["scenario"]]()
    design = dataclasses.replace(design, n_subjects=cfg["subjects"], days_per_subject=cfg["days"])
    n_jobs = max(1, threads or 1)
    report = run_simulation_study(theta, design, cfg["replicates"], ci_method=cfg["ci"],
                                  seed=cfg["seed"], bootstrap_B=cfg["bootstrap_b"], n_jobs=n_jobs,
                                  progress=lambda o: log.info("replicate %d done (%s)", o.index,
                                                              "ok" if o.converged else o.error))
    write_json(_artifact("simstudy", cfg, report=report.to_dict()), cfg["out"])
    table = report.table()
    print(table)
    if cfg["table"]:
        Path(cfg["table"]).write_text(table + "\n")
    return EXIT_WARN if report.n_failed else EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "impute": cmd_impute, "check": cmd_check,
            "predict": cmd_predict, "curves": cmd_curves, "simstudy": cmd_simstudy}


def _set_threads(threads):
    if not threads:
        return
    if threads < 1:
        raise DataError("threads must be >= 1")
    try:
        import numba

        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
    except ImportError:
        pass


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help()
            return EXIT_INPUT
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = effective_config(args)
        _set_threads(args.threads)
        return COMMANDS[args.command](cfg, args.threads)
    except (UsageError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (LikelihoodError, FloatingPointError, np.linalg.LinAlgError, OverflowError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except RuntimeError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
