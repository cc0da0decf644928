"""Curves and tables for model checking: recall mean, rounding probabilities, heap fractions."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .likelihood import QuadratureRule
from .model import ModelSpec, SubjectRecord, Theta, heaping_pmf

CLASS_SERIES = ("p_exact", "p_round5", "p_round10", "p_round20")


@dataclass
class CurvePoints:
    x_values: np.ndarray
    series: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x_values = np.asarray(self.x_values)
        for name, vals in self.series.items():
            self.series[name] = np.asarray(vals, dtype=float)
            if self.series[name].shape != self.x_values.shape:
                raise ValueError(f"series {name!r} does not match x_values")

    def __getitem__(self, name):
        return self.series[name]

    def at(self, x, name: str) -> float:
        i = int(np.nonzero(self.x_values == x)[0][0])
        return float(self.series[name][i])

    def to_csv(self, path=None, x_name: str = "x") -> str:
        """One row per x, one column per series, fixed covariates in a leading comment."""
        buf = io.StringIO()
        meta = ", ".join(f"{k}={v}" for k, v in self.metadata.items())
        buf.write(f"# {meta}\n")
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow([x_name, *self.series])
        for i, x in enumerate(self.x_values):
            wr.writerow([x, *(f"{self.series[n][i]:.10g}" for n in self.series)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def mean_recall_curve(theta: Theta, x_range, z_recall=(), mode: str = "conditional_b0") -> CurvePoints:
    """Mean remembered count against the true count.

    ``conditional_b0`` sets the recall effect to zero; ``marginal``
    averages over it, which multiplies by ``exp(sigma_b^2 / 2)``.
    """
    if mode not in ("conditional_b0", "marginal"):
        raise ValueError("mode must be 'conditional_b0' or 'marginal'")
    x = np.asarray(x_range)
    if np.any(x < 1):
        raise ValueError("x values must be >= 1")
    z = np.asarray(z_recall, dtype=float)
    if z.size != theta.beta2.size:
        raise ValueError(f"z_recall has {z.size} entries, beta2 has {theta.beta2.size}")
    lin = theta.beta0 + theta.beta1 * np.log(x) + (z @ theta.beta2 if z.size else 0.0)
    if mode == "marginal":
        lin = lin + theta.sigma_b2 / 2
    return CurvePoints(x, {"mean_recall": np.exp(lin), "identity": x.astype(float)},
                       {"mode": mode, "z_recall": z.tolist()})


def identity_crossings(curve: CurvePoints) -> list:
    """x positions (linear interpolation) where the mean curve crosses the identity."""
    x = curve.x_values.astype(float)
    d = curve["mean_recall"] - x
    out = []
    for i in np.nonzero(np.sign(d[:-1]) != np.sign(d[1:]))[0]:
        out.append(float(x[i] - d[i] * (x[i + 1] - x[i]) / (d[i + 1] - d[i])))
    return out


def _heaping_row(theta: Theta, z_heaping, visit: bool) -> np.ndarray:
    z = np.asarray(z_heaping, dtype=float).reshape(-1)
    if theta.beta3.size == z.size + 1:
        return np.append(z, float(visit))
    if theta.beta3.size != z.size:
        raise ValueError(f"z_heaping has {z.size} entries, beta3 has {theta.beta3.size}")
    if visit:
        raise ValueError("theta has no visit-day coefficient")
    return z


def marginal_heaping_curve(theta: Theta, w_range, z_heaping=(), visit: bool = False,
                           quad: QuadratureRule | None = None, marginal: bool = True) -> CurvePoints:
    """Rounding-class probabilities against the remembered count.

    ``marginal`` integrates over the heaping effect ``u ~ N(0, sigma_u^2)``
    by Gauss-Hermite quadrature (40 nodes unless ``quad`` is given);
    otherwise ``u = 0``. When ``theta`` carries a visit coefficient as the
    last heaping entry, ``visit`` sets that indicator.
    """
    w = np.asarray(w_range)
    if np.any(w < 0):
        raise ValueError("w values must be >= 0")
    z = _heaping_row(theta, z_heaping, visit)
    if marginal:
        quad = quad or QuadratureRule.gauss_hermite(40)
        u = theta.sigma_u * quad.nodes
        probs = np.einsum("k,kwc->wc", quad.weights,
                          heaping_pmf(theta, w[None, :], z, u[:, None]))
    else:
        probs = heaping_pmf(theta, w, z, 0.0)
    series = {name: probs[:, j] for j, name in enumerate(CLASS_SERIES)}
    series["p_heaped"] = 1.0 - probs[:, 0]
    return CurvePoints(w, series, {"visit": int(visit), "marginal_over_u": int(marginal),
                                   "z_heaping": z.tolist()})


def heap_fraction_table(dataset: Sequence[SubjectRecord], imputations=None,
                        bases: Sequence[int] = (5, 10, 20)) -> list:
    """Per-day-index and overall divisibility fractions of reported y and imputed w.

    Returns a list of dict rows; the last row has ``day = "all"``.
    ``imputations`` is an :class:`~heaprecall.imputation.ImputationRun` or
    list of imputations aligned with the dataset's subjects.
    """
    y_by_id = {s.subject_id: s for s in dataset}
    y_days = np.concatenate([[d.day_index for d in s.days] for s in dataset])
    y = np.concatenate([s.tlfb for s in dataset])
    w_days = w = None
    if imputations is not None:
        imps = getattr(imputations, "imputations", imputations)
        w = np.concatenate([imp.w for imp in imps]) if imps else np.zeros(0, dtype=int)
        w_days = np.concatenate([[d.day_index for d in y_by_id[imp.subject_id].days]
                                 for imp in imps]) if imps else np.zeros(0, dtype=int)

    def frac(vals, base):
        return float(np.mean(vals % base == 0)) if vals.size else math.nan

    rows = []
    for day in [*np.unique(y_days).tolist(), "all"]:
        sel = np.ones(y.size, bool) if day == "all" else y_days == day
        row = {"day": day, "n_y": int(sel.sum())}
        for b in bases:
            row[f"y_frac{b}"] = frac(y[sel], b)
        if w is not None:
            wsel = np.ones(w.size, bool) if day == "all" else w_days == day
            row["n_w"] = int(wsel.sum())
            for b in bases:
                row[f"w_frac{b}"] = frac(w[wsel], b)
        rows.append(row)
    return rows


def rows_to_csv(rows: list, path=None) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    wr.writeheader()
    wr.writerows(rows)
    if path is not None:
        Path(path).write_text(buf.getvalue())
    return buf.getvalue()


# ---------------------------------------------------------------------------
# reference fits of the smoking study, for curve presets

def table3_fit() -> tuple:
    """Random-effects fit with EMA as the only recall predictor and a visit-day effect."""
    spec = ModelSpec(visit_effect=True)
    theta = Theta(beta0=2.32, beta1=0.27, sigma_b=math.sqrt(0.09), gamma1=-1.50,
                  gamma2=-5.21, gamma3=-10.15, gamma0=0.11, sigma_u=math.sqrt(6.65),
                  beta3=[-2.96])
    return theta, spec


TABLE4_COVARIATES = ("addicted_possible", "addicted_probable", "ftnd", "ndss",
                     "ema_noncompliance", "age", "race_black", "sex_male", "education")

# covariate profile quoted for the reference mean-recall curve (raw scale)
FIGURE_PROFILE = {"addicted_possible": 0.0, "addicted_probable": 0.0, "ftnd": 5.97,
                  "ndss": -0.023, "ema_noncompliance": 0.101, "age": 43.5, "race_black": 0.0,
                  "sex_male": 0.0, "education": 0.0}


def table4_fit() -> tuple:
    """Random-effects fit with the expanded recall model."""
    spec = ModelSpec(recall_covariates=TABLE4_COVARIATES, visit_effect=True)
    theta = Theta(beta0=2.34, beta1=0.25, sigma_b=math.sqrt(0.06), gamma1=-1.62,
                  gamma2=-5.52, gamma3=-10.31, gamma0=0.11, sigma_u=math.sqrt(6.79),
                  beta2=[0.07, -0.01, 0.06, 0.08, 0.13, 0.002, -0.14, 0.16, -0.001],
                  beta3=[-2.99])
    return theta, spec


PRESETS = {"table3": table3_fit, "table4": table4_fit}
