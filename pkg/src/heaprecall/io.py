"""Dataset CSV schema, run configuration and provenance."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import QUADRATURE_METHODS, ModelSpec, ObservationDay, PriorConfig, SubjectRecord

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("subject_id", "day", "ema_count", "tlfb_count", "visit_day")


class DataError(ValueError):
    """Schema or content problem in an input file, with its location."""


def _read_rows(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames is None:
        raise DataError(f"{path}: empty file or missing header")
    return [f.strip() for f in reader.fieldnames], list(reader)


def _int(value, path, row, col, minimum=None):
    try:
        out = int(str(value).strip())
    except (TypeError, ValueError):
        raise DataError(f"{path}: row {row}, column {col!r}: expected an integer, got {value!r}")
    if minimum is not None and out < minimum:
        raise DataError(f"{path}: row {row}, column {col!r}: value {out} is below {minimum}")
    return out


def load_dataset(path, spec: ModelSpec | None = None, require_ema: bool = True) -> list:
    """Read the long-format CSV into validated SubjectRecords, days sorted.

    Covariate columns named in ``spec`` must be complete and constant within
    a subject. With ``require_ema=False`` a missing or empty ``ema_count``
    becomes the placeholder 1 (for prediction, where it is ignored).
    """
    spec = spec or ModelSpec()
    header, rows = _read_rows(path)
    need = [c for c in REQUIRED_COLUMNS if require_ema or c != "ema_count"]
    missing = [c for c in need if c not in header]
    wanted = list(dict.fromkeys(spec.recall_covariates + spec.heaping_covariates))
    missing += [c for c in wanted if c not in header]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    covariates = [c for c in header if c not in REQUIRED_COLUMNS]
    by_subject: dict = {}
    seen = set()
    for r, row in enumerate(rows, start=2):
        sid = (row.get("subject_id") or "").strip()
        if not sid:
            raise DataError(f"{path}: row {r}: empty subject_id")
        day = _int(row["day"], path, r, "day", 1)
        if (sid, day) in seen:
            raise DataError(f"{path}: duplicate (subject_id, day) pair ({sid!r}, {day}) at row {r}")
        seen.add((sid, day))
        raw_ema = (row.get("ema_count") or "").strip()
        if raw_ema == "" and not require_ema:
            ema = 1
        else:
            ema = _int(raw_ema, path, r, "ema_count")
            if ema < 1:
                raise DataError(f"{path}: row {r}: ema_count must be >= 1 (got {ema}); the "
                                f"recall model uses log of the true count")
        tlfb = _int(row["tlfb_count"], path, r, "tlfb_count", 0)
        visit = _int(row["visit_day"], path, r, "visit_day", 0)
        if visit not in (0, 1):
            raise DataError(f"{path}: row {r}, column 'visit_day': expected 0 or 1, got {visit}")
        cov = {}
        for c in covariates:
            cell = (row.get(c) or "").strip()
            if cell == "":
                raise DataError(f"{path}: row {r}, column {c!r}: missing covariate value")
            try:
                cov[c] = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {r}, column {c!r}: not a number: {cell!r}")
        entry = by_subject.setdefault(sid, {"days": [], "cov": cov, "row": r})
        for c in wanted:
            if cov[c] != entry["cov"][c]:
                raise DataError(f"{path}: row {r}: covariate {c!r} changes within subject {sid!r}")
        entry["days"].append(ObservationDay(day, ema, tlfb, bool(visit)))
    if not by_subject:
        raise DataError(f"{path}: no data rows")
    subjects = []
    for sid, entry in by_subject.items():
        days = sorted(entry["days"], key=lambda d: d.day_index)
        subjects.append(SubjectRecord(
            sid, tuple(days),
            z_recall=[entry["cov"][c] for c in spec.recall_covariates],
            z_heaping=[entry["cov"][c] for c in spec.heaping_covariates]))
    log.info("%s: %d subjects, %d days, covariates %s", path, len(subjects),
             sum(s.n_days for s in subjects), covariates)
    return subjects


def write_dataset(subjects: Sequence[SubjectRecord], path, spec: ModelSpec | None = None,
                  provenance: dict | None = None) -> None:
    spec = spec or ModelSpec()
    names = list(dict.fromkeys(spec.recall_covariates + spec.heaping_covariates))
    with open(path, "w", newline="") as fh:
        if provenance is not None:
            fh.write("# provenance: " + json.dumps(provenance, sort_keys=True) + "\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow([*REQUIRED_COLUMNS, *names])
        for s in subjects:
            vals = dict(zip(spec.recall_covariates, s.z_recall))
            vals.update(zip(spec.heaping_covariates, s.z_heaping))
            for d in s.days:
                wr.writerow([s.subject_id, d.day_index, d.ema_count, d.tlfb_count,
                             int(d.is_visit_day), *(repr(float(vals[n])) for n in names)])


# ---------------------------------------------------------------------------
# configuration

@dataclass
class RunConfig:
    """Effective settings of one command; every field is validated up front."""

    recall_covariates: list = field(default_factory=list)
    heaping_covariates: list = field(default_factory=list)
    visit_effect: bool = False
    quadrature_nodes: int = 20
    quadrature: str = "profile"
    use_prior: bool = True
    beta1_prior_mean: float = 1.0
    beta1_prior_sd: float = 10.0
    coef_prior_sd: float = 10.0
    variance_ig_shape: float = 3.0
    variance_ig_scale: float = 2.0
    max_iter: int = 500
    ftol: float = 1e-9
    gtol: float = 1e-4
    proposals: int = 4000
    resample: int = 1000
    df: float = 5.0
    seed: int = 0
    independence: bool = False

    def validate(self) -> "RunConfig":
        problems = []
        if not 1 <= self.quadrature_nodes <= 200:
            problems.append("quadrature_nodes must be in [1, 200]")
        if self.quadrature not in QUADRATURE_METHODS:
            problems.append(f"quadrature must be one of {QUADRATURE_METHODS}")
        for name in ("beta1_prior_sd", "coef_prior_sd", "variance_ig_shape", "variance_ig_scale",
                     "ftol", "gtol", "df"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                problems.append(f"{name} must be a positive number")
        if not 1 <= self.max_iter <= 100_000:
            problems.append("max_iter must be in [1, 100000]")
        if self.proposals < 1:
            problems.append("proposals must be >= 1")
        if not 1 <= self.resample <= self.proposals:
            problems.append("resample must be in [1, proposals]")
        if self.seed < 0:
            problems.append("seed must be >= 0")
        if problems:
            raise DataError("invalid configuration: " + "; ".join(problems))
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown configuration keys {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)

    def prior(self) -> PriorConfig:
        return PriorConfig(self.beta1_prior_mean, self.beta1_prior_sd, self.coef_prior_sd,
                           self.variance_ig_shape, self.variance_ig_scale)

    def spec(self) -> ModelSpec:
        return ModelSpec(tuple(self.recall_covariates), tuple(self.heaping_covariates),
                         self.visit_effect, self.quadrature_nodes, self.quadrature, self.prior())


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})")
    if not isinstance(data, dict):
        raise DataError(f"{path}: expected a JSON object")
    # artifacts embed their effective configuration under "config"
    if "config" in data and "provenance" in data:
        data = data["config"]
    return data


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, default=_json_default)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def provenance(command: str, config: dict) -> dict:
    from . import __version__

    return {"command": command, "version": __version__, "config_hash": config_hash(config),
            "seed": config.get("seed")}


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


def write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default)
    Path(path).write_text(text + "\n")
