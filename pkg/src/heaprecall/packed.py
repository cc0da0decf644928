"""Flat array view of a dataset, the input format of the compiled kernels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .model import WINDOW_WIDTH, ModelSpec, SubjectRecord, Theta, check_dataset, wg_window


@dataclass
class PackedData:
    subject_ids: list
    starts: np.ndarray      # (n_subjects + 1,) day offsets
    y: np.ndarray           # (n_days,) reported counts
    x: np.ndarray           # (n_days,) true counts
    day_index: np.ndarray
    zr: np.ndarray          # (n_days, n_recall)
    zh: np.ndarray          # (n_days, n_heaping), visit column included
    win_lo: np.ndarray      # (n_days,)
    win_n: np.ndarray       # (n_days,)
    win_mask: np.ndarray    # (n_days, WINDOW_WIDTH, 4) uint8
    win_lfact: np.ndarray   # (n_days, WINDOW_WIDTH) log(w!)

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def n_days(self) -> int:
        return self.y.size

    @property
    def subject_of_day(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_subjects), np.diff(self.starts))

    def offsets(self, theta: Theta) -> tuple:
        """Per-day linear predictors at zero random effects.

        Returns ``(recall_offset, heaping_offset)``; the Poisson mean is
        ``exp(recall_offset + b)`` and the heaping logits are
        ``gamma_k + gamma0 * w + heaping_offset + u``.
        """
        mu = theta.beta0 + theta.beta1 * np.log(self.x)
        if self.zr.shape[1]:
            mu = mu + self.zr @ theta.beta2
        eta = self.zh @ theta.beta3 if self.zh.shape[1] else np.zeros(self.n_days)
        return np.ascontiguousarray(mu, dtype=float), np.ascontiguousarray(eta, dtype=float)

    def recall_base(self, theta: Theta) -> np.ndarray:
        """``beta0 + z beta2`` per day, i.e. the recall offset without the EMA term."""
        base = np.full(self.n_days, theta.beta0)
        if self.zr.shape[1]:
            base = base + self.zr @ theta.beta2
        return base


_WINDOWS: dict = {}


def _window(y: int):
    if y not in _WINDOWS:
        lo, mask = wg_window(y)
        padded = np.zeros((WINDOW_WIDTH, 4), dtype=np.uint8)
        padded[: mask.shape[0]] = mask
        _WINDOWS[y] = (lo, mask.shape[0], padded)
    return _WINDOWS[y]


def pack_windows(y: np.ndarray) -> tuple:
    y = np.asarray(y, dtype=np.int64)
    lo = np.empty(y.size, dtype=np.int64)
    n = np.empty(y.size, dtype=np.int64)
    mask = np.empty((y.size, WINDOW_WIDTH, 4), dtype=np.uint8)
    for i, yi in enumerate(y):
        lo[i], n[i], mask[i] = _window(int(yi))
    lfact = gammaln(lo[:, None] + np.arange(WINDOW_WIDTH)[None, :] + 1.0)
    return lo, n, mask, lfact


def pack(subjects: Sequence[SubjectRecord], spec: ModelSpec, y_override=None) -> PackedData:
    check_dataset(subjects, spec)
    counts = [s.n_days for s in subjects]
    starts = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    y = np.concatenate([s.tlfb for s in subjects]) if y_override is None else \
        np.asarray(y_override, dtype=np.int64)
    x = np.concatenate([s.ema for s in subjects]).astype(float)
    day_index = np.concatenate([[d.day_index for d in s.days] for s in subjects]).astype(np.int64)
    zr = np.concatenate(
        [np.broadcast_to(s.z_recall, (s.n_days, spec.n_recall)) for s in subjects]
    ).astype(float).reshape(y.size, spec.n_recall)
    zh = np.concatenate([spec.heaping_design(s) for s in subjects]).reshape(y.size, spec.n_heaping)
    lo, n, mask, lfact = pack_windows(y)
    return PackedData(
        subject_ids=[s.subject_id for s in subjects], starts=starts, y=y, x=x,
        day_index=day_index, zr=np.ascontiguousarray(zr), zh=np.ascontiguousarray(zh),
        win_lo=lo, win_n=n, win_mask=mask, win_lfact=lfact,
    )
