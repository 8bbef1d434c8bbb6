"""Scaled training losses, percentage evaluation metrics, and the composite objective.

Forecasts at origin ``t`` cover periods t+1..t+h; forecasts at origin
``t-1`` cover t..t+h-1. The overlapping periods are therefore
``new[:h-1]`` and ``old[1:]``.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .gradcore import ContractError, Tape, Tensor


class DegenerateScaleError(ValueError):
    """In-sample window has no first-difference energy."""


class LossPair(NamedTuple):
    error: float
    instability: float


def insample_scale(insample) -> np.ndarray:
    """Mean squared one-step difference of the in-sample window(s), last axis."""
    insample = np.asarray(insample, dtype=np.float64)
    if insample.shape[-1] < 2:
        raise ContractError("in-sample window needs at least 2 observations")
    return np.mean(np.diff(insample, axis=-1) ** 2, axis=-1)


def _checked_scale(insample) -> np.ndarray:
    scale = insample_scale(insample)
    if np.any(scale <= 0.0):
        raise DegenerateScaleError("constant in-sample window: scale is zero")
    return scale


def rmsse(forecast, actual, insample) -> float:
    forecast, actual = np.asarray(forecast, float), np.asarray(actual, float)
    if forecast.shape != actual.shape:
        raise ContractError(f"forecast {forecast.shape} and actual {actual.shape} differ")
    return float(np.sqrt(np.mean((actual - forecast) ** 2) / _checked_scale(insample)))


def rmssc(forecast_new, forecast_old, insample) -> float:
    new, old = np.asarray(forecast_new, float), np.asarray(forecast_old, float)
    if new.shape != old.shape or new.size < 2:
        raise ContractError("rmssc needs two equal-length forecasts with h >= 2")
    return float(np.sqrt(np.mean((old[1:] - new[:-1]) ** 2) / _checked_scale(insample)))


def smape(forecast, actual) -> float:
    forecast, actual = np.asarray(forecast, float), np.asarray(actual, float)
    denom = np.abs(actual) + np.abs(forecast)
    if np.any(denom == 0.0):
        raise ContractError("sMAPE undefined where actual and forecast are both zero")
    return float(200.0 / actual.size * np.sum(np.abs(actual - forecast) / denom))


def smapc(forecast_new, forecast_old) -> float:
    new, old = np.asarray(forecast_new, float)[:-1], np.asarray(forecast_old, float)[1:]
    if new.size < 1:
        raise ContractError("sMAPC needs h >= 2")
    denom = np.abs(old) + np.abs(new)
    if np.any(denom == 0.0):
        raise ContractError("sMAPC undefined where both forecasts are zero")
    return float(200.0 / new.size * np.sum(np.abs(old - new) / denom))


def composite(error: float, instability: float, lam: float) -> float:
    return (1.0 - lam) * error + lam * instability


def composite_loss(forecast_t, forecast_tm1, actual_t, actual_tm1, insample, lam: float) -> float:
    """Batch mean of the per-sample composite objective (arrays are (batch, len))."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    pair = loss_pair(forecast_t, forecast_tm1, actual_t, actual_tm1, insample)
    return composite(pair.error, pair.instability, lam)


def loss_pair(forecast_t, forecast_tm1, actual_t, actual_tm1, insample) -> LossPair:
    ft, fo = np.atleast_2d(forecast_t), np.atleast_2d(forecast_tm1)
    yt, yo = np.atleast_2d(actual_t), np.atleast_2d(actual_tm1)
    scale = _checked_scale(np.atleast_2d(insample))
    e_t = np.sqrt(np.mean((yt - ft) ** 2, axis=1) / scale)
    e_o = np.sqrt(np.mean((yo - fo) ** 2, axis=1) / scale)
    s = np.sqrt(np.mean((fo[:, 1:] - ft[:, :-1]) ** 2, axis=1) / scale)
    return LossPair(float(np.mean((e_t + e_o) / 2.0)), float(np.mean(s)))


# tape versions -------------------------------------------------------------


def rmsse_node(tape: Tape, forecast: Tensor, actual: np.ndarray, scale: np.ndarray) -> Tensor:
    """Per-row RMSSE of a (batch, h) forecast node, shape (batch,)."""
    diff = tape.sub(forecast, tape.constant(actual))
    msq = tape.mean(tape.square(diff), axis=1)
    return tape.sqrt(tape.scale(msq, 1.0 / scale))


def rmssc_node(tape: Tape, forecast_new: Tensor, forecast_old: Tensor, scale: np.ndarray) -> Tensor:
    h = forecast_new.values.shape[1]
    diff = tape.sub(tape.columns(forecast_old, 1, h), tape.columns(forecast_new, 0, h - 1))
    msq = tape.mean(tape.square(diff), axis=1)
    return tape.sqrt(tape.scale(msq, 1.0 / scale))


def loss_nodes(
    tape: Tape,
    forecast_t: Tensor,
    forecast_tm1: Tensor,
    actual_t: np.ndarray,
    actual_tm1: np.ndarray,
    scale: np.ndarray,
):
    """(L_error, L_instability) scalar nodes.

    L_error is the batch mean of (RMSSE_t + RMSSE_{t-1}) / 2 so that
    (1 - lam) * L_error + lam * L_instability is exactly the composite objective.
    """
    e_t = rmsse_node(tape, forecast_t, actual_t, scale)
    e_o = rmsse_node(tape, forecast_tm1, actual_tm1, scale)
    error = tape.scale(tape.mean(tape.add(e_t, e_o)), 0.5)
    instability = tape.mean(rmssc_node(tape, forecast_t, forecast_tm1, scale))
    return error, instability
