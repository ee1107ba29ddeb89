"""Threat quantification: approaching rate, activation trigger and threat indicator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ThreatConfig
from .sim_core import cpa_predict

ThreatThresholds = ThreatConfig

DEGENERATE_EPS = 1e-6


class DegenerateGeometryError(ValueError):
    """The obstacle sits on the robot centre, so the approach direction is undefined."""


@dataclass
class ThreatState:
    p_rel: np.ndarray
    v_rel: np.ndarray
    kappa: np.ndarray
    alpha: np.ndarray
    xi: np.ndarray
    d_min_pred: np.ndarray


def compute_rar(p_rel, v_rel):
    """Relative approaching rate: -d|p_rel|/dt, positive while closing."""
    p = np.asarray(p_rel, dtype=float)
    v = np.asarray(v_rel, dtype=float)
    dist = np.linalg.norm(p, axis=-1)
    if np.any(dist <= DEGENERATE_EPS):
        raise DegenerateGeometryError("|p_rel| must exceed 1e-6 m")
    return -np.sum(p * v, axis=-1) / dist


def trigger(p_rel, v_rel, th: ThreatConfig):
    """Activation test: fast relative motion or close range."""
    speed = np.linalg.norm(np.asarray(v_rel, dtype=float), axis=-1)
    dist = np.linalg.norm(np.asarray(p_rel, dtype=float), axis=-1)
    return (speed > th.v_th) | (dist < th.d_th)


def threat_indicator(p_rel, v_rel, th: ThreatConfig):
    kappa = compute_rar(p_rel, v_rel)
    d_pred = cpa_predict(p_rel, v_rel).d_min_pred
    return (kappa > th.kappa_th) & (d_pred < th.d_safe)


def assess(p_rel, v_rel, th: ThreatConfig) -> ThreatState:
    """All threat quantities at once; the rate is set to 0 at degenerate range."""
    p = np.asarray(p_rel, dtype=float)
    v = np.asarray(v_rel, dtype=float)
    dist = np.linalg.norm(p, axis=-1)
    ok = dist > DEGENERATE_EPS
    kappa = np.where(ok, -np.sum(p * v, axis=-1) / np.where(ok, dist, 1.0), 0.0)
    d_pred = cpa_predict(p, v).d_min_pred
    return ThreatState(
        p_rel=p, v_rel=v, kappa=kappa,
        alpha=trigger(p, v, th),
        xi=ok & (kappa > th.kappa_th) & (d_pred < th.d_safe),
        d_min_pred=d_pred,
    )
