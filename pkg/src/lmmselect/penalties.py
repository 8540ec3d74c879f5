"""Concave penalty family: SCAD, L1, and MCP values and derivatives.

All three penalties are increasing and concave on [0, inf) with p(0) = 0
and right derivative lambda at zero.  SCAD and MCP flatten out beyond
``a * lambda`` which is what removes shrinkage bias from large signals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCAD_DEFAULT_A = 3.7
MCP_DEFAULT_A = 3.0

_FAMILIES = ("scad", "l1", "mcp")


@dataclass(frozen=True)
class PenaltySpec:
    """Penalty family with regularization level ``lam`` and shape ``a``."""

    family: str
    lam: float
    a: float | None = None

    def __post_init__(self):
        fam = self.family.lower()
        object.__setattr__(self, "family", fam)
        if fam not in _FAMILIES:
            raise ValueError(f"unknown penalty family {self.family!r}; use one of {_FAMILIES}")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if fam == "scad":
            a = SCAD_DEFAULT_A if self.a is None else float(self.a)
            if a <= 2:
                raise ValueError("SCAD requires a > 2")
            object.__setattr__(self, "a", a)
        elif fam == "mcp":
            a = MCP_DEFAULT_A if self.a is None else float(self.a)
            if a <= 1:
                raise ValueError("MCP requires a > 1")
            object.__setattr__(self, "a", a)
        else:
            object.__setattr__(self, "a", None)

    def with_lam(self, lam: float) -> "PenaltySpec":
        return PenaltySpec(self.family, lam, self.a)


def value(spec: PenaltySpec, t) -> np.ndarray | float:
    """Penalty value p(t) for t >= 0 (vectorized)."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("penalty value requires t >= 0")
    lam, a = spec.lam, spec.a
    if spec.family == "l1":
        out = lam * t_arr
    elif spec.family == "scad":
        out = np.where(
            t_arr <= lam,
            lam * t_arr,
            np.where(
                t_arr < a * lam,
                (2 * a * lam * t_arr - t_arr**2 - lam**2) / (2 * (a - 1)),
                lam**2 * (a + 1) / 2,
            ),
        )
    else:  # mcp
        out = np.where(
            t_arr < a * lam,
            lam * t_arr - t_arr**2 / (2 * a),
            a * lam**2 / 2,
        )
    return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out


def derivative(spec: PenaltySpec, t) -> np.ndarray | float:
    """First derivative p'(t); at t = 0 returns the right limit lam."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("penalty derivative requires t >= 0")
    lam, a = spec.lam, spec.a
    if spec.family == "l1":
        out = np.full_like(t_arr, lam)
    elif spec.family == "scad":
        out = np.where(
            t_arr <= lam,
            lam,
            np.where(t_arr < a * lam, np.maximum(a * lam - t_arr, 0.0) / (a - 1), 0.0),
        )
    else:  # mcp
        out = np.maximum(lam - t_arr / a, 0.0)
    return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out


def second_derivative(spec: PenaltySpec, t) -> np.ndarray | float:
    """Second derivative p''(t) for t > 0; breakpoints take the left value."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr <= 0):
        raise ValueError("penalty second derivative requires t > 0")
    lam, a = spec.lam, spec.a
    if spec.family == "l1" or lam == 0.0:
        out = np.zeros_like(t_arr)
    elif spec.family == "scad":
        # left-limit convention: the concave middle piece owns both breakpoints
        out = np.where((t_arr > lam) & (t_arr <= a * lam), -1.0 / (a - 1), 0.0)
    else:  # mcp
        out = np.where(t_arr <= a * lam, -1.0 / a, 0.0)
    return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out


def quadratic_segments(spec: PenaltySpec) -> list[tuple[float, float, float, float, float]]:
    """Piecewise-quadratic description of p on [0, inf).

    Returns segments ``(lo, hi, c2, c1, c0)`` with p(t) = c2 t^2 + c1 t + c0
    on [lo, hi]; the last segment has hi = inf.  Used by the brute-force
    oracles for exact one-dimensional minimization.
    """
    lam, a = spec.lam, spec.a
    if spec.family == "l1" or lam == 0.0:
        return [(0.0, np.inf, 0.0, lam, 0.0)]
    if spec.family == "scad":
        return [
            (0.0, lam, 0.0, lam, 0.0),
            (lam, a * lam, -1.0 / (2 * (a - 1)), a * lam / (a - 1), -lam**2 / (2 * (a - 1))),
            (a * lam, np.inf, 0.0, 0.0, lam**2 * (a + 1) / 2),
        ]
    return [
        (0.0, a * lam, -1.0 / (2 * a), lam, 0.0),
        (a * lam, np.inf, 0.0, 0.0, a * lam**2 / 2),
    ]
