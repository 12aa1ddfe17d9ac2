"""Parked-car anchors, UWB ranging and multilateration.

Cars join the anchor network only after standing still for a configurable
time; fixed roadside units are always eligible.  Positions are solved by
damped Gauss-Newton on range residuals weighted by their sigmas.
"""

from __future__ import annotations

import enum
import json
import math
import threading
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import (DegenerateGeometryError, DomainError, InsufficientGeometryError,
                     NoConvergenceError)
from .geo import FrameOrigin, LocalPosition, geodetic_to_enu
from .gps import URBAN, GpsSample, weighted_position

DEFAULT_ELIGIBILITY_S = 300.0
DEFAULT_RANGE_SIGMA_M = 0.10

MAX_ITERATIONS = 50
STEP_TOL_M = 1e-9
# condition number above which the normal equations are treated as singular
_COND_LIMIT = 1e12
# mean squared normalised residual above which a solution is re-tried from a linear start
_BASIN_CHI2 = 9.0


class AnchorKind(str, enum.Enum):
    PARKED_CAR = "PARKED_CAR"
    FIXED = "FIXED"


@dataclass(frozen=True)
class Anchor:
    id: str
    pos_estimate: LocalPosition
    kind: AnchorKind = AnchorKind.FIXED
    pos_variance_m2: tuple[float, float, float] = (0.0, 0.0, 0.0)
    stationary_since: Optional[float] = None
    eligible: bool = True
    eligibility_threshold_s: float = DEFAULT_ELIGIBILITY_S
    last_update_t: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", AnchorKind(self.kind))
        if any(v < 0 for v in self.pos_variance_m2):
            raise DomainError("anchor position variance must be non-negative")
        if self.eligibility_threshold_s < 0:
            raise DomainError("eligibility threshold must be non-negative")
        # eligibility is derived, never trusted from the caller
        if self.kind is AnchorKind.FIXED:
            eligible = True
        else:
            eligible = (self.stationary_since is not None and self.last_update_t is not None
                        and self.last_update_t - self.stationary_since >= self.eligibility_threshold_s)
        object.__setattr__(self, "eligible", eligible)

    @classmethod
    def parked_car(cls, id, pos, threshold_s=DEFAULT_ELIGIBILITY_S, **kw) -> "Anchor":
        """A car that has not yet been seen standing still."""
        return cls(id=id, pos_estimate=pos, kind=AnchorKind.PARKED_CAR,
                   eligibility_threshold_s=threshold_s, **kw)

    def position(self) -> np.ndarray:
        return self.pos_estimate.as_array()


@dataclass(frozen=True)
class UwbRange:
    anchor_id: str
    range_m: float
    sigma_m: float = DEFAULT_RANGE_SIGMA_M
    t: float = 0.0

    def __post_init__(self):
        if not self.range_m >= 0:
            raise DomainError("range must be non-negative")
        if not self.sigma_m > 0:
            raise DomainError("range sigma must be positive")


@dataclass(frozen=True)
class Multilaterated:
    pos: LocalPosition
    covariance: np.ndarray
    residual_rms_m: float
    iterations: int


def update_car(anchor: Anchor, is_moving: bool, t: float) -> Anchor:
    """Advance a car's stationarity clock to time ``t``."""
    if anchor.last_update_t is not None and t < anchor.last_update_t:
        raise DomainError(f"time went backwards for anchor {anchor.id}: {t} < {anchor.last_update_t}")
    if anchor.kind is AnchorKind.FIXED:
        return replace(anchor, last_update_t=t)
    if is_moving:
        return replace(anchor, stationary_since=None, last_update_t=t)
    since = anchor.stationary_since if anchor.stationary_since is not None else t
    return replace(anchor, stationary_since=since, last_update_t=t)


def refine_anchor_position(anchor: Anchor, samples: Sequence[GpsSample], origin: FrameOrigin,
                           sigma_per_hdop_m: float = URBAN.base_sigma_m) -> Anchor:
    """Georeference an anchor from the HDOP-weighted mean of its GPS fixes.

    The horizontal variance is the one implied by the noise model,
    ``sigma_per_hdop_m**2 / sum(hdop**-2)``, so it shrinks with every added
    sample.  Height and its variance are left as they were.
    """
    if len(samples) == 0:
        raise DomainError("need at least one GPS sample")
    local = geodetic_to_enu(weighted_position(samples), origin)
    info = sum(s.hdop ** -2 for s in samples)
    var_h = sigma_per_hdop_m ** 2 / info
    pos = LocalPosition(local.east_m, local.north_m, anchor.pos_estimate.up_m)
    return replace(anchor, pos_estimate=pos, pos_variance_m2=(var_h, var_h, anchor.pos_variance_m2[2]))


def simulate_range(true_pos: LocalPosition, anchor: Anchor, sigma_m: float = DEFAULT_RANGE_SIGMA_M,
                   seed=None, t: float = 0.0, anchor_true_pos: Optional[LocalPosition] = None) -> UwbRange:
    """Noisy two-way range.  ``anchor_true_pos`` overrides the anchor's estimate
    when simulating an anchor whose believed position is wrong."""
    if sigma_m < 0:
        raise DomainError("sigma must be non-negative")
    a = anchor_true_pos if anchor_true_pos is not None else anchor.pos_estimate
    d = math.dist(true_pos.as_array(), a.as_array())
    if sigma_m > 0:
        d += float(np.random.default_rng(seed).normal(0.0, sigma_m))
    return UwbRange(anchor.id, max(d, 0.0), sigma_m if sigma_m > 0 else DEFAULT_RANGE_SIGMA_M, t)


def _effective_sigmas(anchors, ranges, dims):
    sig = np.array([r.sigma_m for r in ranges], dtype=float)
    # anchor position uncertainty is folded into the range sigma
    var_a = np.array([sum(a.pos_variance_m2[:dims]) / dims for a in anchors])
    return np.sqrt(sig ** 2 + var_a)


def _rank(points: np.ndarray) -> int:
    centred = points - points.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return 0
    return int(np.sum(sv > sv[0] * 1e-9))


def _eig_bounds(N: np.ndarray) -> tuple[float, float]:
    """Smallest and largest eigenvalue of a symmetric PSD matrix."""
    if N.shape == (2, 2):
        # closed form; avoids LAPACK call overhead in the per-tick solver
        a, b, d = float(N[0, 0]), float(N[0, 1]), float(N[1, 1])
        m = 0.5 * (a + d)
        r = math.hypot(0.5 * (a - d), b)
        hi = m + r
        return (a * d - b * b) / hi if hi > 0 else 0.0, hi
    ev = np.linalg.eigvalsh(N)
    return float(ev[0]), float(ev[-1])


def _solve_sym(N: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if N.shape == (2, 2):
        a, b, d = float(N[0, 0]), float(N[0, 1]), float(N[1, 1])
        det = a * d - b * b
        inv = np.array([[d, -b], [-b, a]]) / det
        return inv @ rhs
    return np.linalg.solve(N, rhs)


def multilaterate(ranges: Sequence[tuple[Anchor, UwbRange]], guess: Optional[LocalPosition] = None,
                  dims: int = 2, max_iterations: int = MAX_ITERATIONS) -> Multilaterated:
    """Weighted least-squares position from anchor ranges.

    In 2-D mode the up coordinate is held at ``guess.up_m`` and ranges are
    still compared as 3-D distances, so anchors mounted at different heights
    are handled correctly.  ``guess`` defaults to the anchor centroid; without
    a caller guess the closed-form linearised solution is also tried and the
    lower-cost end point wins.
    """
    if dims not in (2, 3):
        raise DomainError("dims must be 2 or 3")
    pairs = [(a, r) for a, r in ranges if a.eligible]
    if len(pairs) < dims + 1:
        raise InsufficientGeometryError(f"need {dims + 1} eligible anchors, have {len(pairs)}")
    anchors = [a for a, _ in pairs]
    A = np.array([a.position() for a in anchors])
    rho = np.array([r.range_m for _, r in pairs], dtype=float)
    w = 1.0 / _effective_sigmas(anchors, [r for _, r in pairs], dims)
    if _rank(A[:, :dims]) < dims:
        raise DegenerateGeometryError("anchors are collinear" if dims == 2 else "anchors are coplanar")

    x0 = A.mean(axis=0) if guess is None else guess.as_array()

    def residuals(p):
        diff = p - A
        return (np.sqrt(np.einsum("ij,ij->i", diff, diff)) - rho) * w

    def jacobian(p):
        diff = p - A
        d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        d = np.where(d > 0, d, 1.0)
        return (diff[:, :dims] / d[:, None]) * w[:, None]

    def normal(p):
        J = jacobian(p)
        N = J.T @ J
        lo, hi = _eig_bounds(N)
        if not lo > hi / _COND_LIMIT:
            raise DegenerateGeometryError("rank-deficient normal equations")
        return J, N

    def gauss_newton(x):
        # Levenberg-Marquardt damping: mu = 0 is a plain Gauss-Newton step; a step
        # that raises the cost is retried with more damping, never accepted
        res = residuals(x)
        c = float(res @ res)
        mu = 0.0
        it = 0
        while it < max_iterations:
            it += 1
            J, N = normal(x)
            g = J.T @ res
            H = N + _curvature(x, A, res * w, dims)
            if not _eig_bounds(H)[0] > 0:
                H = N
            scale = float(np.max(np.diag(N)))
            while True:
                step = np.zeros(3)
                step[:dims] = -_solve_sym(H + mu * np.diag(np.diag(N)), g)
                cand = x + step
                res_new = residuals(cand)
                c_new = float(res_new @ res_new)
                if c_new <= c:
                    break
                mu = max(2.0 * mu, 1e-3)
                if mu > 1e12 * max(scale, 1.0):
                    return x, c, it, True
            moved = float(np.sqrt(step @ step))
            stalled = c - c_new <= 1e-14 * c
            x, c, res = cand, c_new, res_new
            mu = mu / 3.0 if mu > 1e-9 else 0.0
            if moved < STEP_TOL_M or stalled:
                return x, c, it, True
        return x, c, it, False

    x, c, it, converged = gauss_newton(x0)
    # residuals far beyond their sigmas mean a spurious basin (or no convergence):
    # restart from the linearised solution and keep the better end point
    if guess is None or not converged or c > _BASIN_CHI2 * len(rho):
        x1 = _linear_start(A, rho, x0, dims)
        if x1 is not None:
            alt = gauss_newton(x1)
            if alt[3] and (not converged or alt[1] < c):
                x, c, it, converged = alt[0], alt[1], it + alt[2], True
    _, N = normal(x)
    cov = _solve_sym(N, np.eye(dims))
    cov = 0.5 * (cov + cov.T)
    result = Multilaterated(LocalPosition.from_array(x), cov,
                            math.sqrt(float(np.mean((residuals(x) / w) ** 2))), it)
    if not converged:
        raise NoConvergenceError(f"no convergence in {max_iterations} iterations", best=result)
    return result


def _curvature(x: np.ndarray, A: np.ndarray, rw: np.ndarray, dims: int) -> np.ndarray:
    """Second-order part of the cost Hessian, sum_i r_i w_i (I - u_i u_i^T) / d_i.

    Without it Gauss-Newton converges only linearly when residuals stay
    non-zero at the optimum.
    """
    diff = (x - A)[:, :dims]
    d = np.sqrt(np.einsum("ij,ij->i", x - A, x - A))
    d = np.where(d > 0, d, np.inf)
    u = diff / d[:, None]
    coef = rw / d
    return np.eye(dims) * coef.sum() - (u * coef[:, None]).T @ u


def _linear_start(A: np.ndarray, rho: np.ndarray, x0: np.ndarray, dims: int) -> Optional[np.ndarray]:
    """Closed-form position from differenced squared ranges (exact without noise)."""
    P = A[:, :dims]
    r2 = rho ** 2
    if dims == 2:
        # take the held height out of each range first
        r2 = np.maximum(r2 - (x0[2] - A[:, 2]) ** 2, 0.0)
    M = 2.0 * (P[1:] - P[0])
    b = (P[1:] ** 2).sum(axis=1) - (P[0] ** 2).sum() - r2[1:] + r2[0]
    sol, _, rank, _ = np.linalg.lstsq(M, b, rcond=None)
    if rank < dims or not np.all(np.isfinite(sol)):
        return None
    out = x0.copy()
    out[:dims] = sol
    return out


def gdop(anchors: Sequence[Anchor], pos: LocalPosition, dims: int = 2) -> float:
    """Geometric dilution of precision; ``math.inf`` for degenerate geometry."""
    if len(anchors) < 2:
        raise DomainError("gdop needs at least 2 anchors")
    A = np.array([a.position() for a in anchors])
    diff = pos.as_array() - A
    d = np.linalg.norm(diff, axis=1)
    if np.any(d == 0):
        return math.inf
    H = diff[:, :dims] / d[:, None]
    G = H.T @ H
    lo, hi = _eig_bounds(G)
    if not lo > 1e-10 * max(hi, 1.0):
        return math.inf
    return math.sqrt(float(np.trace(_solve_sym(G, np.eye(dims)))))


class AnchorRegistry:
    """Single-writer anchor store; readers take immutable snapshots."""

    def __init__(self, anchors: Sequence[Anchor] = ()):
        self._lock = threading.Lock()
        self._anchors: dict[str, Anchor] = {a.id: a for a in anchors}

    def upsert(self, anchor: Anchor) -> None:
        with self._lock:
            self._anchors = {**self._anchors, anchor.id: anchor}

    def update_car(self, anchor_id: str, is_moving: bool, t: float) -> Anchor:
        with self._lock:
            a = update_car(self._anchors[anchor_id], is_moving, t)
            self._anchors = {**self._anchors, anchor_id: a}
            return a

    def remove(self, anchor_id: str) -> None:
        with self._lock:
            self._anchors = {k: v for k, v in self._anchors.items() if k != anchor_id}

    def snapshot(self) -> tuple[Anchor, ...]:
        return tuple(self._anchors.values())

    def eligible(self) -> tuple[Anchor, ...]:
        return tuple(a for a in self._anchors.values() if a.eligible)


def anchor_to_dict(a: Anchor) -> dict:
    p = a.pos_estimate
    return {"id": a.id, "east_m": p.east_m, "north_m": p.north_m, "up_m": p.up_m,
            "kind": a.kind.value, "eligible_threshold_s": a.eligibility_threshold_s}


def anchor_from_dict(d: dict) -> Anchor:
    """Parse one entry of the anchor-set JSON array."""
    try:
        pos = LocalPosition(float(d["east_m"]), float(d["north_m"]), float(d.get("up_m", 0.0)))
        kind = AnchorKind(d.get("kind", "FIXED"))
        thr = float(d.get("eligible_threshold_s", DEFAULT_ELIGIBILITY_S))
        ident = str(d["id"])
    except (KeyError, ValueError, TypeError) as exc:
        raise DomainError(f"bad anchor entry {d!r}: {exc}") from None
    if kind is AnchorKind.FIXED:
        return Anchor(ident, pos, kind, eligibility_threshold_s=thr)
    return Anchor.parked_car(ident, pos, threshold_s=thr)


def load_anchor_set(text: str) -> list[Anchor]:
    data = json.loads(text)
    if not isinstance(data, list):
        raise DomainError("anchor set must be a JSON array")
    return [anchor_from_dict(d) for d in data]


def dump_anchor_set(anchors: Sequence[Anchor]) -> str:
    return json.dumps([anchor_to_dict(a) for a in anchors], indent=2)
