"""Cross-plane trajectories in motion-state space.

A trajectory is carried by two quintic splines over time, one for the world
yaw angle and one for the forward arc length. In-plane positions are
recovered by Simpson quadrature of sdot * (cos, sin)(theta - delta) from the
part's entry point, so every sample lies on its plane by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import solve_banded

from .errors import OutOfDomain, SingularSystem
from .geometry import Transform

N_QUAD = 16

_QUAD_PHI = np.arange(N_QUAD + 1) / N_QUAD
_QUAD_W = np.ones(N_QUAD + 1)
_QUAD_W[1:-1:2] = 4.0
_QUAD_W[2:-1:2] = 2.0

# _PERM[d, k] = k!/(k-d)!, the derivative scale of t**k; zero when k < d
_PERM = np.zeros((6, 6))
for _d in range(6):
    for _k in range(_d, 6):
        _PERM[_d, _k] = np.prod(np.arange(_k - _d + 1, _k + 1), initial=1.0)
_POW = np.maximum(np.arange(6)[None, :] - np.arange(6)[:, None], 0)

_BAND_LOWER = 7
_BAND_UPPER = 3


def tau_to_duration(tau):
    """Map an unconstrained scalar to a strictly positive duration."""
    tau = np.asarray(tau, dtype=float)
    grow = 0.5 * tau**2 + tau + 1.0
    shrink = 2.0 / (tau**2 - 2.0 * tau + 2.0)
    out = np.where(tau > 0.0, grow, shrink)
    return out if out.ndim else float(out)


def duration_to_tau(duration):
    """Exact inverse of tau_to_duration for positive durations."""
    duration = np.asarray(duration, dtype=float)
    grow = np.sqrt(np.maximum(2.0 * duration - 1.0, 0.0)) - 1.0
    inner = 2.0 / np.maximum(duration, 1e-300) - 1.0
    shrink = 1.0 - np.sqrt(np.maximum(inner, 0.0))
    out = np.where(duration >= 1.0, grow, shrink)
    return out if out.ndim else float(out)


def tau_to_duration_grad(tau):
    """Derivative of tau_to_duration; continuous across the branch point."""
    tau = np.asarray(tau, dtype=float)
    denom = tau**2 - 2.0 * tau + 2.0
    out = np.where(tau > 0.0, tau + 1.0, (4.0 - 4.0 * tau) / denom**2)
    return out if out.ndim else float(out)


def _eval_rows(coef: np.ndarray, t: np.ndarray, order: int) -> np.ndarray:
    """Evaluate per-row polynomials at per-row times; coef is (n, 6)."""
    scaled = coef * _PERM[order]
    acc = np.zeros_like(t)
    for j in range(5, order - 1, -1):
        acc = acc * t + scaled[:, j]
    return acc


def _eval_nodes(coef: np.ndarray, nodes: np.ndarray, order: int) -> np.ndarray:
    """Evaluate (n, 6) polynomials on an (n, k) node grid by Horner."""
    scaled = coef * _PERM[order]
    acc = np.zeros_like(nodes)
    for j in range(5, order - 1, -1):
        acc = acc * nodes + scaled[:, j, None]
    return acc


def _eval_scalar(coef: np.ndarray, t: float, order: int) -> float:
    return float(np.sum(coef * _PERM[order] * t ** _POW[order]))


def _system_matrix(durations: np.ndarray) -> np.ndarray:
    """Square interpolation system for one spline channel.

    Row layout: three start-state rows, six rows per interior joint (value
    on the left, derivative matches of order 1..4, value on the right),
    three end-state rows. The bandwidth is fixed by this ordering.
    """
    m = len(durations)
    n = 6 * m
    a = np.zeros((n, n))
    a[0, 0] = 1.0
    a[1, 1] = 1.0
    a[2, 2] = 2.0
    for j in range(m - 1):
        r = 3 + 6 * j
        c = 6 * j
        block = _PERM * durations[j] ** _POW
        a[r, c : c + 6] = block[0]
        for d in range(1, 5):
            a[r + d, c : c + 6] = block[d]
            a[r + d, c + 6 + d] = -_PERM[d, d]
        a[r + 5, c + 6] = 1.0
    block = _PERM * durations[-1] ** _POW
    for d in range(3):
        a[n - 3 + d, n - 6 :] = block[d]
    return a


def _to_banded(a: np.ndarray, lower: int, upper: int) -> np.ndarray:
    n = a.shape[0]
    ab = np.zeros((lower + upper + 1, n))
    for offset in range(-lower, upper + 1):
        diag = np.diagonal(a, offset)
        if offset >= 0:
            ab[upper - offset, offset : offset + len(diag)] = diag
        else:
            ab[upper - offset, : len(diag)] = diag
    return ab


def _solve_system(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = _to_banded(a, _BAND_LOWER, _BAND_UPPER)
    return solve_banded((_BAND_LOWER, _BAND_UPPER), ab, b)


def _solve_system_transposed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = _to_banded(a.T, _BAND_UPPER, _BAND_LOWER)
    return solve_banded((_BAND_UPPER, _BAND_LOWER), ab, b)


@dataclass(frozen=True)
class MsSpline:
    """Piecewise-quintic motion-state spline with C4 interior joints.

    Columns of every state array are (theta, s). Coefficients are stored in
    ascending powers of the segment-local time.
    """

    durations: np.ndarray  # (M,)
    coef_theta: np.ndarray  # (M, 6)
    coef_s: np.ndarray  # (M, 6)
    waypoints: np.ndarray  # (M-1, 2)
    start_state: np.ndarray  # (3, 2) rows: value, rate, acceleration
    end_state: np.ndarray  # (3, 2)

    @cached_property
    def knot_times(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.durations)])

    @property
    def duration(self) -> float:
        return float(self.knot_times[-1])

    @property
    def segment_count(self) -> int:
        return len(self.durations)

    def locate(self, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        knots = self.knot_times
        idx = np.searchsorted(knots, ts, side="right") - 1
        idx = np.clip(idx, 0, len(self.durations) - 1)
        return idx, ts - knots[idx]

    def sample(self, ts: np.ndarray, order: int = 0) -> np.ndarray:
        """Values (or a time derivative) of sigma at times ts; (n, 2)."""
        ts = np.asarray(ts, dtype=float)
        idx, local = self.locate(ts)
        theta = _eval_rows(self.coef_theta[idx], local, order)
        s = _eval_rows(self.coef_s[idx], local, order)
        return np.stack([theta, s], axis=1)

    def value(self, t: float) -> np.ndarray:
        return self.sample(np.array([t]))[0]

    def derivative(self, t: float, order: int = 1) -> np.ndarray:
        return self.sample(np.array([t]), order=order)[0]


def solve_coefficients(
    waypoints: np.ndarray,
    durations: np.ndarray,
    start_state: np.ndarray,
    end_state: np.ndarray,
    system: np.ndarray | None = None,
) -> MsSpline:
    """Interpolate waypoints with the jerk-minimizing quintic chain.

    The square banded system (value, C1..C4 joint continuity, boundary
    value/rate/acceleration) has the minimum-jerk interpolant as its unique
    solution, so no explicit optimization is needed.
    """
    durations = np.asarray(durations, dtype=float)
    waypoints = np.asarray(waypoints, dtype=float).reshape(-1, 2)
    if np.any(durations <= 0.0) or not np.all(np.isfinite(durations)):
        raise SingularSystem("segment durations must be positive")
    m = len(durations)
    if len(waypoints) != m - 1:
        raise SingularSystem(
            f"{m} segments need {m - 1} waypoints, got {len(waypoints)}"
        )
    b = np.zeros((6 * m, 2))
    b[0:3] = start_state
    for j in range(m - 1):
        b[3 + 6 * j] = waypoints[j]
        b[3 + 6 * j + 5] = waypoints[j]
    b[-3:] = end_state
    if system is None:
        system = _system_matrix(durations)
    coef = _solve_system(system, b)
    return MsSpline(
        durations=durations,
        coef_theta=coef[:, 0].reshape(m, 6),
        coef_s=coef[:, 1].reshape(m, 6),
        waypoints=waypoints,
        start_state=np.asarray(start_state, dtype=float),
        end_state=np.asarray(end_state, dtype=float),
    )


def backpropagate_spline(
    spline: MsSpline,
    grad_theta: np.ndarray,
    grad_s: np.ndarray,
    system: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pull a coefficient-space gradient back to the interpolation data.

    grad_theta and grad_s are (M, 6) arrays of partial derivatives of some
    scalar objective with respect to the spline coefficients. Returns the
    objective's gradient with respect to the interior waypoints (M-1, 2),
    the segment durations (M,), and the end boundary state (3, 2; rows are
    value, rate, acceleration), using one adjoint solve per channel. An
    already-built interpolation matrix may be passed to skip rebuilding.
    """
    m = spline.segment_count
    a = _system_matrix(spline.durations) if system is None else system
    adj = _solve_system_transposed(
        a, np.stack([grad_theta.ravel(), grad_s.ravel()], axis=1)
    )
    joint = adj[3 : 6 * m - 3].reshape(m - 1, 6, 2)
    grad_waypoints = joint[:, 0] + joint[:, 5]

    # Rows holding p^(d)(T_j) shift with T_j at the rate p^(d+1)(T_j).
    grad_durations = np.zeros(m)
    t_end = spline.durations[:-1]
    for channel, coef in ((0, spline.coef_theta), (1, spline.coef_s)):
        for d in range(5):
            rates = _eval_rows(coef[:-1], t_end, d + 1)
            grad_durations[:-1] -= joint[:, d, channel] * rates
        for d in range(3):
            rate = _eval_scalar(coef[-1], spline.durations[-1], d + 1)
            grad_durations[-1] -= adj[6 * m - 3 + d, channel] * rate
    return grad_waypoints, grad_durations, adj[6 * m - 3 :].copy()


def _quadrature(
    coef_theta: np.ndarray,
    coef_s: np.ndarray,
    spans: np.ndarray,
    delta_theta: float,
) -> np.ndarray:
    """Simpson integrals of sdot*(cos, sin)(theta - delta) over [0, span]."""
    nodes = spans[:, None] * _QUAD_PHI
    theta = _eval_nodes(coef_theta, nodes, 0) - delta_theta
    sdot = _eval_nodes(coef_s, nodes, 1)
    weight = spans / (3.0 * N_QUAD)
    x = weight * ((sdot * np.cos(theta)) @ _QUAD_W)
    y = weight * ((sdot * np.sin(theta)) @ _QUAD_W)
    return np.stack([x, y], axis=1)


@dataclass(frozen=True)
class TrajectoryPart:
    """The single-plane portion of a trajectory, in plane coordinates."""

    plane: int
    delta_theta: float
    start_local: np.ndarray
    spline: MsSpline
    transform: Transform

    @property
    def segment_count(self) -> int:
        return self.spline.segment_count

    def positions(self, ts: np.ndarray) -> np.ndarray:
        """Integrated in-plane positions at times ts; (n, 2)."""
        ts = np.asarray(ts, dtype=float)
        spline = self.spline
        full = _quadrature(
            spline.coef_theta, spline.coef_s, spline.durations, self.delta_theta
        )
        prefix = np.concatenate([np.zeros((1, 2)), np.cumsum(full, axis=0)])
        idx, local = spline.locate(ts)
        partial = _quadrature(
            spline.coef_theta[idx],
            spline.coef_s[idx],
            local,
            self.delta_theta,
        )
        return self.start_local + prefix[idx] + partial


def integrate_position(part: TrajectoryPart, t: float) -> np.ndarray:
    """In-plane position of the part at time t from its start point."""
    return part.positions(np.array([t]))[0]


def parts_from_chain(
    spline: MsSpline,
    counts: list[int],
    metas: list[tuple[int, float, Transform, np.ndarray]],
) -> list[TrajectoryPart]:
    """Slice one global spline chain into per-plane trajectory parts.

    counts gives the number of polynomial segments per part; metas carries
    (plane index, delta_theta, transform, start_local) for each part. Each
    slice keeps the chain's own coefficients, so it is exactly the
    minimum-jerk interpolant of its interior waypoints under the boundary
    state the chain attains at the slice instants.
    """
    bounds = np.concatenate([[0], np.cumsum(counts)])
    if bounds[-1] != spline.segment_count or len(counts) != len(metas):
        raise ValueError("part segment counts do not match the chain")
    parts = []
    for (plane, delta_theta, transform, start_local), lo, hi in zip(
        metas, bounds[:-1], bounds[1:]
    ):
        coef_t = spline.coef_theta[lo:hi]
        coef_s = spline.coef_s[lo:hi]
        durations = spline.durations[lo:hi]
        t_end = durations[-1]
        start_state = np.array(
            [
                [coef_t[0, 0], coef_s[0, 0]],
                [coef_t[0, 1], coef_s[0, 1]],
                [2.0 * coef_t[0, 2], 2.0 * coef_s[0, 2]],
            ]
        )
        end_state = np.array(
            [
                [_eval_scalar(coef_t[-1], t_end, d), _eval_scalar(coef_s[-1], t_end, d)]
                for d in range(3)
            ]
        )
        part_spline = MsSpline(
            durations=durations.copy(),
            coef_theta=coef_t.copy(),
            coef_s=coef_s.copy(),
            waypoints=np.stack([coef_t[1:, 0], coef_s[1:, 0]], axis=1),
            start_state=start_state,
            end_state=end_state,
        )
        parts.append(
            TrajectoryPart(
                plane=plane,
                delta_theta=delta_theta,
                start_local=np.asarray(start_local, dtype=float),
                spline=part_spline,
                transform=transform,
            )
        )
    return parts


@dataclass(frozen=True)
class Crossing:
    """Where the trajectory switches planes on an intersection segment."""

    eta_star: float
    world_point: np.ndarray


@dataclass(frozen=True)
class WorldState:
    position: np.ndarray
    yaw: float
    v: float
    omega: float
    plane: int


@dataclass(frozen=True)
class StateSamples:
    times: np.ndarray
    positions: np.ndarray  # (n, 3)
    yaw: np.ndarray
    v: np.ndarray
    omega: np.ndarray
    plane: np.ndarray


@dataclass(frozen=True)
class CrossPlaneTrajectory:
    """An ordered chain of single-plane parts joined at crossings."""

    parts: list[TrajectoryPart]
    crossings: list[Crossing]

    @cached_property
    def part_ends(self) -> np.ndarray:
        return np.cumsum([p.spline.duration for p in self.parts])

    @property
    def duration(self) -> float:
        return float(self.part_ends[-1])

    def _part_index(self, t: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.part_ends, t, side="right")
        return np.minimum(idx, len(self.parts) - 1)

    def world_state(self, t: float) -> WorldState:
        if not 0.0 <= t <= self.duration:
            raise OutOfDomain(
                f"time {t:.6f} outside [0, {self.duration:.6f}]"
            )
        k = int(self._part_index(np.asarray(t)))
        t0 = 0.0 if k == 0 else self.part_ends[k - 1]
        part = self.parts[k]
        local_t = np.array([t - t0])
        xy = part.positions(local_t)[0]
        sigma = part.spline.sample(local_t)[0]
        rate = part.spline.sample(local_t, order=1)[0]
        position = part.transform.to_world(np.array([xy[0], xy[1], 0.0]))
        return WorldState(
            position=position,
            yaw=float(sigma[0]),
            v=float(rate[1]),
            omega=float(rate[0]),
            plane=part.plane,
        )

    def sample_states(self, ts: np.ndarray) -> StateSamples:
        """Vectorized state sampling; ts may be in any order."""
        ts = np.asarray(ts, dtype=float)
        if np.any(ts < 0.0) or np.any(ts > self.duration):
            raise OutOfDomain("sample times outside the trajectory domain")
        idx = self._part_index(ts)
        offsets = np.concatenate([[0.0], self.part_ends[:-1]])
        positions = np.zeros((len(ts), 3))
        yaw = np.zeros(len(ts))
        v = np.zeros(len(ts))
        omega = np.zeros(len(ts))
        for k, part in enumerate(self.parts):
            mask = idx == k
            if not mask.any():
                continue
            local_t = ts[mask] - offsets[k]
            xy = part.positions(local_t)
            sigma = part.spline.sample(local_t)
            rate = part.spline.sample(local_t, order=1)
            lifted = np.column_stack([xy, np.zeros(len(xy))])
            positions[mask] = part.transform.to_world(lifted)
            yaw[mask] = sigma[:, 0]
            v[mask] = rate[:, 1]
            omega[mask] = rate[:, 0]
        return StateSamples(
            times=ts,
            positions=positions,
            yaw=yaw,
            v=v,
            omega=omega,
            plane=np.array([self.parts[k].plane for k in idx]),
        )


def world_state(traj: CrossPlaneTrajectory, t: float) -> WorldState:
    """World-frame pose and rates of the trajectory at time t."""
    return traj.world_state(t)
