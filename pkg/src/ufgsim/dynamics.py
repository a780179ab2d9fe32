"""Deterministic flows, adjoint pushforwards and Stratonovich path simulation.

The stochastic model is dX = V0 dt + sqrt(2) sum_i V_i o dB^i; the sqrt(2)
factor lives here in the integrators, never in the stored fields, so that
the generator of the simulated process is exactly V0 + sum_i V_i^2.

Flows of single fields use fixed-step RK4; paths use the stochastic Heun
predictor-corrector, which integrates the Stratonovich form directly.
Ensembles are reproducible: each path consumes its own substream derived
from the master seed by a SplitMix64 mix, so results are bit-identical for
a given (system, x0, T, dt, n_paths, seed) regardless of chunking or
thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .fields import VectorField
from .linalg import svd_rank

SQRT2 = math.sqrt(2.0)

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4B7C15


def splitmix64(index, seed=0):
    """Element `index` of the SplitMix64 sequence started at `seed`.

    Reference finalizer (Steele, Lea, Flood); test vectors for seed 0 are
    frozen in the test suite and in the README.
    """
    z = (seed + (index + 1) * _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def path_seed(master_seed, path_index):
    """Per-path 64-bit substream seed: SplitMix64 sequence element of the master."""
    return splitmix64(path_index, seed=master_seed & _MASK64)


class FlowBlowUp(RuntimeError):
    """An integral curve left the finite range."""

    def __init__(self, time):
        self.time = time
        super().__init__(f"flow state became non-finite near t = {time:.6g}")


@dataclass(frozen=True)
class FlowConfig:
    """Fixed-step RK4 settings for deterministic flows."""

    dt: float = 1e-3
    max_time: float = 1e6

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True)
class SDESystem:
    """Drift V0 and noise fields V1..Vd on R^N (Stratonovich, sqrt(2) noise)."""

    dim: int
    drift: VectorField
    noises: tuple
    name: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.drift.dim != self.dim or any(v.dim != self.dim for v in self.noises):
            raise ValueError("all fields must share the system dimension")
        if len(self.noises) < 1:
            raise ValueError("need at least one noise field")

    @property
    def d(self):
        return len(self.noises)

    def all_fields(self):
        return (self.drift,) + tuple(self.noises)


class NumericField:
    """A pointwise-defined field (e.g. a tabulated drift component).

    Wraps a batched callable X -> V(X); the Jacobian falls back to central
    finite differences, so symbolic fields should be preferred when exact
    linearizations matter.
    """

    def __init__(self, dim, fn, name="", fd_step=1e-6):
        self.dim = dim
        self._fn = fn
        self.name = name
        self.fd_step = fd_step

    def eval_batch(self, X):
        X = np.asarray(X, dtype=float)
        return np.asarray(self._fn(X), dtype=float)

    def __call__(self, x):
        return self.eval_batch(np.asarray(x, dtype=float)[None, :])[0]

    def jacobian_batch(self, X):
        X = np.asarray(X, dtype=float)
        n = self.dim
        out = np.empty(X.shape[:-1] + (n, n), dtype=float)
        with np.errstate(all="ignore"):
            for i in range(n):
                h = self.fd_step * np.maximum(1.0, np.abs(X[..., i]))
                xp = X.copy()
                xm = X.copy()
                xp[..., i] += h
                xm[..., i] -= h
                out[..., :, i] = (self.eval_batch(xp) - self.eval_batch(xm)) / (2 * h[..., None])
        return out


def _as_numeric(fieldlike):
    if hasattr(fieldlike, "eval_batch"):
        return fieldlike
    raise TypeError("expected a VectorField or NumericField")


def _normalize_xt(x, t):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    t = np.broadcast_to(np.asarray(t, dtype=float), (X.shape[0],)).copy()
    return X, t, single


def flow(V, x, t, cfg=None):
    """Integral-curve endpoint e^{tV}(x) by fixed-step RK4.

    Accepts a single point (N,) or a batch (B, N); `t` may be scalar or per
    row.  Negative times integrate backwards.  Raises FlowBlowUp when any
    state leaves the finite range.
    """
    cfg = cfg or FlowConfig()
    V = _as_numeric(V)
    X, t, single = _normalize_xt(x, t)
    tmax = float(np.max(np.abs(t)))
    if tmax > cfg.max_time:
        raise ValueError(f"flow horizon {tmax:.3g} exceeds the configured maximum")
    if tmax == 0.0:
        return X[0].copy() if single else X.copy()
    n_steps = max(1, int(math.ceil(tmax / cfg.dt)))
    h = t / n_steps
    for k in range(n_steps):
        X = _rk4_step(V, X, h)
        if not np.all(np.isfinite(X)):
            raise FlowBlowUp((k + 1) * float(np.max(np.abs(h))))
    return X[0] if single else X


def _rk4_step(V, X, h):
    hc = h[:, None]
    k1 = V.eval_batch(X)
    k2 = V.eval_batch(X + 0.5 * hc * k1)
    k3 = V.eval_batch(X + 0.5 * hc * k2)
    k4 = V.eval_batch(X + hc * k3)
    return X + (hc / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def flow_jacobian(V, x, t, cfg=None, with_endpoint=False):
    """Jacobian of x -> e^{tV}(x), by joint RK4 on the variational equation."""
    cfg = cfg or FlowConfig()
    V = _as_numeric(V)
    X, t, single = _normalize_xt(x, t)
    B, n = X.shape
    J = np.broadcast_to(np.eye(n), (B, n, n)).copy()
    tmax = float(np.max(np.abs(t)))
    if tmax > cfg.max_time:
        raise ValueError(f"flow horizon {tmax:.3g} exceeds the configured maximum")
    n_steps = max(1, int(math.ceil(tmax / cfg.dt))) if tmax > 0 else 0
    h = t / n_steps if n_steps else t
    for k in range(n_steps):
        hc = h[:, None]
        hj = h[:, None, None]
        k1 = V.eval_batch(X)
        K1 = V.jacobian_batch(X) @ J
        x2 = X + 0.5 * hc * k1
        k2 = V.eval_batch(x2)
        K2 = V.jacobian_batch(x2) @ (J + 0.5 * hj * K1)
        x3 = X + 0.5 * hc * k2
        k3 = V.eval_batch(x3)
        K3 = V.jacobian_batch(x3) @ (J + 0.5 * hj * K2)
        x4 = X + hc * k3
        k4 = V.eval_batch(x4)
        K4 = V.jacobian_batch(x4) @ (J + hj * K3)
        X = X + (hc / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        J = J + (hj / 6.0) * (K1 + 2 * K2 + 2 * K3 + K4)
        if not np.all(np.isfinite(X)):
            raise FlowBlowUp((k + 1) * float(np.max(np.abs(h))))
    if with_endpoint:
        return (J[0], X[0]) if single else (J, X)
    return J[0] if single else J


def adjoint_push(V, Y, t, x, cfg=None, consistency_tol=1e-7):
    """(Ad_{tV} Y)(x): push Y through the backward differential of the flow of V.

    Computed two ways, as d(e^{-tV}) at e^{tV}x applied to Y(e^{tV}x) and as
    the inverse forward Jacobian applied to the same vector; the two routes
    must agree to consistency_tol.
    """
    cfg = cfg or FlowConfig()
    V = _as_numeric(V)
    Y = _as_numeric(Y)
    x = np.asarray(x, dtype=float)
    y = flow(V, x, t, cfg)
    vec = Y.eval_batch(y[None, :])[0]
    back = flow_jacobian(V, y, -t, cfg) @ vec
    Jf = flow_jacobian(V, x, t, cfg)
    try:
        alt = np.linalg.solve(Jf, vec)
    except np.linalg.LinAlgError:
        raise RuntimeError("forward flow Jacobian is numerically singular") from None
    err = np.max(np.abs(back - alt))
    if err > consistency_tol * (1.0 + np.max(np.abs(back))):
        raise RuntimeError(
            f"adjoint consistency check failed: routes differ by {err:.3e}"
        )
    return back


def stratonovich_to_ito(system):
    """Ito drift b = V0 + sum_i (DV_i) V_i for the sqrt(2)-noise convention.

    The diffusion part is unchanged (columns sqrt(2) V_i); only the drift
    needs the correction when converting for generator or Fokker-Planck work.
    """
    n = system.dim
    comps = []
    for j in range(n):
        acc = system.drift.components[j]
        for V in system.noises:
            for i in range(n):
                acc = ex.Binary(
                    "add",
                    acc,
                    ex.Binary("mul", V.components[i], ex.differentiate(V.components[j], i)),
                )
        comps.append(ex.simplify(acc))
    return VectorField(n, tuple(comps), name=f"{system.name}-ito-drift")


# ---------------------------------------------------------------------------
# Path ensembles
# ---------------------------------------------------------------------------

@dataclass
class PathEnsemble:
    """Seeded Monte Carlo paths stored on a (possibly strided) time grid.

    `increments` holds the Brownian increments aggregated over each stored
    interval; with stride 1 these are the raw per-step increments with
    variance dt per component.  Regenerating with the same arguments gives
    bit-identical arrays.
    """

    seed: int
    dt: float
    times: np.ndarray
    states: np.ndarray
    increments: np.ndarray
    blown: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.states.shape[0]

    @property
    def dim(self):
        return self.states.shape[2]

    def state_at(self, t):
        """States at the stored time closest to t, plus that grid time."""
        k = int(np.argmin(np.abs(self.times - t)))
        return self.times[k], self.states[:, k, :]

    def write_csv(self, fh, stride=1):
        n = self.dim
        fh.write("path_id,time," + ",".join(f"x{j + 1}" for j in range(n)) + "\n")
        idx = list(range(0, len(self.times), stride))
        if idx[-1] != len(self.times) - 1:
            idx.append(len(self.times) - 1)
        for p in range(self.n_paths):
            for k in idx:
                row = ",".join(repr(float(v)) for v in self.states[p, k])
                fh.write(f"{p},{float(self.times[k])!r},{row}\n")


def _stored_steps(n_steps, stride, store_times=None, dt=None):
    if store_times is not None:
        steps = {0, n_steps}
        for t in store_times:
            steps.add(min(n_steps, max(0, int(round(t / dt)))))
        return np.asarray(sorted(steps), dtype=int)
    idx = list(range(0, n_steps + 1, max(1, stride)))
    if idx[-1] != n_steps:
        idx.append(n_steps)
    return np.asarray(idx, dtype=int)


def simulate_paths(system, x0, T, dt, n_paths, seed, store_stride=1, chunk_size=2048,
                   store_times=None):
    """Stochastic Heun ensemble for dX = V0 dt + sqrt(2) sum V_i o dB^i.

    Paths whose state turns non-finite are frozen at their last finite value
    and flagged; the blow-up count lands in `meta`.  Path p consumes the
    substream seeded by path_seed(seed, p), so any chunking or scheduling
    produces identical output.
    """
    if T <= 0 or dt <= 0 or n_paths < 1:
        raise ValueError("need T > 0, dt > 0, n_paths >= 1")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (system.dim,):
        raise ValueError(f"x0 must have shape ({system.dim},)")
    n_steps = max(1, int(round(T / dt)))
    stored = _stored_steps(n_steps, store_stride, store_times, dt)
    times = stored * dt
    P, N, d = n_paths, system.dim, system.d

    states = np.empty((P, len(stored), N))
    increments = np.zeros((P, len(stored) - 1, d))
    blown = np.zeros(P, dtype=bool)

    stored_pos = {int(s): k for k, s in enumerate(stored)}
    for lo in range(0, P, chunk_size):
        hi = min(P, lo + chunk_size)
        C = hi - lo
        dB = np.empty((C, n_steps, d))
        for p in range(lo, hi):
            rng = np.random.Generator(np.random.PCG64(path_seed(seed, p)))
            dB[p - lo] = rng.standard_normal((n_steps, d)) * math.sqrt(dt)
        X = np.broadcast_to(x0, (C, N)).copy()
        alive = np.ones(C, dtype=bool)
        states[lo:hi, 0] = X
        seg = 0
        for step in range(n_steps):
            Xn = _heun_step(system, X, dB[:, step, :], dt)
            ok = np.all(np.isfinite(Xn), axis=1)
            newly_dead = alive & ~ok
            alive &= ok
            X = np.where(alive[:, None], Xn, X)
            blown[lo:hi] |= newly_dead
            increments[lo:hi, seg, :] += dB[:, step, :]
            pos = stored_pos.get(step + 1)
            if pos is not None:
                states[lo:hi, pos] = X
                seg = min(seg + 1, len(stored) - 2)
    meta = {
        "system": system.name,
        "x0": x0.tolist(),
        "T": float(T),
        "dt": float(dt),
        "n_steps": n_steps,
        "store_stride": int(store_stride),
        "blowups": int(blown.sum()),
    }
    return PathEnsemble(seed, dt, times, states, increments, blown, meta)


def _heun_step(system, X, dB, dt):
    a0 = system.drift.eval_batch(X)
    g0 = np.zeros_like(X)
    for i, V in enumerate(system.noises):
        g0 += V.eval_batch(X) * dB[:, i:i + 1]
    Xp = X + a0 * dt + SQRT2 * g0
    a1 = system.drift.eval_batch(Xp)
    g1 = np.zeros_like(X)
    for i, V in enumerate(system.noises):
        g1 += V.eval_batch(Xp) * dB[:, i:i + 1]
    return X + 0.5 * dt * (a0 + a1) + 0.5 * SQRT2 * (g0 + g1)


def auxiliary_process(ensemble, v0perp, cfg=None):
    """Z_t = e^{-t V0perp}(X_t): undo the drift-orthogonal transport per stored time.

    The backward flow is recomputed from scratch for every stored time (cost
    O(t/dt) each), using the supplied drift-orthogonal field; catalog systems
    provide it in closed form.  Blown-up paths stay flagged and are carried
    through unchanged.
    """
    cfg = cfg or FlowConfig(dt=ensemble.dt)
    Z = np.empty_like(ensemble.states)
    Z[:, 0, :] = ensemble.states[:, 0, :]
    for k in range(1, len(ensemble.times)):
        t = float(ensemble.times[k])
        Z[:, k, :] = flow(v0perp, ensemble.states[:, k, :], -t, cfg)
    meta = dict(ensemble.meta)
    meta["transform"] = "auxiliary-process"
    return PathEnsemble(
        ensemble.seed, ensemble.dt, ensemble.times.copy(), Z,
        ensemble.increments.copy(), ensemble.blown.copy(), meta,
    )


@dataclass(frozen=True)
class FlowLimitResult:
    status: str  # converged | diverged | not_converged | rank_unstable
    point: np.ndarray
    residual: float
    time: float


def flow_limit(v0perp, x, t_max, stall_tol=1e-8, divergence_radius=1e8,
               cfg=None, rank_probe=None):
    """Limit of e^{t V0perp}(x) as t grows, when it exists.

    Integrates until the field norm falls below stall_tol (converged), the
    state norm exceeds divergence_radius (diverged) or t_max is exhausted
    (not_converged).  When rank_probe is given (a callable x -> rank of the
    bracket distribution), a rank change along the curve stops integration
    with status 'rank_unstable': the flow of the orthogonal drift component
    is not trusted across rank-unstable sets.
    """
    cfg = cfg or FlowConfig()
    V = _as_numeric(v0perp)
    y = np.asarray(x, dtype=float).copy()
    t = 0.0
    rank0 = rank_probe(y) if rank_probe is not None else None
    check_every = 20
    res = float(np.linalg.norm(V.eval_batch(y[None, :])[0]))
    if res < stall_tol:
        return FlowLimitResult("converged", y, res, 0.0)
    Y = y[None, :]
    h = np.array([cfg.dt])
    steps = 0
    while t < t_max:
        Y = _rk4_step(V, Y, h)
        t += cfg.dt
        steps += 1
        if not np.all(np.isfinite(Y)):
            return FlowLimitResult("diverged", Y[0], float("inf"), t)
        if steps % check_every == 0 or t >= t_max:
            res = float(np.linalg.norm(V.eval_batch(Y)[0]))
            if res < stall_tol:
                return FlowLimitResult("converged", Y[0], res, t)
            if float(np.linalg.norm(Y[0])) > divergence_radius:
                return FlowLimitResult("diverged", Y[0], res, t)
            if rank_probe is not None and rank_probe(Y[0]) != rank0:
                return FlowLimitResult("rank_unstable", Y[0], res, t)
    res = float(np.linalg.norm(V.eval_batch(Y)[0]))
    return FlowLimitResult("not_converged", Y[0], res, t)


def rank_along_path(times, states, table, rtol=1e-8):
    """Tolerance rank of the drift-augmented frame at each stored time.

    `states` is (T, N) for one path or (P, T, N) for an ensemble; returns a
    list of (t, rank) pairs, or an array (P, T) in the ensemble case.
    """
    states = np.asarray(states, dtype=float)
    frames = table.evaluate_frame_batch("brackets+drift", states)
    ranks = svd_rank(frames, rtol=rtol)
    if states.ndim == 2:
        return list(zip(np.asarray(times, dtype=float).tolist(), np.atleast_1d(ranks).tolist()))
    return ranks
