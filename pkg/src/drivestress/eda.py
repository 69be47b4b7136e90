"""Electrodermal activity decomposition and SCR features.

The skin-conductance signal is split into a smooth tonic level, a phasic
component driven by a sparse non-negative sudomotor driver, and a residual,
by solving one convex program per recording:

    minimize  0.5*||F p + B l + C d - y||^2 + alpha*sum(p) + 0.5*gamma*||l||^2
    subject to p >= 0

where F convolves the driver with a biexponential (Bateman) impulse
response, B is a cubic B-spline basis (10 s knots) for the tonic curve, and
C carries an offset plus linear drift. The Bateman response is an AR(2)
filter, so the program is solved over the phasic signal itself with a banded
non-negativity constraint: a primal-dual interior-point method whose Newton
systems are pentadiagonal plus a low-rank spline block, O(n) per step no
matter how dense the active driver. Sparse supports get an exact active-set
polish afterwards, so the returned solution carries a Fenchel-dual
optimality certificate (duality gap) and a KKT residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps
from scipy.interpolate import BSpline
from scipy.linalg import cho_solve_banded, cholesky_banded

from .errors import InvalidIntervalError, SolverConvergenceError
from .signals import EDA, SignalTrace, downsample, linear_slope

TAU_FAST_S = 0.7     # Bateman rise time constant
TAU_SLOW_S = 2.0     # Bateman decay time constant
ALPHA = 8e-4         # driver sparsity weight
GAMMA = 1e-2         # tonic spline shrinkage weight
KNOT_SPACING_S = 10.0
SOLVER_RATE_HZ = 25.0
MAX_ITERATIONS = 10000
GAP_TOL = 1e-8       # certificate target for the relative duality gap on sparse solves
KKT_TOL = 1e-6       # KKT residual below which the solve counts as converged


def bateman_kernel(sample_rate_hz: float, n: int,
                   tau_fast: float = TAU_FAST_S, tau_slow: float = TAU_SLOW_S) -> np.ndarray:
    """Discrete Bateman impulse response of length n, normalized to unit peak.

    k[t] = exp(-t/tau_slow) - exp(-t/tau_fast) sampled at the given rate;
    a unit driver impulse therefore produces a pulse of peak amplitude 1.
    """
    t = np.arange(n) / sample_rate_hz
    k = np.exp(-t / tau_slow) - np.exp(-t / tau_fast)
    peak = float(np.max(k))
    if peak <= 0:
        raise InvalidIntervalError("Bateman kernel is degenerate; check time constants")
    return k / peak


class _BatemanOperator:
    """Exact O(n) application of the kernel convolution and its transpose."""

    def __init__(self, sample_rate_hz: float, n: int,
                 tau_fast: float = TAU_FAST_S, tau_slow: float = TAU_SLOW_S):
        self.n = n
        self.e_fast = np.exp(-1.0 / (sample_rate_hz * tau_fast))
        self.e_slow = np.exp(-1.0 / (sample_rate_hz * tau_slow))
        t = np.arange(n) / sample_rate_hz
        self.peak = float(np.max(np.exp(-t / tau_slow) - np.exp(-t / tau_fast)))

    def apply(self, p: np.ndarray) -> np.ndarray:
        slow = sps.lfilter([1.0], [1.0, -self.e_slow], p)
        fast = sps.lfilter([1.0], [1.0, -self.e_fast], p)
        return (slow - fast) / self.peak

    def apply_t(self, v: np.ndarray) -> np.ndarray:
        # F is lower-triangular Toeplitz, so F^T flips time on both sides.
        return self.apply(v[::-1])[::-1]

    def column(self, i: int, kernel: np.ndarray) -> np.ndarray:
        col = np.zeros(self.n)
        col[i:] = kernel[: self.n - i]
        return col


def _spline_basis(t: np.ndarray, spacing_s: float) -> np.ndarray:
    """Clamped cubic B-spline design matrix with knots every spacing_s."""
    t0, t1 = float(t[0]), float(t[-1])
    interior = np.arange(t0 + spacing_s, t1 - 1e-9, spacing_s)
    kv = np.concatenate([[t0] * 4, interior, [t1] * 4])
    dm = BSpline.design_matrix(np.clip(t, t0, t1), kv, 3)
    return np.asarray(dm.todense(), dtype=np.float64)


@dataclass
class EdaSolveDiagnostics:
    objective: float
    duality_gap: float       # absolute Fenchel gap at the returned point
    relative_gap: float
    kkt_residual: float
    iterations: int
    converged: bool


@dataclass
class EdaDecomposition:
    """Tonic/phasic split of a conductance trace.

    tonic, phasic, residual are at the input rate and sum to the input;
    sparse_driver lives at driver_rate_hz (the solve rate).
    """

    tonic: SignalTrace
    phasic: SignalTrace
    residual: SignalTrace
    sparse_driver: np.ndarray
    driver_rate_hz: float
    diagnostics: EdaSolveDiagnostics
    tonic_solver: np.ndarray
    phasic_solver: np.ndarray

    def driver_times(self) -> np.ndarray:
        return self.tonic.start_time_s + np.arange(len(self.sparse_driver)) / self.driver_rate_hz


@dataclass
class ScrEvent:
    onset_time_s: float
    peak_time_s: float
    amplitude_us: float
    rise_time_s: float


class _ReducedSystem:
    """Support-indexed normal equations with an incrementally maintained Gram.

    Variables are (p_S, l, d) for the current support S; solving uses a
    jittered Cholesky plus two iterative-refinement sweeps so the returned
    stationarity residual sits near machine precision even when adjacent
    kernel columns make the Gram badly conditioned.
    """

    def __init__(self, kernel, B, C, y, alpha, gamma, n):
        self.kernel = kernel
        self.n = n
        self.alpha = alpha
        self.BC = np.column_stack([B, C])
        self.tail_reg = np.concatenate([np.full(B.shape[1], gamma), np.zeros(C.shape[1])])
        self.BCtBC = self.BC.T @ self.BC
        self.BCty = self.BC.T @ y
        self.y = y
        self.support = np.zeros(0, dtype=int)
        self.Fcols = np.zeros((n, 0))
        self.KtK = np.zeros((0, 0))
        self.KtBC = np.zeros((0, self.BC.shape[1]))
        self.Kty = np.zeros(0)

    def _column(self, i: int) -> np.ndarray:
        col = np.zeros(self.n)
        col[i:] = self.kernel[: self.n - i]
        return col

    def add(self, indices: np.ndarray) -> None:
        if len(indices) == 0:
            return
        new = np.column_stack([self._column(int(i)) for i in indices])
        cross = self.Fcols.T @ new
        self.KtK = np.block([[self.KtK, cross], [cross.T, new.T @ new]])
        self.KtBC = np.vstack([self.KtBC, new.T @ self.BC])
        self.Kty = np.concatenate([self.Kty, new.T @ self.y])
        self.Fcols = np.hstack([self.Fcols, new])
        self.support = np.concatenate([self.support, indices])

    def remove(self, mask: np.ndarray) -> None:
        keep = ~mask
        self.support = self.support[keep]
        self.Fcols = self.Fcols[:, keep]
        self.KtK = self.KtK[np.ix_(keep, keep)]
        self.KtBC = self.KtBC[keep]
        self.Kty = self.Kty[keep]

    def solve(self):
        s = len(self.support)
        tail = len(self.tail_reg)
        A = np.zeros((s + tail, s + tail))
        A[:s, :s] = self.KtK
        A[:s, s:] = self.KtBC
        A[s:, :s] = self.KtBC.T
        A[s:, s:] = self.BCtBC + np.diag(self.tail_reg)
        rhs = np.concatenate([self.Kty - self.alpha, self.BCty])
        base = float(np.mean(np.diag(A))) or 1.0
        cf = None
        for jitter in (0.0, 1e-12, 1e-10, 1e-8):
            try:
                cf = np.linalg.cholesky(A + jitter * base * np.eye(A.shape[0]))
                break
            except np.linalg.LinAlgError:
                continue
        if cf is None:
            z = np.linalg.lstsq(A, rhs, rcond=1e-10)[0]
        else:
            z = np.linalg.solve(cf.T, np.linalg.solve(cf, rhs))
            for _ in range(2):  # refinement against the unjittered system
                resid = rhs - A @ z
                z = z + np.linalg.solve(cf.T, np.linalg.solve(cf, resid))
        nb = tail - 2
        return z[:s], z[s:s + nb], z[s + nb:]


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    """Largest step in [0, 1] keeping v + step*dv non-negative."""
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def _solve_qp(y, F: _BatemanOperator, B, C, alpha, gamma, max_iterations, gap_tol):
    """Interior-point solve + active-set polish. Returns (p, l, d, diagnostics).

    gap_tol sets the complementarity target (the duality gap is about
    n times the barrier parameter); convergence itself is judged by the
    KKT residual of the returned point.
    """
    n = len(y)
    nb = B.shape[1]

    def model(p, l, d):
        return F.apply(p) + B @ l + C @ d

    def objective(p, l, d):
        r = model(p, l, d) - y
        return 0.5 * float(r @ r) + alpha * float(np.sum(p)) + 0.5 * gamma * float(l @ l)

    # Pseudoinverse pieces for projecting the dual candidate onto null(C^T).
    CtC_inv = np.linalg.inv(C.T @ C)

    def dual_gap(p, l, d):
        r = y - model(p, l, d)
        u = r - C @ (CtC_inv @ (C.T @ r))
        ftu = F.apply_t(u)
        m = float(np.max(ftu)) if n else 0.0
        if m > alpha > 0:
            u = u * (alpha / m)
        g = float(u @ y) - 0.5 * float(u @ u) - float((B.T @ u) @ (B.T @ u)) / (2.0 * gamma)
        f = objective(p, l, d)
        return f, f - g

    def kkt_residual(p, l, d):
        r = model(p, l, d) - y
        gp = F.apply_t(r) + alpha
        gl = B.T @ r + gamma * l
        gd = C.T @ r
        comp = float(np.max(np.abs(np.minimum(p, gp)))) if n else 0.0
        return max(comp, float(np.max(np.abs(gl))), float(np.max(np.abs(gd))))

    # Re-parametrize through the AR(2) structure of the Bateman response:
    # q = F p obeys q[i] = b1 q[i-1] + b2 q[i-2] + cp p[i-1] with q[0] = 0,
    # so solving over u = q[1:] turns the data term into identity-plus-low-
    # rank and the driver constraint into a banded inequality G u >= 0. The
    # last driver sample never reaches the model (the kernel starts at zero)
    # and is fixed at its optimum, zero.
    b1 = F.e_slow + F.e_fast
    b2 = -F.e_slow * F.e_fast
    cp = (F.e_slow - F.e_fast) / F.peak
    nm = n - 1
    c2 = cp * cp

    def g_mul(u):
        out = u.copy()
        out[1:] -= b1 * u[:-1]
        out[2:] -= b2 * u[:-2]
        return out / cp

    def gt_mul(v):
        out = v.copy()
        out[:-1] -= b1 * v[1:]
        out[:-2] -= b2 * v[2:]
        return out / cp

    W = np.column_stack([B[1:], C[1:]])
    m = W.shape[1]
    Q = np.zeros((m, m))
    Q[:nb, :nb] = B.T @ B + gamma * np.eye(nb)
    Q[:nb, nb:] = B.T @ C
    Q[nb:, :nb] = C.T @ B
    Q[nb:, nb:] = C.T @ C
    gt1 = gt_mul(np.ones(nm))
    yscale = max(1.0, float(np.max(np.abs(y))))

    def penta_mul(ab, x):
        flat = x.ndim == 1
        xv = x[:, None] if flat else x
        out = ab[0][:, None] * xv
        out[1:] += ab[1, :-1][:, None] * xv[:-1]
        out[:-1] += ab[1, :-1][:, None] * xv[1:]
        out[2:] += ab[2, :-2][:, None] * xv[:-2]
        out[:-2] += ab[2, :-2][:, None] * xv[2:]
        return out[:, 0] if flat else out

    def u_block_solver(weights):
        # M = I + G^T diag(weights) G is pentadiagonal and SPD, but the
        # weights span many orders of magnitude late in the solve, so the
        # factorization gets an escalating diagonal lift plus one refinement
        # pass against the unlifted system.
        if nm < 3:
            G = np.zeros((nm, nm))
            for j in range(nm):
                G[j, j] = 1.0 / cp
                if j >= 1:
                    G[j, j - 1] = -b1 / cp
                if j >= 2:
                    G[j, j - 2] = -b2 / cp
            M = np.eye(nm) + G.T @ (weights[:, None] * G)
            return lambda rhs: np.linalg.solve(M, rhs)
        ab = np.zeros((3, nm))
        ab[0] = 1.0 + weights / c2
        ab[0, :-1] += b1 * b1 * weights[1:] / c2
        ab[0, :-2] += b2 * b2 * weights[2:] / c2
        ab[1, : nm - 1] = -b1 * weights[1:] / c2
        ab[1, : nm - 2] += b1 * b2 * weights[2:] / c2
        ab[2, : nm - 2] = -b2 * weights[2:] / c2
        base = float(np.max(ab[0]))
        for lift in (0.0, 1e-13, 1e-11, 1e-9, 1e-7):
            abj = ab.copy()
            abj[0] += lift * base
            try:
                cb = cholesky_banded(abj, lower=True)
            except np.linalg.LinAlgError:
                continue

            def solve(rhs, cb=cb, lifted=lift > 0.0):
                x = cho_solve_banded((cb, True), rhs)
                if lifted:
                    x = x + cho_solve_banded((cb, True), rhs - penta_mul(ab, x))
                return x

            return solve
        raise SolverConvergenceError(
            "banded Newton system could not be factorized",
            iterations=iterations, duality_gap=float("nan"),
        )

    u = np.zeros(nm)
    ld = np.zeros(m)
    s = np.full(nm, yscale)
    z = np.full(nm, max(alpha, 1e-3))
    iterations = 0
    feas_tol = 1e-7 * yscale
    mu_tol = gap_tol * yscale * yscale / max(nm, 1)
    prev_mu = np.inf
    stall = 0
    best_feas = (np.inf, u, ld)
    best_kkt = (np.inf, u, ld)
    for _ in range(min(100, max_iterations)):
        iterations += 1
        fit = np.concatenate([[0.0], u]) + B @ ld[:nb] + C @ ld[nb:] - y
        rd_u = fit[1:] + alpha * gt1 - gt_mul(z)
        rd_ld = np.concatenate([B.T @ fit + gamma * ld[:nb], C.T @ fit])
        rp = g_mul(u) - s
        mu = float(s @ z) / nm
        stall = stall + 1 if mu > 0.5 * prev_mu else 0
        prev_mu = mu
        feas = max(float(np.max(np.abs(rd_u))), float(np.max(np.abs(rd_ld))),
                   float(np.max(np.abs(rp))))
        score = max(feas / yscale, mu / (yscale * yscale))
        if score < best_feas[0]:
            best_feas = (score, u.copy(), ld.copy())
        if feas <= feas_tol and (mu <= mu_tol or stall >= 3):
            # The interior-point residuals are proxies; exit on the actual
            # KKT residual of the clipped driver, and keep the best iterate
            # seen since steps past the numerical floor only thrash.
            cand = np.zeros(n)
            cand[:nm] = np.maximum(g_mul(u), 0.0)
            know = kkt_residual(cand, ld[:nb], ld[nb:])
            if know < best_kkt[0]:
                best_kkt = (know, u.copy(), ld.copy())
            if know <= 0.2 * KKT_TOL or stall >= 8:
                break
        msolve = u_block_solver(z / s)
        xw = msolve(W)
        schur = Q - W.T @ xw

        def newton(rc):
            rhs_u = -(rd_u + gt_mul((rc + z * rp) / s))
            x0 = msolve(rhs_u)
            dld = np.linalg.solve(schur, -rd_ld - W.T @ x0)
            du = x0 - xw @ dld
            ds = g_mul(du) + rp
            dz = -(rc + z * ds) / s
            return du, dld, ds, dz

        du_a, dld_a, ds_a, dz_a = newton(s * z)
        mu_aff = float((s + _max_step(s, ds_a) * ds_a)
                       @ (z + _max_step(z, dz_a) * dz_a)) / nm
        sigma = min((mu_aff / mu) ** 3, 1.0) if mu > 0 else 0.0
        du, dld, ds, dz = newton(s * z + ds_a * dz_a - sigma * mu)
        eta = 0.99 if mu > 1e4 * mu_tol else 0.99999
        ap = eta * _max_step(s, ds)
        ad = eta * _max_step(z, dz)
        u += ap * du
        ld += ap * dld
        s += ap * ds
        z += ad * dz

    _, u, ld = best_kkt if np.isfinite(best_kkt[0]) else best_feas
    p = np.zeros(n)
    p[:nm] = np.maximum(g_mul(u), 0.0)
    l = ld[:nb].copy()
    d = ld[nb:].copy()

    # Active-set polish on sparse supports: exact solve on the support, then
    # exchange until the off-support gradient is clean, which tightens the
    # dual certificate to machine precision. Dense supports (noise-dominated
    # traces) keep the interior-point solution, already inside the KKT
    # tolerance. Columns of F come from the exact kernel over the full
    # horizon (the operator applied to a unit impulse).
    e0 = np.zeros(n)
    e0[0] = 1.0
    kernel = F.apply(e0)
    support = np.flatnonzero(p > 1e-6 * max(1.0, float(np.max(p, initial=0.0))))
    add_tol = 1e-7  # off-support gradients above -add_tol satisfy the KKT target

    if len(support) <= 600:
        system = _ReducedSystem(kernel, B, C, y, alpha, gamma, n)
        system.add(support)
        for _round in range(200):
            iterations += 1
            # Inner non-negativity pruning on the support.
            for _inner in range(400):
                ps, l, d = system.solve()
                neg = ps < 0
                if not np.any(neg):
                    break
                system.remove(neg)
            p = np.zeros(n)
            if len(system.support):
                p[system.support] = np.maximum(ps, 0.0)
            r = model(p, l, d) - y
            gp = F.apply_t(r) + alpha
            off = np.ones(n, dtype=bool)
            off[system.support] = False
            viol = np.flatnonzero(off & (gp < -add_tol))
            if len(viol) == 0:
                break
            # Add the most violating indices, spaced out so the new columns
            # do not form ill-conditioned adjacent runs.
            order = viol[np.argsort(gp[viol])]
            added: list[int] = []
            for idx in order:
                if len(added) >= 32:
                    break
                if all(abs(idx - a) > 2 for a in added):
                    added.append(int(idx))
            system.add(np.asarray(added, dtype=int))

    f, gap = dual_gap(p, l, d)
    rel_gap = abs(gap) / max(1.0, abs(f))
    kkt = kkt_residual(p, l, d)
    converged = kkt <= KKT_TOL
    if not converged:
        raise SolverConvergenceError(
            f"EDA solve stopped after {iterations} iterations with KKT residual "
            f"{kkt:.3e} and relative gap {rel_gap:.3e}",
            iterations=iterations,
            duality_gap=gap,
        )
    diag = EdaSolveDiagnostics(
        objective=f,
        duality_gap=gap,
        relative_gap=rel_gap,
        kkt_residual=kkt,
        iterations=iterations,
        converged=converged,
    )
    return p, l, d, diag


def cvxeda_decompose(
    eda: SignalTrace,
    alpha: float = ALPHA,
    gamma: float = GAMMA,
    tau_fast: float = TAU_FAST_S,
    tau_slow: float = TAU_SLOW_S,
    knot_spacing_s: float = KNOT_SPACING_S,
    solver_rate_hz: float = SOLVER_RATE_HZ,
    max_iterations: int = MAX_ITERATIONS,
    gap_tol: float = GAP_TOL,
) -> EdaDecomposition:
    """Decompose a conductance trace into tonic + phasic + residual.

    The program is solved at <= solver_rate_hz (the trace is decimated when
    its rate is an integer multiple); tonic and phasic are then linearly
    interpolated back to the input rate, and the residual is defined as
    input - tonic - phasic so the three always sum to the input exactly.

    Raises:
        SolverConvergenceError: the KKT residual tolerance was not met
            within the iteration budget.
    """
    if eda.sample_rate_hz > solver_rate_hz:
        work = downsample(eda, solver_rate_hz)
    else:
        work = eda
        solver_rate_hz = eda.sample_rate_hz
    y = work.samples
    n = len(y)
    t_solver = np.arange(n) / solver_rate_hz
    F = _BatemanOperator(solver_rate_hz, n, tau_fast, tau_slow)
    B = _spline_basis(t_solver, knot_spacing_s)
    C = np.column_stack([np.ones(n), t_solver / max(t_solver[-1], 1e-9)])
    p, l, d, diag = _solve_qp(y, F, B, C, alpha, gamma, max_iterations, gap_tol)

    tonic_solver = B @ l + C @ d
    phasic_solver = F.apply(p)
    t_in = np.arange(len(eda)) / eda.sample_rate_hz
    tonic_full = np.interp(t_in, t_solver, tonic_solver)
    phasic_full = np.interp(t_in, t_solver, phasic_solver)
    residual_full = eda.samples - tonic_full - phasic_full

    mk = lambda x: SignalTrace(x, eda.sample_rate_hz, EDA, eda.start_time_s)
    return EdaDecomposition(
        tonic=mk(tonic_full),
        phasic=mk(phasic_full),
        residual=mk(residual_full),
        sparse_driver=p,
        driver_rate_hz=solver_rate_hz,
        diagnostics=diag,
        tonic_solver=tonic_solver,
        phasic_solver=phasic_solver,
    )


def extract_scr_events(decomp: EdaDecomposition, min_amplitude_us: float = 0.01) -> list[ScrEvent]:
    """Skin-conductance responses from the phasic component.

    A response is a phasic local maximum with prominence >= min_amplitude_us;
    its onset is the preceding phasic local minimum (or trace start).
    """
    phasic = decomp.phasic.samples
    fs = decomp.phasic.sample_rate_hz
    t0 = decomp.phasic.start_time_s
    peaks, _ = sps.find_peaks(phasic, prominence=min_amplitude_us)
    minima, _ = sps.find_peaks(-phasic)
    events = []
    for pk in peaks:
        before = minima[minima < pk]
        onset = int(before[-1]) if len(before) else 0
        amp = float(phasic[pk] - phasic[onset])
        if amp <= 0 or pk <= onset:
            continue
        events.append(
            ScrEvent(
                onset_time_s=t0 + onset / fs,
                peak_time_s=t0 + pk / fs,
                amplitude_us=amp,
                rise_time_s=(pk - onset) / fs,
            )
        )
    return events


def eda_features(
    decomp: EdaDecomposition,
    events: list[ScrEvent],
    window: tuple[float, float],
) -> dict[str, float]:
    """Tonic level/slope and SCR frequency/amplitude/rise-time in a window.

    Window bounds are session-clock seconds; SCRs are counted by peak time.
    Amplitude and rise time are NaN when the window holds no SCR.
    """
    start, end = window
    if not (end > start):
        raise InvalidIntervalError(f"window [{start}, {end}) has non-positive duration")
    tonic_seg = decomp.tonic.segment(start, end)
    scl_mean = float(np.mean(tonic_seg)) if len(tonic_seg) else float("nan")
    scl_slope = (
        linear_slope(tonic_seg, 1.0 / decomp.tonic.sample_rate_hz)
        if len(tonic_seg) >= 2
        else float("nan")
    )
    in_win = [e for e in events if start <= e.peak_time_s < end]
    minutes = (end - start) / 60.0
    return {
        "scl_mean_us": scl_mean,
        "scl_slope_us_per_s": scl_slope,
        "scr_frequency_per_min": len(in_win) / minutes,
        "scr_amplitude_us": float(np.mean([e.amplitude_us for e in in_win])) if in_win else float("nan"),
        "scr_rise_time_s": float(np.mean([e.rise_time_s for e in in_win])) if in_win else float("nan"),
    }
