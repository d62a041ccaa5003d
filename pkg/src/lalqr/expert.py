"""Receding-horizon iLQR expert.

The planner is a Gauss-Newton iLQR: first-order dynamics, second-order
(smoothed) stage costs, Levenberg regularization on the control Hessian and
a backtracking line search on the smoothed trajectory cost.  The inner loops
are numba kernels parameterized by an environment's kernel set, see
:mod:`lalqr.envs`.

The objective over a horizon ``H`` is ``sum_{h<H} c(x_h, u_h) + c(x_H, 0)``:
the last control of the infinite-sum formulation only pays its own control
cost, so its optimum is zero and it is folded into a terminal state cost.
"""
import time
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from lalqr.errors import NonFiniteError, PlannerError

STATUS_CONVERGED = 0
STATUS_MAX_ITER = 1
STATUS_REG_CAP = 2
STATUS_NO_DESCENT = 3


@dataclass(frozen=True)
class PlannerConfig:
    """iLQR settings.

    Attributes:
        horizon: planning steps ``H``.
        max_iterations: iLQR iterations per :meth:`IlqrPlanner.plan` call.
        reg_init: initial additive term on the control Hessian.
        reg_min, reg_max: regularization bounds; exceeding ``reg_max`` aborts.
        reg_up, reg_down: multiplicative growth on failure / shrink on success.
        line_search: step sizes tried in order; in (0, 1], strictly decreasing.
        convergence_tol: stop once a step lowers the cost by less than
            ``convergence_tol * (1 + cost)``.
        smoothing: ``eps`` of the ``sqrt(s^2 + eps^2)`` surrogate used for
            derivatives of absolute-value costs.
    """

    horizon: int = 100
    max_iterations: int = 20
    reg_init: float = 1e-6
    reg_min: float = 1e-9
    reg_max: float = 1e10
    reg_up: float = 10.0
    reg_down: float = 2.0
    line_search: tuple = tuple(0.5**i for i in range(10))
    convergence_tol: float = 1e-6
    smoothing: float = 1e-3

    def __post_init__(self):
        if self.horizon < 1 or self.max_iterations < 1:
            raise ValueError("horizon and max_iterations must be positive")
        if not 0 < self.reg_min <= self.reg_init <= self.reg_max:
            raise ValueError("need 0 < reg_min <= reg_init <= reg_max")
        ls = tuple(float(a) for a in self.line_search)
        if not ls or any(not 0 < a <= 1 for a in ls) or any(b >= a for a, b in zip(ls, ls[1:])):
            raise ValueError("line_search must be strictly decreasing values in (0, 1]")
        object.__setattr__(self, "line_search", ls)


PLANNER_DEFAULTS = {
    "cartpole": PlannerConfig(horizon=100),
    "pendulum": PlannerConfig(horizon=60),
}


def default_planner_config(env_name):
    return PLANNER_DEFAULTS.get(env_name, PlannerConfig())


@dataclass(frozen=True)
class Plan:
    """Nominal trajectory with its time-varying affine feedback law.

    ``states`` has ``H + 1`` rows, ``controls`` ``H``; ``gains[h]`` is
    ``m x n`` and the law is ``u = controls[h] + gains[h] (x - states[h])``.
    ``cost`` sums the true stage costs along the nominal trajectory;
    ``objective`` is the smoothed value the optimizer actually minimized.
    """

    states: np.ndarray
    controls: np.ndarray
    gains: np.ndarray
    feedforward: np.ndarray
    cost: float
    objective: float = float("nan")
    iterations: int = 0
    status: int = STATUS_CONVERGED
    cost_history: tuple = field(default=())

    @property
    def horizon(self):
        return self.controls.shape[0]


# ---------------------------------------------------------------------------
# numba kernels
#
# Kernels that take the environment's jitted functions as arguments are not
# disk-cached: numba's cache index keys them by dispatcher type, which does
# not survive into a new process and fails the lookup.
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _clip(u, lo, hi):
    return np.minimum(np.maximum(u, lo), hi)


@numba.njit
def _rollout(dyn, cost, x0, U, p, w, lo, hi, eps):
    H, m = U.shape
    n = x0.shape[0]
    X = np.empty((H + 1, n))
    Uc = np.empty((H, m))
    X[0] = x0
    J = 0.0
    for h in range(H):
        u = _clip(U[h], lo, hi)
        Uc[h] = u
        J += cost(X[h], u, w, eps)[0]
        X[h + 1] = dyn(X[h], u, p)
    J += cost(X[H], np.zeros(m), w, eps)[0]
    return X, Uc, J


@numba.njit
def _forward(dyn, cost, x0, Xn, Un, K, k, alpha, p, w, lo, hi, wrap, eps):
    H, m = Un.shape
    n = x0.shape[0]
    X = np.empty((H + 1, n))
    U = np.empty((H, m))
    X[0] = x0
    J = 0.0
    for h in range(H):
        dx = X[h] - Xn[h]
        for i in range(n):
            if wrap[i]:
                dx[i] = dx[i] - 2.0 * np.pi * np.ceil((dx[i] - np.pi) / (2.0 * np.pi))
        u = _clip(Un[h] + alpha * k[h] + K[h] @ dx, lo, hi)
        U[h] = u
        J += cost(X[h], u, w, eps)[0]
        X[h + 1] = dyn(X[h], u, p)
    J += cost(X[H], np.zeros(m), w, eps)[0]
    return X, U, J


@numba.njit
def _true_cost(cost, X, U, w):
    H, m = U.shape
    J = 0.0
    for h in range(H):
        J += cost(X[h], U[h], w)
    return J + cost(X[H], np.zeros(m), w)


@numba.njit(cache=True)
def _cholesky_solve(a, b):
    """Solve ``a x = b`` for SPD ``a``; returns ``(ok, x)``."""
    m = a.shape[0]
    L = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1):
            s = a[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 0.0:
                    return False, b
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    y = np.empty_like(b)
    for i in range(m):
        s = b[i].copy()
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    x = np.empty_like(b)
    for i in range(m - 1, -1, -1):
        s = y[i].copy()
        for k in range(i + 1, m):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return True, x


@numba.njit
def _derivatives(dyn_jac, cost_derivs, X, U, p, w, eps):
    H, m = U.shape
    n = X.shape[1]
    fx = np.empty((H, n, n))
    fu = np.empty((H, n, m))
    lx = np.empty((H + 1, n))
    lu = np.empty((H, m))
    lxx = np.empty((H + 1, n, n))
    luu = np.empty((H, m, m))
    lux = np.empty((H, m, n))
    for h in range(H):
        a, b = dyn_jac(X[h], U[h], p)
        fx[h] = a
        fu[h] = b
        _, gx, gu, hxx, huu, hux = cost_derivs(X[h], U[h], w, eps)
        lx[h] = gx
        lu[h] = gu
        lxx[h] = hxx
        luu[h] = huu
        lux[h] = hux
    _, gx, _, hxx, _, _ = cost_derivs(X[H], np.zeros(m), w, eps)
    lx[H] = gx
    lxx[H] = hxx
    return fx, fu, lx, lu, lxx, luu, lux


@numba.njit(cache=True)
def _backward(fx, fu, lx, lu, lxx, luu, lux, reg):
    H, n, m = fu.shape
    K = np.zeros((H, m, n))
    k = np.zeros((H, m))
    vx = lx[H].copy()
    vxx = lxx[H].copy()
    for h in range(H - 1, -1, -1):
        A = fx[h]
        B = fu[h]
        qx = lx[h] + A.T @ vx
        qu = lu[h] + B.T @ vx
        vxxA = vxx @ A
        vxxB = vxx @ B
        qxx = lxx[h] + A.T @ vxxA
        quu = luu[h] + B.T @ vxxB
        qux = lux[h] + B.T @ vxxA
        quu_r = quu + reg * np.eye(m)
        rhs = np.empty((m, n + 1))
        rhs[:, 0] = qu
        rhs[:, 1:] = qux
        ok, sol = _cholesky_solve(quu_r, rhs)
        if not ok:
            return False, K, k
        k[h] = -sol[:, 0]
        K[h] = -sol[:, 1:]
        Kh = K[h]
        kh = k[h]
        vx = qx + Kh.T @ (quu @ kh) + Kh.T @ qu + qux.T @ kh
        vxx = qxx + Kh.T @ quu @ Kh + Kh.T @ qux + qux.T @ Kh
        vxx = 0.5 * (vxx + vxx.T)
    return True, K, k


@numba.njit
def _ilqr(dyn, dyn_jac, cost_derivs, x0, U0, p, w, lo, hi, wrap, eps,
          max_iter, reg_init, reg_min, reg_max, reg_up, reg_down, alphas, tol):
    X, U, J = _rollout(dyn, cost_derivs, x0, U0, p, w, lo, hi, eps)
    H, m = U.shape
    n = x0.shape[0]
    K = np.zeros((H, m, n))
    k = np.zeros((H, m))
    history = np.empty(max_iter + 1)
    history[0] = J
    reg = reg_init
    status = STATUS_MAX_ITER
    it = 0
    while it < max_iter:
        fx, fu, lx, lu, lxx, luu, lux = _derivatives(dyn_jac, cost_derivs, X, U, p, w, eps)
        ok = False
        while not ok:
            ok, Kn, kn = _backward(fx, fu, lx, lu, lxx, luu, lux, reg)
            if not ok:
                reg = max(reg * reg_up, reg_init)
                if reg > reg_max:
                    return X, U, K, k, J, it, STATUS_REG_CAP, history[: it + 1]
        accepted = False
        for ai in range(alphas.shape[0]):
            Xt, Ut, Jt = _forward(dyn, cost_derivs, x0, X, U, Kn, kn, alphas[ai], p, w, lo, hi, wrap, eps)
            if np.isfinite(Jt) and Jt < J:
                accepted = True
                break
        it += 1
        if accepted:
            dJ = J - Jt
            X, U, J = Xt, Ut, Jt
            K, k = Kn, kn
            history[it] = J
            reg = max(reg / reg_down, reg_min)
            if dJ < tol * (1.0 + J):
                status = STATUS_CONVERGED
                break
        else:
            # no step size lowers the true cost: treat the incumbent as final
            history[it] = J
            status = STATUS_NO_DESCENT
            break
    return X, U, K, k, J, it, status, history[: it + 1]


# ---------------------------------------------------------------------------
# planner object
# ---------------------------------------------------------------------------


class IlqrPlanner:
    """Receding-horizon iLQR bound to one environment.

    The instance carries warm-start state, so one planner serves one rollout
    at a time; call :meth:`reset` between episodes.
    """

    def __init__(self, env, config=None):
        self.env = env
        self.config = config or default_planner_config(env.name)
        self._kernels = env.kernels()
        wrap = np.zeros(env.state_dim, dtype=np.bool_)
        for i in env.angle_indices:
            wrap[i] = True
        self._wrap = wrap
        self._alphas = np.array(self.config.line_search, dtype=np.float64)
        self._last = None
        self.step_times = []

    def reset(self):
        self._last = None
        self.step_times = []

    def plan(self, x0, warm=None, max_iterations=None):
        """Optimize controls over the horizon from ``x0``.

        ``warm`` may be a :class:`Plan` or an ``(H, m)`` control array; the
        default initial guess is all zeros.

        Raises:
            PlannerError: the backward pass stayed indefinite up to the
                regularization cap; ``best_plan`` holds the incumbent.
        """
        env, cfg = self.env, self.config
        x0 = env._state(x0)
        H, m = cfg.horizon, env.control_dim
        if warm is None:
            U0 = np.zeros((H, m))
        else:
            U0 = np.array(warm.controls if isinstance(warm, Plan) else warm, dtype=np.float64).reshape(H, m)
        dyn, dyn_jac, cost, cost_derivs = self._kernels
        X, U, K, k, J, iters, status, hist = _ilqr(
            dyn, dyn_jac, cost_derivs, x0, U0, env.params, env.weights,
            env.control_low, env.control_high, self._wrap, cfg.smoothing,
            max_iterations or cfg.max_iterations, cfg.reg_init, cfg.reg_min, cfg.reg_max,
            cfg.reg_up, cfg.reg_down, self._alphas, cfg.convergence_tol,
        )
        if not np.all(np.isfinite(X)):
            raise NonFiniteError("planner produced a non-finite trajectory")
        true_cost = _true_cost(cost, X, U, env.weights)
        plan = Plan(X, U, K, k, float(true_cost), float(J), int(iters), int(status), tuple(hist))
        if status == STATUS_REG_CAP:
            raise PlannerError("iLQR backward pass indefinite at the regularization cap", best_plan=plan)
        return plan

    def _warm_controls(self):
        if self._last is None:
            return None
        U = self._last.controls
        return np.vstack([U[1:], U[-1:]])

    def mpc_act(self, x):
        """First control of a fresh plan warm-started from the shifted previous plan."""
        t0 = time.perf_counter()
        plan = self.plan(x, self._warm_controls())
        self._last = plan
        u = plan.controls[0].copy()
        self.step_times.append(time.perf_counter() - t0)
        return u

    __call__ = mpc_act

    def noisy_act(self, x, rng, probability=0.5, magnitude=1.0):
        """``mpc_act`` perturbed, with the given probability, by uniform noise.

        The coin is drawn first and the noise only on the noisy branch, so a
        generator that lands on the clean branch yields ``mpc_act(x)`` exactly.
        """
        u = self.mpc_act(x)
        if rng.random() < probability:
            u = self.env.clamp(u + rng.uniform(-magnitude, magnitude, size=u.shape))
        return u


class NoisyExpert:
    """Callable ``x -> u`` wrapping :meth:`IlqrPlanner.noisy_act` with its own generator."""

    def __init__(self, planner, rng, probability=0.5, magnitude=1.0):
        self.planner = planner
        self.rng = rng
        self.probability = probability
        self.magnitude = magnitude

    @property
    def env(self):
        return self.planner.env

    def reset(self):
        self.planner.reset()

    def __call__(self, x):
        return self.planner.noisy_act(x, self.rng, self.probability, self.magnitude)


def with_horizon(config, horizon):
    return replace(config, horizon=horizon)
