"""Analytic benchmark environments.

Each environment is a pure map ``(state, control) -> next state`` obtained by
one classical RK4 step of its continuous equations of motion.  The numeric
work lives in numba kernels with a uniform signature so that the planner in
:mod:`lalqr.expert` can drive any environment:

* ``dyn(x, u, p) -> x_next``
* ``dyn_jac(x, u, p) -> (dx_next/dx, dx_next/du)``
* ``cost(x, u, w) -> float``  (true stage cost)
* ``cost_derivs(x, u, w, eps) -> (l, lx, lu, lxx, luu, lux)``  (smoothed)

``p`` and ``w`` are flat float arrays holding physical constants and cost
weights respectively.

Cartpole state: cart position [m], pole angle from upright [rad], cart
velocity [m/s], pole angular velocity [rad/s].  Control: horizontal force [N].
"""
import math
from dataclasses import dataclass

import numba
import numpy as np

from lalqr.errors import DimensionError, NonFiniteError

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    control_dim: int
    dt: float
    episode_horizon: int
    control_low: tuple
    control_high: tuple

    def __post_init__(self):
        if self.dt <= 0 or self.episode_horizon < 1:
            raise ValueError("dt must be positive and episode_horizon at least 1")
        if len(self.control_low) != self.control_dim or len(self.control_high) != self.control_dim:
            raise DimensionError("control bounds must have one entry per control")
        if any(lo >= hi for lo, hi in zip(self.control_low, self.control_high)):
            raise ValueError("control bounds need lo < hi")


@dataclass(frozen=True)
class CostBreakdown:
    total: float
    components: dict
    weights: dict


# ---------------------------------------------------------------------------
# shared kernels
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def wrap_angle(a):
    """Map an angle to (-pi, pi]."""
    return a - TWO_PI * math.ceil((a - math.pi) / TWO_PI)


@numba.njit(cache=True)
def _smooth_abs(s, eps):
    r = math.sqrt(s * s + eps * eps)
    return r - eps, s / r, eps * eps / (r * r * r)


# ---------------------------------------------------------------------------
# cartpole
# ---------------------------------------------------------------------------
# p = [cart_mass, pole_mass, pole_length, gravity, dt]
# w = [w_velocity, w_control, w_centered, w_vertical]


@numba.njit(cache=True)
def _cartpole_ode(x, u, p):
    mc, mp, l, g = p[0], p[1], p[2], p[3]
    th, thd = x[1], x[3]
    s, c = math.sin(th), math.cos(th)
    d = mc + mp * s * s
    n1 = u + mp * l * thd * thd * s - mp * g * s * c
    n2 = -c * u - mp * l * thd * thd * s * c + (mc + mp) * g * s
    out = np.empty(4)
    out[0] = x[2]
    out[1] = thd
    out[2] = n1 / d
    out[3] = n2 / (l * d)
    return out


@numba.njit(cache=True)
def _cartpole_ode_jac(x, u, p):
    mc, mp, l, g = p[0], p[1], p[2], p[3]
    th, thd = x[1], x[3]
    s, c = math.sin(th), math.cos(th)
    d = mc + mp * s * s
    dd = 2.0 * mp * s * c
    n1 = u + mp * l * thd * thd * s - mp * g * s * c
    n2 = -c * u - mp * l * thd * thd * s * c + (mc + mp) * g * s
    dn1_dth = mp * l * thd * thd * c - mp * g * (c * c - s * s)
    dn1_dthd = 2.0 * mp * l * thd * s
    dn2_dth = s * u - mp * l * thd * thd * (c * c - s * s) + (mc + mp) * g * c
    dn2_dthd = -2.0 * mp * l * thd * s * c
    jx = np.zeros((4, 4))
    ju = np.zeros((4, 1))
    jx[0, 2] = 1.0
    jx[1, 3] = 1.0
    jx[2, 1] = (dn1_dth * d - n1 * dd) / (d * d)
    jx[2, 3] = dn1_dthd / d
    jx[3, 1] = (dn2_dth * d - n2 * dd) / (l * d * d)
    jx[3, 3] = dn2_dthd / (l * d)
    ju[2, 0] = 1.0 / d
    ju[3, 0] = -c / (l * d)
    return jx, ju


@numba.njit(cache=True)
def _cartpole_dyn(x, u, p):
    dt = p[4]
    uu = u[0]
    k1 = _cartpole_ode(x, uu, p)
    k2 = _cartpole_ode(x + 0.5 * dt * k1, uu, p)
    k3 = _cartpole_ode(x + 0.5 * dt * k2, uu, p)
    k4 = _cartpole_ode(x + dt * k3, uu, p)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[1] = wrap_angle(out[1])
    return out


@numba.njit(cache=True)
def _cartpole_dyn_jac(x, u, p):
    # chain rule through the four RK4 stages
    dt = p[4]
    uu = u[0]
    eye = np.eye(4)
    k1 = _cartpole_ode(x, uu, p)
    a1, b1 = _cartpole_ode_jac(x, uu, p)
    dk1x, dk1u = a1, b1
    x2 = x + 0.5 * dt * k1
    k2 = _cartpole_ode(x2, uu, p)
    a2, b2 = _cartpole_ode_jac(x2, uu, p)
    dk2x = a2 @ (eye + 0.5 * dt * dk1x)
    dk2u = a2 @ (0.5 * dt * dk1u) + b2
    x3 = x + 0.5 * dt * k2
    k3 = _cartpole_ode(x3, uu, p)
    a3, b3 = _cartpole_ode_jac(x3, uu, p)
    dk3x = a3 @ (eye + 0.5 * dt * dk2x)
    dk3u = a3 @ (0.5 * dt * dk2u) + b3
    x4 = x + dt * k3
    a4, b4 = _cartpole_ode_jac(x4, uu, p)
    dk4x = a4 @ (eye + dt * dk3x)
    dk4u = a4 @ (dt * dk3u) + b4
    fx = eye + (dt / 6.0) * (dk1x + 2.0 * dk2x + 2.0 * dk3x + dk4x)
    fu = (dt / 6.0) * (dk1u + 2.0 * dk2u + 2.0 * dk3u + dk4u)
    return fx, fu


@numba.njit(cache=True)
def _cartpole_cost(x, u, w):
    return w[0] * abs(x[2]) + w[1] * math.sqrt(np.sum(u * u)) + w[2] * abs(x[0]) + w[3] * abs(x[1])


@numba.njit(cache=True)
def _cartpole_cost_derivs(x, u, w, eps):
    lx = np.zeros(4)
    lxx = np.zeros((4, 4))
    m = u.shape[0]
    lu = np.zeros(m)
    luu = np.zeros((m, m))
    lux = np.zeros((m, 4))
    l = 0.0
    for idx, wi in ((2, w[0]), (0, w[2]), (1, w[3])):
        v, d1, d2 = _smooth_abs(x[idx], eps)
        l += wi * v
        lx[idx] += wi * d1
        lxx[idx, idx] += wi * d2
    r = math.sqrt(np.sum(u * u) + eps * eps)
    l += w[1] * (r - eps)
    for i in range(m):
        lu[i] = w[1] * u[i] / r
        for j in range(m):
            luu[i, j] = -w[1] * u[i] * u[j] / (r * r * r)
        luu[i, i] += w[1] / r
    return l, lx, lu, lxx, luu, lux


# ---------------------------------------------------------------------------
# pendulum (angle measured from upright)
# ---------------------------------------------------------------------------
# p = [mass, length, gravity, dt, damping]
# w = [w_vertical, w_velocity, w_control]


@numba.njit(cache=True)
def _pendulum_ode(x, u, p):
    m, l, g, b = p[0], p[1], p[2], p[4]
    out = np.empty(2)
    out[0] = x[1]
    out[1] = (g / l) * math.sin(x[0]) + (u - b * x[1]) / (m * l * l)
    return out


@numba.njit(cache=True)
def _pendulum_ode_jac(x, u, p):
    m, l, g, b = p[0], p[1], p[2], p[4]
    jx = np.zeros((2, 2))
    ju = np.zeros((2, 1))
    jx[0, 1] = 1.0
    jx[1, 0] = (g / l) * math.cos(x[0])
    jx[1, 1] = -b / (m * l * l)
    ju[1, 0] = 1.0 / (m * l * l)
    return jx, ju


@numba.njit(cache=True)
def _pendulum_dyn(x, u, p):
    dt = p[3]
    uu = u[0]
    k1 = _pendulum_ode(x, uu, p)
    k2 = _pendulum_ode(x + 0.5 * dt * k1, uu, p)
    k3 = _pendulum_ode(x + 0.5 * dt * k2, uu, p)
    k4 = _pendulum_ode(x + dt * k3, uu, p)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[0] = wrap_angle(out[0])
    return out


@numba.njit(cache=True)
def _pendulum_dyn_jac(x, u, p):
    dt = p[3]
    uu = u[0]
    eye = np.eye(2)
    k1 = _pendulum_ode(x, uu, p)
    a1, b1 = _pendulum_ode_jac(x, uu, p)
    x2 = x + 0.5 * dt * k1
    k2 = _pendulum_ode(x2, uu, p)
    a2, b2 = _pendulum_ode_jac(x2, uu, p)
    dk2x = a2 @ (eye + 0.5 * dt * a1)
    dk2u = a2 @ (0.5 * dt * b1) + b2
    x3 = x + 0.5 * dt * k2
    a3, b3 = _pendulum_ode_jac(x3, uu, p)
    dk3x = a3 @ (eye + 0.5 * dt * dk2x)
    dk3u = a3 @ (0.5 * dt * dk2u) + b3
    k3 = _pendulum_ode(x3, uu, p)
    x4 = x + dt * k3
    a4, b4 = _pendulum_ode_jac(x4, uu, p)
    dk4x = a4 @ (eye + dt * dk3x)
    dk4u = a4 @ (dt * dk3u) + b4
    fx = eye + (dt / 6.0) * (a1 + 2.0 * dk2x + 2.0 * dk3x + dk4x)
    fu = (dt / 6.0) * (b1 + 2.0 * dk2u + 2.0 * dk3u + dk4u)
    return fx, fu


@numba.njit(cache=True)
def _pendulum_cost(x, u, w):
    return w[0] * x[0] * x[0] + w[1] * x[1] * x[1] + w[2] * np.sum(u * u)


@numba.njit(cache=True)
def _pendulum_cost_derivs(x, u, w, eps):
    m = u.shape[0]
    lx = np.array([2.0 * w[0] * x[0], 2.0 * w[1] * x[1]])
    lxx = np.array([[2.0 * w[0], 0.0], [0.0, 2.0 * w[1]]])
    lu = 2.0 * w[2] * u
    luu = 2.0 * w[2] * np.eye(m)
    lux = np.zeros((m, 2))
    return _pendulum_cost(x, u, w), lx, lu, lxx, luu, lux


# ---------------------------------------------------------------------------
# linear-quadratic environments
# ---------------------------------------------------------------------------
# p = [n, m, A (row-major), B (row-major)];  w = [n, m, Q, R]


@numba.njit(cache=True)
def _unpack_pair(p):
    n = int(p[0])
    m = int(p[1])
    a = p[2:2 + n * n].copy().reshape((n, n))
    b = p[2 + n * n:2 + n * n + n * m].copy().reshape((n, m))
    return a, b


@numba.njit(cache=True)
def _unpack_costs(w):
    n = int(w[0])
    m = int(w[1])
    q = w[2:2 + n * n].copy().reshape((n, n))
    r = w[2 + n * n:2 + n * n + m * m].copy().reshape((m, m))
    return q, r


@numba.njit(cache=True)
def _linear_dyn(x, u, p):
    a, b = _unpack_pair(p)
    return a @ x + b @ u


@numba.njit(cache=True)
def _linear_dyn_jac(x, u, p):
    return _unpack_pair(p)


@numba.njit(cache=True)
def _linear_cost(x, u, w):
    q, r = _unpack_costs(w)
    return x @ (q @ x) + u @ (r @ u)


@numba.njit(cache=True)
def _linear_cost_derivs(x, u, w, eps):
    q, r = _unpack_costs(w)
    qs = q + q.T
    rs = r + r.T
    l = x @ (q @ x) + u @ (r @ u)
    return l, qs @ x, rs @ u, qs, rs, np.zeros((u.shape[0], x.shape[0]))


# ---------------------------------------------------------------------------
# environment objects
# ---------------------------------------------------------------------------


class Env:
    """Base environment: validation and clamping around the numba kernels.

    Subclasses set ``spec``, ``params``, ``weights``, the four kernels, and
    ``angle_indices`` (coordinates stored wrapped to (-pi, pi]).
    """

    spec: EnvSpec
    angle_indices = ()
    component_names = ()
    analytic_jacobian = True

    def __init__(self):
        self.control_low = np.array(self.spec.control_low, dtype=np.float64)
        self.control_high = np.array(self.spec.control_high, dtype=np.float64)
        self.goal_state = np.zeros(self.spec.state_dim)
        self.goal_control = np.zeros(self.spec.control_dim)

    @property
    def name(self):
        return self.spec.name

    @property
    def state_dim(self):
        return self.spec.state_dim

    @property
    def control_dim(self):
        return self.spec.control_dim

    def _state(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape[0] != self.spec.state_dim:
            raise DimensionError(f"{self.name}: state needs {self.spec.state_dim} entries, got {x.shape[0]}")
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"{self.name}: non-finite state {x}")
        return x

    def _control(self, u):
        u = np.asarray(u, dtype=np.float64).reshape(-1)
        if u.shape[0] != self.spec.control_dim:
            raise DimensionError(f"{self.name}: control needs {self.spec.control_dim} entries, got {u.shape[0]}")
        if not np.all(np.isfinite(u)):
            raise NonFiniteError(f"{self.name}: non-finite control {u}")
        return u

    def clamp(self, u):
        return np.minimum(np.maximum(u, self.control_low), self.control_high)

    def step(self, x, u):
        x = self._state(x)
        u = self.clamp(self._control(u))
        out = self._dyn(x, u, self.params)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{self.name}: integration produced a non-finite state")
        return out

    def stage_cost(self, x, u):
        return float(self._cost(self._state(x), self._control(u), self.weights))

    def cost(self, x, u):
        x = self._state(x)
        u = self._control(u)
        comps = self.cost_components(x, u)
        weights = dict(zip(self.component_names, self.component_weights()))
        total = float(self._cost(x, u, self.weights))
        return CostBreakdown(total=total, components=comps, weights=weights)

    def linearize(self, x, u):
        """Jacobians of the discrete step map, analytic where available."""
        x = self._state(x)
        u = self._control(u)
        if not self.analytic_jacobian:
            return self.linearize_fd(x, u)
        fx, fu = self._dyn_jac(x, u, self.params)
        return np.array(fx), np.array(fu)

    def linearize_fd(self, x, u, h=1e-6):
        """Central-difference Jacobians of the (unclamped) step map.

        Angle coordinates of the difference are re-wrapped so a probe that
        crosses the +-pi seam does not blow up.
        """
        x = self._state(x)
        u = self._control(u)
        n, m = x.size, u.size
        fx = np.empty((n, n))
        fu = np.empty((n, m))
        for j in range(n):
            e = np.zeros(n)
            e[j] = h
            fx[:, j] = self._diff(self._dyn(x + e, u, self.params), self._dyn(x - e, u, self.params)) / (2 * h)
        for j in range(m):
            e = np.zeros(m)
            e[j] = h
            fu[:, j] = self._diff(self._dyn(x, u + e, self.params), self._dyn(x, u - e, self.params)) / (2 * h)
        if not (np.all(np.isfinite(fx)) and np.all(np.isfinite(fu))):
            raise NonFiniteError(f"{self.name}: divergent finite-difference probe")
        return fx, fu

    def _diff(self, a, b):
        d = a - b
        for i in self.angle_indices:
            d[i] = wrap_angle(d[i])
        return d

    def sample_initial(self, rng, mode="train"):
        raise NotImplementedError

    def cost_components(self, x, u):
        raise NotImplementedError

    def component_weights(self):
        raise NotImplementedError

    def kernels(self):
        return self._dyn, self._dyn_jac, self._cost, self._cost_derivs


class CartPole(Env):
    """Frictionless cart with a point-mass pole, stabilized upright at the origin."""

    component_names = ("velocity", "control", "centered", "vertical")
    angle_indices = (1,)

    def __init__(self, cart_mass=1.0, pole_mass=0.1, pole_length=1.0, gravity=9.81, dt=0.01,
                 episode_horizon=1500, force_limit=10.0,
                 cost_weights=(0.1, 0.1, 10.0, 10.0)):
        self.spec = EnvSpec("cartpole", 4, 1, dt, episode_horizon, (-force_limit,), (force_limit,))
        self.params = np.array([cart_mass, pole_mass, pole_length, gravity, dt], dtype=np.float64)
        self.weights = np.array(cost_weights, dtype=np.float64)
        self._dyn = _cartpole_dyn
        self._dyn_jac = _cartpole_dyn_jac
        self._cost = _cartpole_cost
        self._cost_derivs = _cartpole_cost_derivs
        super().__init__()

    def cost_components(self, x, u):
        return {
            "velocity": abs(x[2]),
            "control": float(np.linalg.norm(u)),
            "centered": abs(x[0]),
            "vertical": abs(x[1]),
        }

    def component_weights(self):
        return tuple(self.weights)

    def energy(self, x):
        mc, mp, l, g = self.params[:4]
        _, th, pd, thd = x
        return (0.5 * (mc + mp) * pd**2 + mp * l * math.cos(th) * pd * thd
                + 0.5 * mp * l**2 * thd**2 + mp * g * l * math.cos(th))

    def sample_initial(self, rng, mode="train"):
        if mode == "train":
            return np.array([rng.uniform(-1.0, 1.0), 0.0, 0.0, 0.0])
        if mode == "unseen":
            return np.array([1.2, 0.1, 0.0, 0.0])
        raise ValueError(f"unknown init mode {mode!r}")


class Pendulum(Env):
    """Torque-driven pendulum held upright; angle 0 is the inverted position."""

    component_names = ("vertical", "velocity", "control")
    angle_indices = (0,)

    def __init__(self, mass=1.0, length=1.0, gravity=9.81, dt=0.01, damping=0.0,
                 episode_horizon=500, torque_limit=20.0, cost_weights=(10.0, 0.1, 0.1)):
        self.spec = EnvSpec("pendulum", 2, 1, dt, episode_horizon, (-torque_limit,), (torque_limit,))
        self.params = np.array([mass, length, gravity, dt, damping], dtype=np.float64)
        self.weights = np.array(cost_weights, dtype=np.float64)
        self._dyn = _pendulum_dyn
        self._dyn_jac = _pendulum_dyn_jac
        self._cost = _pendulum_cost
        self._cost_derivs = _pendulum_cost_derivs
        super().__init__()

    def cost_components(self, x, u):
        return {"vertical": x[0] ** 2, "velocity": x[1] ** 2, "control": float(u @ u)}

    def component_weights(self):
        return tuple(self.weights)

    def sample_initial(self, rng, mode="train"):
        if mode == "train":
            return np.array([rng.uniform(-0.5, 0.5), 0.0])
        if mode == "unseen":
            return np.array([0.7, 0.0])
        raise ValueError(f"unknown init mode {mode!r}")


class LinearEnv(Env):
    """``x' = A x + B u`` with stage cost ``x'Qx + u'Ru``.

    Used for the LQ cross-checks: every controller in the lab should agree
    here.  ``init_low/init_high`` bound the train-mode sample of the first
    coordinate; the others start at zero.
    """

    component_names = ("state", "control")

    def __init__(self, a, b, q, r, dt=0.1, episode_horizon=100, control_limit=1e6,
                 name="linear", init_low=-1.0, init_high=1.0, unseen_state=None):
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        b = np.asarray(b, dtype=np.float64).reshape(a.shape[0], -1)
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        r = np.atleast_2d(np.asarray(r, dtype=np.float64))
        n, m = b.shape
        if a.shape != (n, n) or q.shape != (n, n) or r.shape != (m, m):
            raise DimensionError("inconsistent linear environment matrices")
        self.A, self.B, self.Q, self.R = a, b, q, r
        self.spec = EnvSpec(name, n, m, dt, episode_horizon, (-control_limit,) * m, (control_limit,) * m)
        self.params = np.concatenate([[n, m], a.ravel(), b.ravel()]).astype(np.float64)
        self.weights = np.concatenate([[n, m], q.ravel(), r.ravel()]).astype(np.float64)
        self._dyn = _linear_dyn
        self._dyn_jac = _linear_dyn_jac
        self._cost = _linear_cost
        self._cost_derivs = _linear_cost_derivs
        self.init_low, self.init_high = init_low, init_high
        self.unseen_state = None if unseen_state is None else np.asarray(unseen_state, dtype=np.float64)
        super().__init__()

    def cost_components(self, x, u):
        return {"state": float(x @ self.Q @ x), "control": float(u @ self.R @ u)}

    def component_weights(self):
        return (1.0, 1.0)

    def sample_initial(self, rng, mode="train"):
        x = np.zeros(self.spec.state_dim)
        if mode == "train":
            x[0] = rng.uniform(self.init_low, self.init_high)
            return x
        if mode == "unseen":
            if self.unseen_state is not None:
                return self.unseen_state.copy()
            x[0] = 1.2 * self.init_high
            return x
        raise ValueError(f"unknown init mode {mode!r}")


def double_integrator(dt=0.5, q=(1.0, 1.0), r=1.0, episode_horizon=100):
    """Position/velocity double integrator with exact zero-order-hold discretization."""
    a = np.array([[1.0, dt], [0.0, 1.0]])
    b = np.array([[0.5 * dt * dt], [dt]])
    return LinearEnv(a, b, np.diag(q), np.array([[r]]), dt=dt, episode_horizon=episode_horizon,
                     name="double_integrator")


ENVIRONMENTS = {
    "cartpole": CartPole,
    "pendulum": Pendulum,
    "double_integrator": double_integrator,
}


def make_env(name, **overrides):
    """Build an environment by name; keyword overrides replace default constants."""
    try:
        factory = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return factory(**overrides)
