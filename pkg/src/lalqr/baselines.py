"""Comparison controllers: local-linearization LQR and behavior cloning."""
from dataclasses import dataclass

import numpy as np

from lalqr import autodiff as ad
from lalqr import linalg
from lalqr.errors import EquilibriumError, LalqrError, SynthesisError, TrainingError


@dataclass(frozen=True)
class LolqrController:
    """``u = u* - K (x - x*)`` from LQR on the Taylor linearization at ``(x*, u*)``.

    Attributes:
        x_star, u_star: the equilibrium.
        K: ``(m, n)`` gain.
        Q, R: quadratic cost approximation used for synthesis.
        fx, fu: step-map Jacobians at the equilibrium.
    """

    x_star: np.ndarray
    u_star: np.ndarray
    K: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    fx: np.ndarray
    fu: np.ndarray
    control_low: np.ndarray
    control_high: np.ndarray
    angle_indices: tuple = ()

    def act(self, x):
        dx = np.asarray(x, dtype=np.float64) - self.x_star
        for i in self.angle_indices:
            dx[i] = (dx[i] + np.pi) % (2 * np.pi) - np.pi
        u = self.u_star - self.K @ dx
        return np.minimum(np.maximum(u, self.control_low), self.control_high)

    __call__ = act

    @property
    def feedback(self):
        """The local feedback ``L = -K`` so that ``u - u* = L (x - x*)``."""
        return -self.K

    def closed_loop_radius(self):
        return linalg.spectral_radius(self.fx - self.fu @ self.K)

    def reset(self):
        pass


def cost_hessian(env, x, u, h=1e-4, floor=1e-6, order=None):
    """PSD-projected central-difference Hessian of the stage cost in ``(x, u)``.

    Returns ``(Q, R)``, the state and control blocks after symmetrization and
    clamping eigenvalues below ``floor``.  ``order`` permutes the probe
    evaluation sequence (the result does not depend on it).
    """
    z0 = np.concatenate([np.asarray(x, dtype=np.float64), np.asarray(u, dtype=np.float64)])
    n, d = env.state_dim, z0.size

    def c(z):
        return env.stage_cost(z[:n], z[n:])

    pairs = [(i, j) for i in range(d) for j in range(i, d)]
    if order is not None:
        if sorted(order) != list(range(len(pairs))):
            raise ValueError(f"probe order must be a permutation of range({len(pairs)})")
        pairs = [pairs[k] for k in order]
    hess = np.zeros((d, d))
    c0 = c(z0)
    for i, j in pairs:
        ei = np.zeros(d)
        ei[i] = h
        if i == j:
            val = (c(z0 + ei) - 2 * c0 + c(z0 - ei)) / (h * h)
        else:
            ej = np.zeros(d)
            ej[j] = h
            val = (c(z0 + ei + ej) - c(z0 + ei - ej) - c(z0 - ei + ej) + c(z0 - ei - ej)) / (4 * h * h)
        hess[i, j] = hess[j, i] = val
    hess = 0.5 * (hess + hess.T)
    w, v = np.linalg.eigh(hess)
    hess = (v * np.maximum(w, floor)) @ v.T
    hess = 0.5 * (hess + hess.T)
    return hess[:n, :n].copy(), hess[n:, n:].copy()


def fit_lolqr(env, stable_point=None, tol=1e-8, probe_order=None):
    """Fit LQR to the local linearization at an equilibrium.

    Args:
        env: environment.
        stable_point: ``(x*, u*)``; defaults to the environment's goal.
        tol: allowed one-step drift of the equilibrium.
        probe_order: optional permutation of the Hessian probe sequence.

    Raises:
        EquilibriumError: ``step(x*, u*)`` moves by more than ``tol``.
        SynthesisError: the Riccati solve failed.
    """
    if stable_point is None:
        stable_point = (env.goal_state, env.goal_control)
    x_star = np.asarray(stable_point[0], dtype=np.float64).copy()
    u_star = np.asarray(stable_point[1], dtype=np.float64).copy()
    drift = np.max(np.abs(env.step(x_star, u_star) - x_star))
    if drift > tol:
        raise EquilibriumError(f"({x_star}, {u_star}) is not an equilibrium: one-step drift {drift:.3g}")
    fx, fu = env.linearize(x_star, u_star)
    q, r = cost_hessian(env, x_star, u_star, order=probe_order)
    try:
        sol = linalg.dare_solve(fx, fu, q, r)
    except LalqrError as exc:
        raise SynthesisError(f"LoLQR synthesis failed: {exc}") from exc
    return LolqrController(x_star, u_star, sol.K, q, r, fx, fu, env.control_low.copy(),
                           env.control_high.copy(), tuple(env.angle_indices))


def lolqr_act(controller, x):
    return controller.act(x)


class IlPolicy:
    """Two tanh hidden layers (default widths ``2N, N``) mapping states to controls."""

    kind = "il_policy"

    def __init__(self, n, m, widths=(40, 20), rng=None, control_low=None, control_high=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n, self.m = int(n), int(m)
        self.widths = tuple(int(w) for w in widths)
        sizes = (self.n,) + self.widths + (self.m,)
        self.layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            w = ad.Tensor(rng.uniform(-bound, bound, (fan_out, fan_in)), requires_grad=True)
            b = ad.Tensor(rng.uniform(-bound, bound, fan_out), requires_grad=True)
            self.layers.append((w, b))
        self.control_low = np.full(m, -np.inf) if control_low is None else np.asarray(control_low, float)
        self.control_high = np.full(m, np.inf) if control_high is None else np.asarray(control_high, float)

    def parameters(self):
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"layer{i}.w"] = w
            out[f"layer{i}.b"] = b
        return out

    def forward(self, x):
        """Differentiable raw output for a batch ``(B, n)``."""
        h = ad.tensor(x)
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = ad.add(ad.matmul(h, ad.transpose(w)), b)
            if i < last:
                h = ad.tanh(h)
        return h

    def act(self, x):
        h = np.asarray(x, dtype=np.float64)
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = w.values @ h + b.values
            if i < last:
                h = np.tanh(h)
        return np.minimum(np.maximum(h, self.control_low), self.control_high)

    __call__ = act

    def predict(self, x):
        return self.forward(np.atleast_2d(x)).values

    def reset(self):
        pass


def regression_loss(policy, x, u):
    """Mean over the batch of squared control error."""
    diff = ad.subtract(policy.forward(x), u)
    return ad.mean(ad.l2_norm_sq(diff, axis=1))


def train_il(dataset, widths=None, config=None, env=None):
    """Behavior-clone the dataset's controls.

    Returns ``(policy, history)`` where ``history`` holds per-epoch training
    and held-out MSE.

    Raises:
        TrainingError: the held-out MSE ended above ``config.il_threshold``;
            the error carries the final loss and the trained policy.
    """
    from lalqr.config import TrainConfig, latent_dim_for

    config = config or TrainConfig()
    if len(dataset) < 2:
        raise ValueError("imitation learning needs at least two records")
    if widths is None:
        N = latent_dim_for(config, dataset.env_name)
        widths = (2 * N, N)
    rng = np.random.default_rng(config.seed)
    train, held = dataset.split(config.il_holdout, rng)
    lo = env.control_low if env is not None else None
    hi = env.control_high if env is not None else None
    policy = IlPolicy(dataset.state_dim, dataset.control_dim, widths, rng, lo, hi)
    params = policy.parameters()
    opt = ad.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    names = list(params)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, ub = train.x[idx], train.u[idx]
            _, grads = ad.grad(lambda: regression_loss(policy, xb, ub), [params[k] for k in names])
            opt.step(dict(zip(names, grads)))
        history.append((epoch, _mse(policy, train), _mse(policy, held)))
    final = history[-1][2]
    if not np.isfinite(final) or final > config.il_threshold:
        raise TrainingError(
            f"imitation held-out MSE {final:.4g} above threshold {config.il_threshold}",
            final_loss=final, result=(policy, history),
        )
    return policy, history


def _mse(policy, data):
    if len(data) == 0:
        return float("nan")
    pred = policy.predict(data.x)
    return float(np.mean(np.sum((pred - data.u) ** 2, axis=1)))


def save_il(path, policy, meta=None):
    head = {"type": IlPolicy.kind, "n": policy.n, "m": policy.m, "widths": list(policy.widths),
            "control_low": policy.control_low.tolist(), "control_high": policy.control_high.tolist()}
    head.update(meta or {})
    ad.save_checkpoint(path, policy.parameters(), head)


def save_lolqr(path, c, meta=None):
    head = {"type": "lolqr", "angle_indices": list(c.angle_indices)}
    head.update(meta or {})
    ad.save_checkpoint(path, {
        "x_star": c.x_star, "u_star": c.u_star, "K": c.K, "Q": c.Q, "R": c.R, "fx": c.fx, "fu": c.fu,
        "control_low": c.control_low, "control_high": c.control_high,
    }, head)


def load_controller(path):
    """Load an IL policy, LoLQR or LaLQR controller by its type tag."""
    arrays, meta = ad.load_checkpoint(path)
    kind = meta.get("type")
    if kind == IlPolicy.kind:
        p = IlPolicy(meta["n"], meta["m"], meta["widths"], None,
                     np.array(meta["control_low"]), np.array(meta["control_high"]))
        for k, t in p.parameters().items():
            t.values[...] = arrays[k]
        return p
    if kind == "lolqr":
        return LolqrController(
            arrays["x_star"], arrays["u_star"], arrays["K"], arrays["Q"], arrays["R"], arrays["fx"],
            arrays["fu"], arrays["control_low"], arrays["control_high"], tuple(meta["angle_indices"]),
        )
    if kind == "lalqr":
        from lalqr.latent import controller_from_checkpoint

        return controller_from_checkpoint(arrays, meta)
    raise ValueError(f"{path}: unknown controller type {kind!r}")
