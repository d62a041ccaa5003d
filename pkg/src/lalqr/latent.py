"""Latent linear-quadratic surrogate of a nonlinear control problem.

A learned embedding ``z = phi(x)`` lifts the state to ``N > n`` dimensions
where the dynamics are modeled as ``z' = A z + B u`` and the stage cost as
``F(z'Qz + u'Ru)`` with a monotone scalar link ``F``.  After training, an
infinite-horizon LQR gain on ``(A, B, Q, R)`` gives the controller
``u = -K phi(x)``.

Three structures for ``(A, B)`` are available:

* ``companion`` -- controllable canonical form.  Diagonal block ``i`` of
  ``A`` is a ``mu_i x mu_i`` shift with a learnable last row; off-diagonal
  blocks are zero apart from their learnable last row.  ``B`` has a fixed 1
  in the last row of block ``i`` at column ``i`` and learnable entries to
  its right.  ``N*m + m*(m-1)/2`` parameters; zero initialization is
  already controllable.
* ``diagonal`` -- real diagonal ``A`` with a dense learnable ``B``.
* ``full`` -- dense learnable ``A`` and ``B``.
"""
from dataclasses import dataclass

import numpy as np

from lalqr import autodiff as ad
from lalqr import linalg
from lalqr.errors import DiagnosticError, DimensionError, LalqrError, SynthesisError

STRUCTURES = ("companion", "diagonal", "full")


def kronecker_indices(N, m):
    """Block sizes ``floor(N/m)``, with the remainder spread over the first blocks."""
    if m < 1 or N < m:
        raise DimensionError(f"need N >= m >= 1, got N={N}, m={m}")
    base, extra = divmod(N, m)
    return tuple(base + (1 if i < extra else 0) for i in range(m))


def _canonical_b(N, m, mu):
    """The fixed ones of the companion ``B``: row ``sum(mu[:i+1]) - 1``, column ``i``."""
    b = np.zeros((N, m))
    ends = np.cumsum(mu) - 1
    for i in range(m):
        b[ends[i], i] = 1.0
    return b


class CompanionDynamics:
    """Controllable companion-form ``(A, B)``.

    Attributes:
        a_params: ``(m, N)`` tensor, the learnable last row of every block row.
        b_params: ``(m(m-1)/2,)`` tensor, the learnable entries of ``B`` right
            of each fixed one.
    """

    structure = "companion"

    def __init__(self, N, m, init_scale=0.0, rng=None):
        self.N, self.m = int(N), int(m)
        self.mu = kronecker_indices(self.N, self.m)
        ends = np.cumsum(self.mu) - 1
        starts = ends - np.array(self.mu) + 1
        base = np.zeros((self.N, self.N))
        for s, mu_i in zip(starts, self.mu):
            for r in range(mu_i - 1):
                base[s + r, s + r + 1] = 1.0
        self._a_base = base
        self._a_index = (np.repeat(ends, self.N), np.tile(np.arange(self.N), self.m))
        b_rows, b_cols = [], []
        for i in range(self.m):
            for j in range(i + 1, self.m):
                b_rows.append(ends[i])
                b_cols.append(j)
        self._b_index = (np.array(b_rows, dtype=np.int64), np.array(b_cols, dtype=np.int64))
        self._b_base = _canonical_b(self.N, self.m, self.mu)
        rng = rng if rng is not None else np.random.default_rng(0)
        n_b = self.m * (self.m - 1) // 2
        self.a_params = ad.Tensor(init_scale * rng.standard_normal((self.m, self.N)), requires_grad=True)
        self.b_params = ad.Tensor(init_scale * rng.standard_normal(n_b), requires_grad=True)

    def parameters(self):
        return {"dynamics.a": self.a_params, "dynamics.b": self.b_params}

    @property
    def n_params(self):
        return sum(p.values.size for p in self.parameters().values())

    def materialize(self):
        """Differentiable ``(A, B)`` tensors."""
        a = ad.place(self.a_params, self._a_index, (self.N, self.N), base=self._a_base)
        b = ad.place(self.b_params, self._b_index, (self.N, self.m), base=self._b_base)
        return a, b

    def matrices(self):
        a, b = self.materialize()
        return a.values.copy(), b.values.copy()

    def learnable_mask(self):
        """Boolean masks of the entries of ``A`` and ``B`` that training may move."""
        ma = np.zeros((self.N, self.N), dtype=bool)
        ma[self._a_index] = True
        mb = np.zeros((self.N, self.m), dtype=bool)
        mb[self._b_index] = True
        return ma, mb


class DiagonalDynamics:
    """Real diagonal ``A`` and dense ``B`` (starting from the canonical ones)."""

    structure = "diagonal"

    def __init__(self, N, m, init_scale=0.0, rng=None):
        self.N, self.m = int(N), int(m)
        self.mu = kronecker_indices(self.N, self.m)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.a_params = ad.Tensor(init_scale * rng.standard_normal(self.N), requires_grad=True)
        self.b_params = ad.Tensor(_canonical_b(self.N, self.m, self.mu), requires_grad=True)
        self._diag = (np.arange(self.N), np.arange(self.N))

    def parameters(self):
        return {"dynamics.a": self.a_params, "dynamics.b": self.b_params}

    @property
    def n_params(self):
        return self.N + self.N * self.m

    def materialize(self):
        return ad.place(self.a_params, self._diag, (self.N, self.N)), self.b_params

    def matrices(self):
        a, b = self.materialize()
        return a.values.copy(), b.values.copy()

    def learnable_mask(self):
        ma = np.eye(self.N, dtype=bool)
        return ma, np.ones((self.N, self.m), dtype=bool)


class FullDynamics:
    """Unstructured ``A`` (zero start) and ``B`` (canonical-ones start)."""

    structure = "full"

    def __init__(self, N, m, init_scale=0.0, rng=None):
        self.N, self.m = int(N), int(m)
        self.mu = kronecker_indices(self.N, self.m)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.a_params = ad.Tensor(init_scale * rng.standard_normal((self.N, self.N)), requires_grad=True)
        self.b_params = ad.Tensor(_canonical_b(self.N, self.m, self.mu), requires_grad=True)

    def parameters(self):
        return {"dynamics.a": self.a_params, "dynamics.b": self.b_params}

    @property
    def n_params(self):
        return self.N * self.N + self.N * self.m

    def materialize(self):
        return self.a_params, self.b_params

    def matrices(self):
        return self.a_params.values.copy(), self.b_params.values.copy()

    def learnable_mask(self):
        return np.ones((self.N, self.N), dtype=bool), np.ones((self.N, self.m), dtype=bool)


def build_companion(N, m, init_scale=0.0, rng=None):
    return CompanionDynamics(N, m, init_scale, rng)


def build_dynamics(structure, N, m, init_scale=0.0, rng=None):
    cls = {"companion": CompanionDynamics, "diagonal": DiagonalDynamics, "full": FullDynamics}.get(structure)
    if cls is None:
        raise ValueError(f"unknown dynamics structure {structure!r}; choose from {STRUCTURES}")
    return cls(N, m, init_scale, rng)


class EmbeddingNet:
    """``z = W2 tanh(W1 (x / s) + b1) + b2`` with ``2N`` hidden units.

    ``s`` (``input_scale``) is a fixed per-coordinate scale, all ones unless
    set from data before training; it is not a trainable parameter.
    """

    def __init__(self, n, N, rng=None, hidden=None, input_scale=None):
        if N <= n:
            raise DimensionError(f"latent dimension N={N} must exceed state dimension n={n}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n, self.N = int(n), int(N)
        self.hidden = int(hidden or 2 * N)
        self.w1 = ad.Tensor(_uniform(rng, (self.hidden, n), n), requires_grad=True)
        self.b1 = ad.Tensor(_uniform(rng, (self.hidden,), n), requires_grad=True)
        self.w2 = ad.Tensor(_uniform(rng, (N, self.hidden), self.hidden), requires_grad=True)
        self.b2 = ad.Tensor(_uniform(rng, (N,), self.hidden), requires_grad=True)
        self.input_scale = np.ones(n) if input_scale is None else np.asarray(input_scale, dtype=np.float64)

    def parameters(self):
        return {"embed.w1": self.w1, "embed.b1": self.b1, "embed.w2": self.w2, "embed.b2": self.b2}

    def __call__(self, x):
        """Embed one state ``(n,)`` or a batch ``(B, n)``; differentiable."""
        x = ad.multiply(ad.tensor(x), 1.0 / self.input_scale)
        if x.values.ndim == 1:
            h = ad.tanh(ad.add(ad.matmul(self.w1, x), self.b1))
            return ad.add(ad.matmul(self.w2, h), self.b2)
        h = ad.tanh(ad.add(ad.matmul(x, ad.transpose(self.w1)), self.b1))
        return ad.add(ad.matmul(h, ad.transpose(self.w2)), self.b2)

    def numpy(self, x):
        x = np.asarray(x, dtype=np.float64) / self.input_scale
        h = np.tanh(x @ self.w1.values.T + self.b1.values)
        return h @ self.w2.values.T + self.b2.values


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class MonotoneLink:
    """Nondecreasing scalar map with ``F(0) = 0``.

    ``F(s) = softplus(a) s + sum_j softplus(v_j) (tanh(softplus(w_j) s + c_j) - tanh(c_j))``.
    Every term is nondecreasing in ``s`` for any parameter values.  The skip
    slope starts at ``softplus(a) = 1`` and the bump amplitudes start small,
    so ``F`` starts close to the identity; the learnable skip slope lets ``F``
    absorb the overall scale between latent and true costs.
    """

    def __init__(self, width=16, rng=None, init_out=-4.6):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.width = int(width)
        self.v = ad.Tensor(np.full(width, init_out), requires_grad=True)
        self.w = ad.Tensor(rng.normal(0.0, 1.0, width), requires_grad=True)
        self.c = ad.Tensor(rng.normal(0.0, 1.0, width), requires_grad=True)
        self.a = ad.Tensor(np.log(np.expm1(1.0)), requires_grad=True)

    def parameters(self):
        return {"link.a": self.a, "link.v": self.v, "link.w": self.w, "link.c": self.c}

    def __call__(self, s):
        """Apply to a scalar or a 1-D batch of scalars."""
        s = ad.tensor(s)
        col = ad.reshape(s, (-1, 1)) if s.values.ndim <= 1 else s
        pre = ad.add(ad.multiply(col, ad.softplus(self.w)), self.c)
        bumps = ad.subtract(ad.tanh(pre), ad.tanh(self.c))
        out = ad.add(ad.multiply(ad.reshape(col, (-1,)), ad.softplus(self.a)), ad.sum(ad.multiply(bumps, ad.softplus(self.v)), axis=1))
        return ad.reshape(out, s.shape)

    def numpy(self, s):
        s = np.asarray(s, dtype=np.float64)
        sp = np.logaddexp(0.0, self.w.values)
        amp = np.logaddexp(0.0, self.v.values)
        bumps = np.tanh(s[..., None] * sp + self.c.values) - np.tanh(self.c.values)
        return np.logaddexp(0.0, self.a.values) * s + bumps @ amp


class CostModel:
    """``Q = I + Qh Qh^T``, ``R = I + Rh Rh^T`` and the monotone link ``F``.

    With ``learnable=False`` both matrices stay at the identity (the
    no-cost-loss ablation).
    """

    def __init__(self, N, m, rng=None, link_width=16, init_scale=0.1, learnable=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.N, self.m = int(N), int(m)
        self.learnable = learnable
        scale = init_scale if learnable else 0.0
        self.q_hat = ad.Tensor(scale * rng.standard_normal((N, N)), requires_grad=learnable)
        self.r_hat = ad.Tensor(scale * rng.standard_normal((m, m)), requires_grad=learnable)
        self.link = MonotoneLink(link_width, rng)

    def parameters(self):
        if not self.learnable:
            return {}
        return {"cost.q_hat": self.q_hat, "cost.r_hat": self.r_hat, **self.link.parameters()}

    def Q(self):
        return ad.add(np.eye(self.N), ad.matmul(self.q_hat, ad.transpose(self.q_hat)))

    def R(self):
        return ad.add(np.eye(self.m), ad.matmul(self.r_hat, ad.transpose(self.r_hat)))

    def matrices(self):
        q = self.Q().values
        r = self.R().values
        return 0.5 * (q + q.T), 0.5 * (r + r.T)


class LatentSystem:
    """Embedding, latent dynamics and latent cost with consistent ``(n, m, N)``."""

    def __init__(self, embedding, dynamics, cost, control_scale=None):
        if not (embedding.N == dynamics.N == cost.N and dynamics.m == cost.m):
            raise DimensionError("embedding, dynamics and cost disagree on N or m")
        self.embedding = embedding
        self.dynamics = dynamics
        self.cost = cost
        m = dynamics.m
        self.control_scale = np.ones(m) if control_scale is None else np.asarray(control_scale, dtype=np.float64)

    def set_scales(self, state_scale, control_scale):
        """Fix the state and control units the latent model works in."""
        self.embedding.input_scale = np.asarray(state_scale, dtype=np.float64).reshape(self.n)
        self.control_scale = np.asarray(control_scale, dtype=np.float64).reshape(self.m)

    def latent_control(self, u):
        return np.asarray(u, dtype=np.float64) / self.control_scale

    @classmethod
    def create(cls, n, m, N, structure="companion", rng=None, learn_cost=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(
            EmbeddingNet(n, N, rng),
            build_dynamics(structure, N, m, rng=rng),
            CostModel(N, m, rng, learnable=learn_cost),
        )

    @property
    def n(self):
        return self.embedding.n

    @property
    def m(self):
        return self.dynamics.m

    @property
    def N(self):
        return self.embedding.N

    def parameters(self):
        return {**self.embedding.parameters(), **self.dynamics.parameters(), **self.cost.parameters()}

    def state_dict(self):
        return {k: v.values.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, arrays):
        for k, p in self.parameters().items():
            p.values[...] = arrays[k]


def embed(system, x):
    return system.embedding(x)


def latent_step(z, u, dynamics):
    """``A z + B u`` for one latent state or a ``(B, N)`` batch."""
    a, b = dynamics.materialize()
    z, u = ad.tensor(z), ad.tensor(u)
    if z.values.ndim == 1:
        return ad.add(ad.matmul(a, z), ad.matmul(b, u))
    return ad.add(ad.matmul(z, ad.transpose(a)), ad.matmul(u, ad.transpose(b)))


def _check_batch(batch):
    if len(batch) == 0:
        raise ValueError("empty batch")


def consistency_loss(batch, system):
    """Mean of ``||phi(x') - (A phi(x) + B u)||^2``; gradients reach phi at both steps."""
    _check_batch(batch)
    z = system.embedding(batch.x)
    z_next = system.embedding(batch.x_next)
    pred = latent_step(z, system.latent_control(batch.u), system.dynamics)
    return ad.mean(ad.l2_norm_sq(ad.subtract(z_next, pred), axis=1))


def cost_loss(batch, system):
    """Mean of ``(c - F(phi(x)'Q phi(x) + u'R u))^2``."""
    _check_batch(batch)
    z = system.embedding(batch.x)
    u = system.latent_control(batch.u)
    s = ad.add(ad.quadratic_form(z, system.cost.Q()), ad.quadratic_form(u, system.cost.R()))
    pred = system.cost.link(s)
    return ad.mean(ad.square(ad.subtract(batch.c, pred)))


def total_loss(batch, system, use_cost_loss=True, weights=(1.0, 1.0)):
    """Weighted sum of the two losses; returns ``(total, consistency, cost)`` tensors."""
    cons = consistency_loss(batch, system)
    if not use_cost_loss:
        return ad.scale(cons, weights[0]), cons, None
    cst = cost_loss(batch, system)
    return ad.add(ad.scale(cons, weights[0]), ad.scale(cst, weights[1])), cons, cst


@dataclass(frozen=True)
class LalqrController:
    """Frozen embedding plus a static gain: ``u = clip(-S K phi(x))``.

    ``K`` is the latent-unit gain and ``S = diag(control_scale)``.  The
    products ``S K W2``, ``S K b2`` and ``W1 / input_scale`` are folded at
    construction so each call is two small matrix-vector products.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    K: np.ndarray
    control_low: np.ndarray
    control_high: np.ndarray
    A: np.ndarray = None
    B: np.ndarray = None
    input_scale: np.ndarray = None
    control_scale: np.ndarray = None

    def __post_init__(self):
        n, m = self.w1.shape[1], self.K.shape[0]
        sx = np.ones(n) if self.input_scale is None else np.asarray(self.input_scale, dtype=np.float64)
        su = np.ones(m) if self.control_scale is None else np.asarray(self.control_scale, dtype=np.float64)
        object.__setattr__(self, "input_scale", sx)
        object.__setattr__(self, "control_scale", su)
        sk = su[:, None] * self.K
        object.__setattr__(self, "_w1", self.w1 / sx)
        object.__setattr__(self, "_kw2", -(sk @ self.w2))
        object.__setattr__(self, "_kb2", -(sk @ self.b2))

    def embed(self, x):
        return self.w2 @ np.tanh(self._w1 @ x + self.b1) + self.b2

    def act(self, x):
        u = self._kw2 @ np.tanh(self._w1 @ x + self.b1) + self._kb2
        return np.minimum(np.maximum(u, self.control_low), self.control_high)

    __call__ = act

    def closed_loop_radius(self):
        return linalg.spectral_radius(self.A - self.B @ self.K)

    def reset(self):
        pass


def synthesize(system, control_low=None, control_high=None):
    """Infinite-horizon LQR gain for the current latent model.

    Raises:
        SynthesisError: the Riccati solve failed; the message lists the open
            loop spectrum of ``A``.
    """
    a, b = system.dynamics.matrices()
    q, r = system.cost.matrices()
    try:
        sol = linalg.dare_solve(a, b, q, r)
    except LalqrError as exc:
        try:
            spec = np.round(linalg.eigenvalues(a), 4)
        except LalqrError:
            spec = "unavailable"
        raise SynthesisError(f"gain synthesis failed ({exc}); spectrum of A: {spec}", system=system) from exc
    m = system.m
    lo = np.full(m, -np.inf) if control_low is None else np.asarray(control_low, dtype=np.float64)
    hi = np.full(m, np.inf) if control_high is None else np.asarray(control_high, dtype=np.float64)
    emb = system.embedding
    return LalqrController(
        emb.w1.values.copy(), emb.b1.values.copy(), emb.w2.values.copy(), emb.b2.values.copy(),
        sol.K, lo, hi, a, b, emb.input_scale.copy(), system.control_scale.copy(),
    )


def act(controller, x):
    return controller.act(np.asarray(x, dtype=np.float64))


def embedding_jacobian(system, x):
    """``d phi / d x`` at ``x`` by reverse-mode differentiation, ``(N, n)``."""
    return ad.jacobian(system.embedding, x)


def local_feedback(system, K, x):
    """Physical-unit linearization ``-S K dphi/dx`` of ``u = -S K phi(x)`` at ``x``."""
    return -(system.control_scale[:, None] * K) @ embedding_jacobian(system, x)


def eigen_diagnostic(system, env, x_target, u_target, L=None, K=None, equilibrium_tol=1e-8):
    """Mismatch between local closed-loop eigenpairs and the latent closed loop.

    With ``C = df/dx + df/du L`` at the target and its eigenpairs
    ``(lam_i, v_i)``, ``D = A - B K`` and ``J = dphi/dx`` at the target, returns
    ``sum_i ||D J v_i - lam_i J v_i||_2`` (complex vectors measured through
    their real and imaginary parts).  ``L=None`` closes the true system with
    the latent controller's own local feedback (:func:`local_feedback`).

    Raises:
        DiagnosticError: ``(x_target, u_target)`` is not an equilibrium.
    """
    x_target = np.asarray(x_target, dtype=np.float64)
    u_target = np.asarray(u_target, dtype=np.float64)
    drift = np.max(np.abs(env.step(x_target, u_target) - x_target))
    if drift > equilibrium_tol:
        raise DiagnosticError(f"target is not an equilibrium (one-step drift {drift:.3g})")
    if K is None:
        K = synthesize(system).K
    jac = embedding_jacobian(system, x_target)
    if L is None:
        L = -(system.control_scale[:, None] * K) @ jac
    fx, fu = env.linearize(x_target, u_target)
    c = fx + fu @ np.asarray(L, dtype=np.float64).reshape(env.control_dim, env.state_dim)
    dec = linalg.eigen(c)
    a, b = system.dynamics.matrices()
    d = a - b @ K
    jv = jac @ dec.eigenvectors
    r = d @ jv - jv * dec.eigenvalues
    return float(np.sum(np.linalg.norm(r, axis=0)))


def save_system(path, system, controller=None, meta=None):
    """Checkpoint every parameter plus the structure metadata and, if given, ``K``."""
    head = {
        "type": "lalqr",
        "n": system.n, "m": system.m, "N": system.N,
        "structure": system.dynamics.structure,
        "kronecker_indices": list(system.dynamics.mu),
        "hidden": system.embedding.hidden,
        "link_width": system.cost.link.width,
        "learn_cost": system.cost.learnable,
    }
    head.update(meta or {})
    tensors = dict(system.parameters())
    tensors["input_scale"] = system.embedding.input_scale
    tensors["control_scale"] = system.control_scale
    if not system.cost.learnable:
        tensors.update({"cost.q_hat": system.cost.q_hat, "cost.r_hat": system.cost.r_hat,
                        **system.cost.link.parameters()})
    if controller is not None:
        tensors.update({"K": controller.K, "control_low": controller.control_low,
                        "control_high": controller.control_high})
    ad.save_checkpoint(path, tensors, head)


def system_from_checkpoint(arrays, meta):
    system = LatentSystem(
        EmbeddingNet(meta["n"], meta["N"], hidden=meta["hidden"]),
        build_dynamics(meta["structure"], meta["N"], meta["m"]),
        CostModel(meta["N"], meta["m"], link_width=meta["link_width"], learnable=meta["learn_cost"]),
        control_scale=arrays.get("control_scale"),
    )
    if "input_scale" in arrays:
        system.embedding.input_scale = arrays["input_scale"].copy()
    tensors = {**system.parameters(), "cost.q_hat": system.cost.q_hat, "cost.r_hat": system.cost.r_hat,
               **system.cost.link.parameters()}
    for k, t in tensors.items():
        t.values[...] = arrays[k]
    return system


def controller_from_checkpoint(arrays, meta):
    """Rebuild the controller stored with :func:`save_system` (``K`` is not recomputed)."""
    if "K" not in arrays:
        raise ValueError("checkpoint holds no synthesized gain")
    system = system_from_checkpoint(arrays, meta)
    emb = system.embedding
    a, b = system.dynamics.matrices()
    return LalqrController(emb.w1.values.copy(), emb.b1.values.copy(), emb.w2.values.copy(),
                           emb.b2.values.copy(), arrays["K"], arrays["control_low"],
                           arrays["control_high"], a, b, emb.input_scale.copy(), system.control_scale.copy())


def load_system(path):
    arrays, meta = ad.load_checkpoint(path)
    if meta.get("type") != "lalqr":
        raise ValueError(f"{path} is not a latent-system checkpoint")
    return system_from_checkpoint(arrays, meta), meta
