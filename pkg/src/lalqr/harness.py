"""Data collection, LaLQR training and closed-loop evaluation."""
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from lalqr import autodiff as ad
from lalqr import latent
from lalqr.config import TrainConfig, control_scale_for, latent_dim_for
from lalqr.data import Dataset
from lalqr.envs import wrap_angle
from lalqr.errors import LalqrError, NonFiniteError, SynthesisError

log = logging.getLogger(__name__)

# (position index, angle index) used for terminal statistics; None when absent
STATE_LAYOUT = {"cartpole": (0, 1), "pendulum": (None, 0), "double_integrator": (0, None)}


def _layout(env):
    return STATE_LAYOUT.get(env.name, (0, None))


# ---------------------------------------------------------------------------
# collection
# ---------------------------------------------------------------------------


def collect(env, expert_actor, E, seed, init_mode="train", horizon=None):
    """Roll out ``expert_actor`` for ``E`` full episodes and record every step.

    The actor is a callable ``x -> u`` with an optional ``reset()``.  An
    episode in which the actor or the integrator fails is dropped with a
    warning.  Initial states come from ``env.sample_initial`` with a
    generator seeded by ``seed``.
    """
    if E < 1:
        raise ValueError("need at least one episode")
    rng = np.random.default_rng(seed)
    horizon = horizon or env.spec.episode_horizon
    parts, dropped = [], []
    for e in range(E):
        x = env.sample_initial(rng, init_mode)
        if hasattr(expert_actor, "reset"):
            expert_actor.reset()
        xs, us, cs, xns = [], [], [], []
        try:
            for _ in range(horizon):
                u = env.clamp(env._control(expert_actor(x)))
                xn = env.step(x, u)
                xs.append(x)
                us.append(u)
                cs.append(env.stage_cost(x, u))
                xns.append(xn)
                x = xn
        except LalqrError as exc:
            log.warning("episode %d dropped: %s", e, exc)
            dropped.append(e)
            continue
        parts.append(Dataset(np.array(xs), np.array(us), np.array(cs), np.array(xns), env.name,
                             np.full(len(xs), e, dtype=np.int64)))
        log.info("collected episode %d/%d", e + 1, E)
    if not parts:
        raise LalqrError("every collection episode failed")
    data = Dataset.concatenate(parts, env.name)
    data.dropped = dropped
    return data


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    """Trained model, its controller and the per-step trace.

    ``controller`` is ``None`` only on results attached to a
    :class:`SynthesisError`.

    ``trace`` rows are ``(step, consistency, cost, eigen)``; ``eigen`` is NaN
    between diagnostic evaluations and when synthesis failed at that step.
    """

    system: latent.LatentSystem
    controller: latent.LalqrController
    trace: np.ndarray
    final_loss: float
    final_consistency: float
    final_cost: float
    config: TrainConfig = None
    wall_time: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def eigen_trace(self):
        rows = self.trace[~np.isnan(self.trace[:, 3])]
        return rows[:, [0, 3]]


def dataset_losses(system, data, use_cost_loss=True, chunk=8192):
    """Mean consistency and cost losses over a whole dataset, without recording."""
    n = len(data)
    cons = cst = 0.0
    for start in range(0, n, chunk):
        part = data[start:start + chunk]
        w = len(part) / n
        cons += w * latent.consistency_loss(part, system).item()
        if use_cost_loss:
            cst += w * latent.cost_loss(part, system).item()
    return cons, (cst if use_cost_loss else float("nan"))


def data_scales(data, floor=1e-6):
    """Per-coordinate standard deviations of states and controls (floored)."""
    return np.maximum(np.std(data.x, axis=0), floor), np.maximum(np.std(data.u, axis=0), floor)


def _diagnose(system, env, target, feedback):
    try:
        L = None if isinstance(feedback, str) and feedback == "self" else feedback
        return latent.eigen_diagnostic(system, env, target[0], target[1], L)
    except SynthesisError:
        return float("nan")


def train_lalqr(dataset, config=None, env=None, feedback=None, target=None, system=None):
    """Minibatch AdamW on the latent losses, then offline gain synthesis.

    Args:
        dataset: transitions to fit.
        config: :class:`TrainConfig`.
        env: needed for the eigen diagnostic and the controller's bounds.
        feedback: local feedback ``L`` (``m x n``) for the diagnostic, or
            ``"self"`` for the latent controller's own local feedback; the
            diagnostic is skipped when ``None``.
        target: ``(x*, u*)`` for the diagnostic; defaults to the env goal.
        system: continue training this system instead of a fresh one.

    Raises:
        SynthesisError: the final Riccati solve failed; ``system`` and the
            controller-less ``result`` are attached.
    """
    config = config or TrainConfig()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    if system is None:
        N = latent_dim_for(config, dataset.env_name)
        system = latent.LatentSystem.create(dataset.state_dim, dataset.control_dim, N, config.structure,
                                            rng, learn_cost=config.use_cost_loss)
        if config.normalize:
            sx, su = data_scales(dataset)
            fixed = control_scale_for(config, dataset.env_name)
            system.set_scales(sx, su if fixed is None else np.full(dataset.control_dim, fixed))
    params = system.parameters()
    names = list(params)
    opt = ad.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    weights = (config.consistency_weight, config.cost_weight)
    do_diag = env is not None and feedback is not None and config.diagnostic_every > 0
    if do_diag and target is None:
        target = (env.goal_state, env.goal_control)

    rows = []
    step = 0
    if do_diag:
        rows.append((0, np.nan, np.nan, _diagnose(system, env, target, feedback)))
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), config.batch_size):
            batch = dataset[order[start:start + config.batch_size]]
            with ad.Tape():
                total, cons, cst = latent.total_loss(batch, system, config.use_cost_loss, weights)
                grads = ad.backward(total, [params[k] for k in names])
            opt.step(dict(zip(names, grads)))
            step += 1
            eig = np.nan
            if do_diag and step % config.diagnostic_every == 0:
                eig = _diagnose(system, env, target, feedback)
            rows.append((step, cons.item(), cst.item() if cst is not None else np.nan, eig))
        log.info("epoch %d/%d: consistency %.4g cost %.4g", epoch + 1, config.epochs, rows[-1][1], rows[-1][2])
    if do_diag and step % config.diagnostic_every != 0:
        rows.append((step, np.nan, np.nan, _diagnose(system, env, target, feedback)))

    lo = env.control_low if env is not None else None
    hi = env.control_high if env is not None else None
    cons, cst = dataset_losses(system, dataset, config.use_cost_loss)
    final = weights[0] * cons + (weights[1] * cst if config.use_cost_loss else 0.0)
    result = TrainResult(system, None, np.array(rows, dtype=np.float64), final, cons, cst, config)
    try:
        result.controller = latent.synthesize(system, lo, hi)
    except SynthesisError as exc:
        result.wall_time = time.perf_counter() - t0
        exc.result = result
        raise
    result.wall_time = time.perf_counter() - t0
    return result


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Closed-loop statistics over ``episodes`` rollouts.

    Costs of failed episodes (non-finite action or state) count as ``inf``
    and are also tallied in ``failed``.  Times are milliseconds per act call;
    the std is over episodes of each episode's mean time.
    """

    tag: str
    episodes: int
    total_cost_mean: float
    total_cost_std: float
    time_ms_mean: float
    time_ms_std: float
    terminal_pos: float
    terminal_angle: float
    terminal_cost: float
    time_to_threshold: float
    stabilized: int
    failed: int
    total_costs: np.ndarray = None
    traces: list = None

    def row(self):
        return {
            "controller": self.tag,
            "episodes": self.episodes,
            "total_cost_mean": self.total_cost_mean,
            "total_cost_std": self.total_cost_std,
            "time_ms_mean": self.time_ms_mean,
            "time_ms_std": self.time_ms_std,
            "terminal_pos": self.terminal_pos,
            "terminal_angle": self.terminal_angle,
            "terminal_cost": self.terminal_cost,
            "time_to_threshold": self.time_to_threshold,
            "stabilized": self.stabilized,
            "failed": self.failed,
        }


TIMING_COLUMNS = ("time_ms_mean", "time_ms_std")


def failed_report(tag, episodes):
    """Report for a controller that could not be built: every episode failed."""
    inf = float("inf")
    return EvalReport(tag, episodes, inf, inf, float("nan"), float("nan"), inf, inf, inf, float("nan"),
                      0, episodes, np.full(episodes, inf))


def _terminal(env, x):
    pi, ai = _layout(env)
    pos = abs(x[pi]) if pi is not None else 0.0
    ang = abs(wrap_angle(x[ai])) if ai is not None else 0.0
    return pos, ang


def evaluate(env, controller, episodes=100, init_mode="train", seed=0, tag="controller",
             warmup=100, keep_traces=False, pos_tol=0.1, angle_tol=0.05, horizon=None):
    """Run ``episodes`` closed-loop rollouts and summarize them.

    Only the ``controller(x)`` call is timed (monotonic clock); ``warmup``
    untimed calls precede the first episode.  An episode counts as
    stabilized when the terminal ``|pos| <= pos_tol`` and
    ``|angle| <= angle_tol``.  ``time_to_threshold`` is the mean first step
    at which ``|pos| < pos_tol`` (the horizon when never reached).
    """
    if episodes < 1:
        raise ValueError("need at least one episode")
    rng = np.random.default_rng(seed)
    horizon = horizon or env.spec.episode_horizon
    inits = [env.sample_initial(rng, init_mode) for _ in range(episodes)]
    reset = getattr(controller, "reset", lambda: None)
    reset()
    for _ in range(warmup):
        controller(inits[0])
    pi, _ = _layout(env)
    totals, times, term_pos, term_ang, term_cost, ttt, traces = [], [], [], [], [], [], []
    failed = 0
    clock = time.perf_counter_ns
    for x0 in inits:
        reset()
        x = x0.copy()
        total = 0.0
        elapsed = 0
        first = horizon
        xs, us = [x.copy()], []
        ok = True
        try:
            for t in range(horizon):
                if pi is not None and first == horizon and abs(x[pi]) < pos_tol:
                    first = t
                t0 = clock()
                u = controller(x)
                elapsed += clock() - t0
                u = np.asarray(u, dtype=np.float64).reshape(env.control_dim)
                if not np.all(np.isfinite(u)):
                    raise NonFiniteError("controller returned a non-finite action")
                u = env.clamp(u)
                total += env.stage_cost(x, u)
                x = env.step(x, u)
                if keep_traces:
                    xs.append(x.copy())
                    us.append(u.copy())
        except (NonFiniteError, FloatingPointError) as exc:
            log.warning("%s: episode failed: %s", tag, exc)
            ok = False
        if ok:
            totals.append(total)
            p, a = _terminal(env, x)
            term_pos.append(p)
            term_ang.append(a)
            term_cost.append(env.stage_cost(x, np.zeros(env.control_dim)))
        else:
            failed += 1
            totals.append(np.inf)
            term_pos.append(np.inf)
            term_ang.append(np.inf)
            term_cost.append(np.inf)
        ttt.append(first)
        times.append(elapsed / 1e6 / max(1, horizon))
        if keep_traces:
            traces.append((np.array(xs), np.array(us)))
    totals = np.array(totals)
    term_pos, term_ang = np.array(term_pos), np.array(term_ang)
    stabilized = int(np.sum((term_pos <= pos_tol) & (term_ang <= angle_tol)))
    with np.errstate(invalid="ignore"):
        return EvalReport(
            tag, episodes,
            float(np.mean(totals)), float(np.std(totals)) if failed == 0 else float("inf"),
            float(np.mean(times)), float(np.std(times)),
            float(np.mean(term_pos)), float(np.mean(term_ang)), float(np.mean(term_cost)),
            float(np.mean(ttt)), stabilized, failed, totals, traces if keep_traces else None,
        )
