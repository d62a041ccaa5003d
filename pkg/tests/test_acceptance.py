"""Acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that the session summary prints.  The
cartpole criteria share one :class:`Lab` whose datasets are cached under
``$LALQR_ACCEPTANCE_DIR`` (default ``~/.cache/lalqr/acceptance``).  Trained
models are reused across criteria, but every criterion is charged the full
wall time of the collection, training and evaluation it depends on.
"""
import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from lalqr import autodiff as ad
from lalqr import baselines, latent, linalg
from lalqr.config import TrainConfig
from lalqr.data import Dataset
from lalqr.envs import CartPole, double_integrator
from lalqr.expert import IlqrPlanner, NoisyExpert, PlannerConfig
from lalqr.experiments import ExperimentSettings, Lab, eigen_trace_summary
from lalqr.harness import collect, evaluate, train_lalqr

ACCEPTANCE_DIR = os.environ.get("LALQR_ACCEPTANCE_DIR", os.path.expanduser("~/.cache/lalqr/acceptance"))


def finite_horizon_dp(a, b, q, r, steps=500):
    P = np.zeros_like(q)
    for _ in range(steps):
        K = np.linalg.solve(r + b.T @ P @ b, b.T @ P @ a)
        P = q + a.T @ P @ (a - b @ K)
        P = 0.5 * (P + P.T)
    return P, K


def stabilizable_system(rng, N, m):
    a = rng.uniform(-1, 1, (N, N))
    a *= rng.uniform(0.5, 1.2) / max(1e-3, np.max(np.abs(np.linalg.eigvals(a))))
    b = rng.uniform(-1, 1, (N, m))
    gq, gr = rng.uniform(-1, 1, (N, N)), rng.uniform(-1, 1, (m, m))
    return a, b, np.eye(N) + gq @ gq.T, np.eye(m) + gr @ gr.T


def test_criterion_01_riccati(record_criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_p = worst_k = 0.0
    for _ in range(50):
        N, m = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        a, b, q, r = stabilizable_system(rng, N, m)
        sol = linalg.dare_solve(a, b, q, r)
        P, K = finite_horizon_dp(a, b, q, r)
        worst_p = max(worst_p, np.max(np.abs(sol.P - P)))
        worst_k = max(worst_k, np.max(np.abs(sol.K - K)))
    golden = abs(linalg.dare_solve(1.0, 1.0, 1.0, 1.0).P[0, 0] - (1 + math.sqrt(5)) / 2)
    seconds = time.perf_counter() - start
    ok = worst_p <= 1e-6 and worst_k <= 1e-6 and golden <= 1e-9 and seconds < 5
    record_criterion(1, ok, f"max|dP|={worst_p:.2e} max|dK|={worst_k:.2e} scalar err={golden:.1e} ({seconds:.2f}s)")
    assert ok


def relative_gradient_error(f, params, h=1e-6):
    """||analytic - central difference|| / ||central difference|| over all parameters."""
    _, analytic = ad.grad(f, params)
    a = np.concatenate([g.reshape(-1) for g in analytic])
    numeric = []
    for p in params:
        flat = p.values.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric.append((fp - fm) / (2 * h))
    n = np.array(numeric)
    return np.linalg.norm(a - n) / np.linalg.norm(n)


def test_criterion_02_gradients(record_criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    worst = {"consistency": 0.0, "cost": 0.0, "il": 0.0}
    for _ in range(10):
        system = latent.LatentSystem.create(4, 1, 6, "companion", rng)
        for p in system.parameters().values():
            p.values[...] += 0.3 * rng.standard_normal(p.shape)
        system.set_scales(rng.uniform(0.5, 2, 4), [rng.uniform(1, 5)])
        x = rng.standard_normal((16, 4))
        batch = Dataset(x, rng.standard_normal((16, 1)), rng.uniform(0, 5, 16),
                        x + 0.1 * rng.standard_normal((16, 4)))
        params = list(system.parameters().values())
        worst["consistency"] = max(worst["consistency"], relative_gradient_error(
            lambda: latent.consistency_loss(batch, system), params))
        worst["cost"] = max(worst["cost"], relative_gradient_error(lambda: latent.cost_loss(batch, system), params))
        policy = baselines.IlPolicy(4, 1, (8, 6), rng)
        u = rng.standard_normal((16, 1))
        worst["il"] = max(worst["il"], relative_gradient_error(
            lambda: baselines.regression_loss(policy, x, u), list(policy.parameters().values())))
    seconds = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-4 and seconds < 30
    record_criterion(2, ok, " ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f" ({seconds:.1f}s)")
    assert ok


def test_criterion_03_companion(record_criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    bad = []
    for N in range(2, 33):
        for m in range(1, min(4, N) + 1):
            dyn = latent.build_companion(N, m)
            if dyn.n_params != N * m + m * (m - 1) // 2:
                bad.append((N, m, "count"))
            A0, B0 = dyn.matrices()
            if linalg.controllability_rank(A0, B0) != N:
                bad.append((N, m, "rank"))
            mask_a, mask_b = dyn.learnable_mask()
            params = dyn.parameters()
            opt = ad.AdamW(params, lr=0.05)
            ta, tb = ad.tensor(rng.standard_normal((N, N))), ad.tensor(rng.standard_normal((N, m)))
            for _ in range(100):
                def loss():
                    a, b = dyn.materialize()
                    return ad.add(ad.sum(ad.square(ad.subtract(a, ta))), ad.sum(ad.square(ad.subtract(b, tb))))
                _, grads = ad.grad(loss, list(params.values()))
                opt.step(dict(zip(params, grads)))
            A1, B1 = dyn.matrices()
            if np.any(A1[~mask_a] != A0[~mask_a]) or np.any(B1[~mask_b] != B0[~mask_b]):
                bad.append((N, m, "zeros"))
    seconds = time.perf_counter() - start
    ok = not bad and seconds < 10
    record_criterion(3, ok, f"violations={bad[:5]} ({seconds:.1f}s)")
    assert ok


def test_criterion_04_cost_model(record_criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    min_eig = np.inf
    for _ in range(20):
        N, m = int(rng.integers(1, 21)), int(rng.integers(1, 5))
        cost = latent.CostModel(N, m, rng, init_scale=float(rng.uniform(0.1, 5)))
        q, r = cost.matrices()
        # eigvalsh itself is accurate to a few ulps of the matrix norm
        tol = 1e-13 * max(np.linalg.norm(q, 2), np.linalg.norm(r, 2))
        min_eig = min(min_eig, np.min(np.linalg.eigvalsh(q)) + tol, np.min(np.linalg.eigvalsh(r)) + tol)
    violations = 0
    for _ in range(20):
        link = latent.MonotoneLink(16, rng)
        for p in link.parameters().values():
            p.values[...] = rng.normal(0, 3, p.shape)
        s = rng.uniform(-100, 100, (10_000, 2))
        lo, hi = s.min(axis=1), s.max(axis=1)
        violations += int(np.sum(link.numpy(lo) > link.numpy(hi)))
    seconds = time.perf_counter() - start
    ok = min_eig >= 1.0 and violations == 0 and seconds < 5
    record_criterion(4, ok, f"min eig={min_eig:.6f} monotonicity violations={violations} ({seconds:.2f}s)")
    assert ok


def test_criterion_05_lq_degeneracy(record_criterion):
    start = time.perf_counter()
    env = double_integrator()
    expert = IlqrPlanner(env, PlannerConfig(max_iterations=1))
    # the clean expert only visits its own closed-loop subspace; the noisy one excites every direction
    data = collect(env, NoisyExpert(expert, np.random.default_rng([0, 1])), 50, 0)
    lolqr = baselines.fit_lolqr(env)
    res = train_lalqr(data, TrainConfig(seed=0, latent_dim=3, epochs=150), env, lolqr.feedback)
    optimal = linalg.dare_solve(env.A, env.B, env.Q, env.R).K

    def total(controller):
        return evaluate(env, controller, 20, seed=1000, warmup=0).total_cost_mean

    reference = total(lambda x: -optimal @ x)
    ratios = {tag: total(c) / reference for tag, c in
              (("expert", expert), ("lolqr", lolqr), ("lalqr", res.controller))}
    seconds = time.perf_counter() - start
    ok = all(abs(v - 1) <= 0.05 for v in ratios.values()) and seconds < 120
    record_criterion(5, ok, " ".join(f"{k}={v:.4f}" for k, v in ratios.items()) + f" x optimal ({seconds:.0f}s)")
    assert ok


def test_criterion_10_physics(record_criterion):
    start = time.perf_counter()
    env = CartPole()
    rng = np.random.default_rng(10)
    drift = 0.0
    for _ in range(5):
        x = np.array([0.0, rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)])
        e0 = env.energy(x)
        for _ in range(100):
            x = env.step(x, [0.0])
        drift = max(drift, abs(env.energy(x) - e0) / abs(e0))
    jac = 0.0
    for _ in range(100):
        x = rng.uniform([-2, -math.pi, -3, -3], [2, math.pi, 3, 3])
        u = rng.uniform(-10, 10, 1)
        fx, fu = env.linearize(x, u)
        gx, gu = env.linearize_fd(x, u)
        scale = max(1.0, np.max(np.abs(gx)), np.max(np.abs(gu)))
        jac = max(jac, max(np.max(np.abs(fx - gx)), np.max(np.abs(fu - gu))) / scale)
    seconds = time.perf_counter() - start
    ok = drift <= 1e-6 and jac <= 1e-5 and seconds < 5
    record_criterion(10, ok, f"energy drift={drift:.1e} jacobian err={jac:.1e} ({seconds:.2f}s)")
    assert ok


# ---------------------------------------------------------------------------
# cartpole criteria
# ---------------------------------------------------------------------------


class Workbench:
    """Memoizes datasets, models and evaluations together with their wall times."""

    def __init__(self):
        settings = ExperimentSettings(env="cartpole", out=ACCEPTANCE_DIR, train=TrainConfig())
        self.lab = Lab(settings)
        self._cache = {}

    def _memo(self, key, fn):
        if key not in self._cache:
            start = time.perf_counter()
            value = fn()
            self._cache[key] = (value, time.perf_counter() - start)
        return self._cache[key]

    def data(self, noisy=False):
        """Dataset and the seconds it took to collect (recorded at collection time)."""
        data, _ = self._memo(("data", noisy), lambda: self.lab.dataset(noisy))
        return data, self.lab.collection_seconds(noisy) or 0.0

    def lalqr(self, noisy=False, **overrides):
        # keyed by the resolved config so equivalent override sets share one model
        key = ("lalqr", noisy, repr(replace(self.lab.s.train, **overrides)))
        tag = "_".join(f"{k}={v}" for k, v in sorted(overrides.items())) or "lalqr"
        return self._memo(key, lambda: self.lab.train(self.data(noisy)[0], tag, allow_failure=True, **overrides))

    def il(self, noisy=False):
        return self._memo(("il", noisy), lambda: self.lab.train_il(self.data(noisy)[0]))

    def evaluate(self, key, controller, episodes, init_mode="train"):
        return self._memo(("eval", key, episodes, init_mode),
                          lambda: self.lab.evaluate(controller, str(key), episodes=episodes, init_mode=init_mode))


@pytest.fixture(scope="module")
def bench():
    return Workbench()


@pytest.mark.slow
def test_criterion_06_main(bench, record_criterion):
    data, t_collect = bench.data()
    res, t_train = bench.lalqr()
    lal, t_lal = bench.evaluate("lalqr", res.controller, 100)
    # the expert runs at planning speed; its mean over 20 episodes keeps the budget
    ex, t_ex = bench.evaluate("expert", bench.lab.expert(), 20)
    seconds = t_collect + t_train + t_lal + t_ex
    ok = (lal.stabilized >= 95 and lal.total_cost_mean <= 2 * ex.total_cost_mean
          and lal.time_ms_mean <= 0.1 * ex.time_ms_mean and seconds < 1800)
    record_criterion(6, ok, f"stabilized {lal.stabilized}/100, cost {lal.total_cost_mean:.1f} vs expert "
                     f"{ex.total_cost_mean:.1f}, step {lal.time_ms_mean:.3f}ms vs {ex.time_ms_mean:.2f}ms "
                     f"({seconds / 60:.1f} min incl. collection {t_collect / 60:.1f})")
    assert ok


@pytest.mark.slow
def test_criterion_07_eigen_trace(bench, record_criterion):
    seconds = 0.0
    traces = {}
    for structure in ("companion", "full", "diagonal"):
        for seed in range(3):
            res, t = bench.lalqr(structure=structure, seed=seed)
            seconds += t
            traces[f"{structure}_seed{seed}"] = res.trace
    s = eigen_trace_summary(traces)
    comp, full, diag = s["companion"], s["full"], s["diagonal"]
    # without a stabilizing gain at the end of training the diagnostic is undefined;
    # like a failed controller it ranks worse than any finite value
    diag_final = diag["final"] if np.isfinite(diag["final"]) else np.inf
    checks = {
        "companion final <= 0.1 initial": comp["final"] <= 0.1 * comp["initial"],
        "full decreases": full["final"] < full["initial"],
        "full variance >= 2x companion": full["trace_variance"] >= 2 * comp["trace_variance"],
        "diagonal final > companion final": diag_final > comp["final"],
        "runtime < 45 min": seconds < 2700,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record_criterion(7, ok, f"companion {comp['initial']:.3g}->{comp['final']:.3g}, full {full['initial']:.3g}->"
                     f"{full['final']:.3g} var {full['trace_variance']:.3g} vs {comp['trace_variance']:.3g}, "
                     f"diagonal final {diag['final']:.3g} (defined on {diag['final_defined']}/3 seeds, last "
                     f"defined {diag['last_finite']:.3g}) ({seconds / 60:.1f} min) failed={failed}")
    assert ok


@pytest.mark.slow
def test_criterion_08_generalization(bench, record_criterion):
    _, t_noisy = bench.data(noisy=True)
    lal_n, t1 = bench.lalqr(noisy=True)
    il_n, t2 = bench.il(noisy=True)
    ln, t3 = bench.evaluate("lalqr_noisy", lal_n.controller, 20)
    iln, t4 = bench.evaluate("il_noisy", il_n, 20)
    lal, t5 = bench.lalqr()
    il, t6 = bench.il()
    lu, t7 = bench.evaluate("lalqr", lal.controller, 1, "unseen")
    iu, t8 = bench.evaluate("il", il, 1, "unseen")
    seconds = t_noisy + t1 + t2 + t3 + t4 + t5 + t6 + t7 + t8
    checks = {
        "noisy terminal cost lalqr < il": ln.terminal_cost < iln.terminal_cost,
        "unseen total cost lalqr < il": lu.total_cost_mean < iu.total_cost_mean,
        "unseen lalqr stabilized": lu.stabilized == 1,
        "runtime < 30 min": seconds < 1800,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record_criterion(8, ok, f"noisy terminal cost {ln.terminal_cost:.3g} vs il {iln.terminal_cost:.3g}; unseen "
                     f"cost {lu.total_cost_mean:.1f} vs il {iu.total_cost_mean:.1f}, terminal |pos| "
                     f"{lu.terminal_pos:.3f} |angle| {lu.terminal_angle:.3f} ({seconds / 60:.1f} min) failed={failed}")
    assert ok


@pytest.mark.slow
def test_criterion_09_ablations(bench, record_criterion):
    seconds = 0.0
    costs = {}
    for structure in ("companion", "full", "diagonal"):
        res, t = bench.lalqr(structure=structure)
        rep, te = bench.evaluate(structure, res.controller, 100)
        seconds += t + te
        costs[structure] = rep.total_cost_mean
        if structure == "companion":
            with_cost = rep
    res, t = bench.lalqr(use_cost_loss=False)
    nocost, te = bench.evaluate("no_cost_loss", res.controller, 100)
    seconds += t + te
    checks = {
        "companion < full": costs["companion"] < costs["full"],
        "full < diagonal": costs["full"] < costs["diagonal"],
        "no-cost-loss stabilizes": nocost.stabilized >= 95,
        "no-cost-loss reacts slower": nocost.time_to_threshold > with_cost.time_to_threshold,
        "runtime < 45 min": seconds < 2700,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record_criterion(9, ok, "costs " + " ".join(f"{k}={v:.1f}" for k, v in costs.items())
                     + f"; no-cost-loss stabilized {nocost.stabilized}/100 ttt {nocost.time_to_threshold:.1f} vs "
                     f"{with_cost.time_to_threshold:.1f} ({seconds / 60:.1f} min) failed={failed}")
    assert ok
