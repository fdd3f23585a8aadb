"""The oracle check suite behind the `verify` CLI subcommand.

Each check returns a row (check, value, threshold, status); the suite passes
when every row does. Thresholds are fixed here, not configurable.
"""

from __future__ import annotations

import numpy as np

from .background import (BackgroundStrategy, background_probabilities,
                         effective_alphas, sample_background)
from .field import Bounds, OccupancyField, RadianceGrid
from .loss import ColorMetric, nerf_loss, radiance_field_loss, relaxed_loss
from .march import march, synthetic_batch
from .oracle import (enumerate_expectation, expectation_constant,
                     finite_diff_check, grad_equivalence, product_form_value,
                     random_ray)
from .regularize import laplacian_penalty
from .sensor import RayBatch


def _row(check, value, threshold, ok):
    return {"check": check, "value": f"{value:.3e}", "threshold": threshold,
            "status": "pass" if ok else "FAIL"}


def _flat_loss_fn(loss_op, m, target, metric, **kw):
    """Adapt a batch loss to a flat parameter vector for finite differences.

    Layout: m-1 candidate alphas then m*3 colors (terminal color included,
    exercising the environment gradient path).
    """

    def fn(params):
        alphas = np.concatenate([params[:m - 1], [1.0]])
        colors = params[m - 1:].reshape(m, 3)
        batch = synthetic_batch([alphas], [colors], np.asarray([target]))
        report, grads = loss_op(batch, metric, **kw)
        g = np.concatenate([grads.d_alpha[0, :m - 1],
                            grads.d_color[0, :m].ravel()])
        return report.total, g

    return fn


def check_grad_equivalence(n_batches=100, m_max=8, seed=0):
    rng = np.random.default_rng(seed)
    metric = ColorMetric("l2")
    worst = 0.0
    for _ in range(n_batches):
        alphas, colors, target = random_ray(rng, m_max)
        rep = grad_equivalence(alphas, colors, target, metric, detach=True)
        worst = max(worst, rep.max_rel_discrepancy)
    return worst


def check_negative_control(seed=1):
    rng = np.random.default_rng(seed)
    metric = ColorMetric("l2")
    alphas, colors, target = random_ray(rng, 8)
    rep = grad_equivalence(alphas, colors, target, metric, detach=False)
    return rep.max_rel_discrepancy


def check_constant_shift(n=50, seed=2):
    """enum - product == sum_k (k-1) w_k a_k l_k, the closed-form offset."""
    rng = np.random.default_rng(seed)
    metric = ColorMetric("l2")
    worst = 0.0
    for _ in range(n):
        alphas, colors, target = random_ray(rng)
        l = metric.value(colors, target)
        c = expectation_constant(alphas, l)
        closed = 0.0
        for k in range(len(alphas)):
            w = float(np.prod(1.0 - alphas[:k]))
            closed += k * w * alphas[k] * l[k]
        worst = max(worst, abs(c - closed) / max(abs(closed), 1e-12))
    return worst


def _frozen_relaxed_fn(alphas, colors, target, metric):
    """Relaxed-loss forward with the detached context frozen at the base
    point (weights, goal, expected background color, branch choice), so
    central differences probe exactly the gradient the op defines."""
    from .loss import _suffix_expectation

    base = synthetic_batch([alphas], [colors], np.asarray([target]))
    m = len(alphas)
    W = base.weights()[0, :m].copy()
    a0 = base.alpha[0, :m]
    c0 = base.color[0, :m]
    contrib = (W * a0)[:, None] * c0
    prev = np.concatenate([np.zeros((1, 3)), np.cumsum(contrib, 0)[:-1]])
    ok = W >= 1e-6
    goal = (target[None, :] - prev) / np.where(ok, W, 1.0)[:, None]
    Ecol = _suffix_expectation(base.color[None, 0], base.alpha[None, 0],
                               base.valid[None, 0])[0, :m]
    blend0 = a0[:, None] * c0 + (1 - a0)[:, None] * Ecol
    use_blend = (metric.value(blend0, goal) < metric.value(c0, goal)) & ok
    use_blend[-1] = False

    # the gradient under test comes from the op itself at the base point
    _, grads = relaxed_loss(base, metric)
    analytic = np.concatenate([grads.d_alpha[0, :m - 1],
                               grads.d_color[0, :m].ravel()])

    def fn(params):
        a = np.concatenate([params[:m - 1], [1.0]])
        c = params[m - 1:].reshape(m, 3)
        blend = a[:, None] * c + (1 - a)[:, None] * Ecol
        l_bl = metric.value(blend, goal)
        l_un = metric.value(c, goal)
        value = float(np.sum(np.where(ok, W * np.where(use_blend, l_bl, l_un),
                                      0.0)))
        return value, None

    return fn, analytic


def check_finite_diff(op_name: str, n_instances=50, seed=3):
    rng = np.random.default_rng(seed)
    metric = ColorMetric("l2")
    ops = {"radiance_field_loss": radiance_field_loss, "nerf_loss": nerf_loss}
    worst = 0.0
    for _ in range(n_instances):
        alphas, colors, target = random_ray(rng, m_max=6)
        m = len(alphas)
        params = np.concatenate([alphas[:-1], colors.ravel()])
        if op_name == "relaxed_loss":
            fn, analytic = _frozen_relaxed_fn(alphas, colors, target, metric)
            worst = max(worst, finite_diff_check(fn, params, eps=1e-5,
                                                 analytic=analytic))
        else:
            fn = _flat_loss_fn(ops[op_name], m, target, metric)
            worst = max(worst, finite_diff_check(fn, params, eps=1e-5))
    return worst


def check_finite_diff_laplacian(n_instances=50, seed=4):
    rng = np.random.default_rng(seed)
    bounds = Bounds(np.zeros(3), np.ones(3))
    worst = 0.0
    for _ in range(n_instances):
        occ = OccupancyField(4, bounds)
        base = rng.normal(0.0, 1.0, occ.n_vertices)
        pts = rng.uniform(0.15, 0.85, (6, 3))
        eps = 0.05

        def fn(params):
            occ.logits = params
            occ.reset_grad()
            pen, _, _ = laplacian_penalty(occ, pts, eps, accumulate_grad=True)
            return pen, occ.grad.copy()

        worst = max(worst, finite_diff_check(fn, base, eps=1e-5))
    return worst


def check_weight_normalization(seed=5):
    """sum_i w_i a_i = 1 on every marched ray (terminal included)."""
    rng = np.random.default_rng(seed)
    bounds = Bounds(-np.ones(3), np.ones(3))
    occ = OccupancyField(16, bounds)
    occ.logits = rng.normal(0.0, 2.0, occ.n_vertices).astype(np.float32)
    rad = RadianceGrid(16, bounds)
    origins = rng.uniform(-3, -2, (64, 3))
    dirs = rng.normal(size=(64, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    batch = march(occ, rad, RayBatch(origins, dirs), 0.05, np.full(3, 0.5))
    wa = batch.weights() * np.where(batch.valid, batch.alpha, 0.0)
    return float(np.max(np.abs(wa.sum(axis=1) - 1.0)))


def check_monte_carlo(n_draws=100_000, seed=6):
    """MC estimate of the candidate-vs-sampled-background loss converges to
    the enumerated expectation; returns the worst sigma distance.

    One background per draw serves every candidate in front of it. The
    expectation form weights candidate i by the probability of *reaching* it,
    while a full-ray draw lands behind i only with an extra (1 - a_i) factor,
    so each indicator term carries a 1/(1 - a_i) reweight. The terminal
    candidate has no background behind it; its term is deterministic.
    """
    rng = np.random.default_rng(seed)
    metric = ColorMetric("l2")
    worst = 0.0
    for _ in range(5):
        alphas, colors, target = random_ray(rng, m_max=5)
        m = len(alphas)
        l = metric.value(colors, target)
        expected = enumerate_expectation(alphas, l)
        batch = synthetic_batch([alphas], [colors], np.asarray([target]))
        strat = BackgroundStrategy("free_flight")
        draws = sample_background(strat, batch, rng, n_draws=n_draws)[0]
        a_c = alphas[None, :m - 1]
        front = np.arange(m - 1)[None, :] < draws[:, None]
        per = (a_c * l[None, :m - 1] + (1.0 - a_c) * l[draws][:, None]) \
            / (1.0 - a_c)
        terminal_term = float(np.prod(1.0 - alphas[:-1])) * l[-1]
        x = np.where(front, per, 0.0).sum(axis=1) + terminal_term
        se = x.std(ddof=1) / np.sqrt(n_draws)
        sigma = abs(x.mean() - expected) / max(se, 1e-12)
        worst = max(worst, sigma)
    return worst


def check_background_frequencies(seed=7, n_draws=100_000):
    """Empirical stopping frequencies match the analytic probabilities."""
    rng = np.random.default_rng(seed)
    alphas = np.array([0.5, 0.5, 1.0])
    colors = np.full((3, 3), 0.5)
    batch = synthetic_batch([alphas], [colors], np.asarray([[0.5, 0.5, 0.5]]))
    draws = sample_background(BackgroundStrategy("free_flight"), batch, rng,
                              n_draws=n_draws)[0]
    freq = np.bincount(draws, minlength=3) / n_draws
    probs = background_probabilities(
        effective_alphas(BackgroundStrategy("free_flight"), batch),
        batch.valid)[0]
    se = np.sqrt(probs * (1 - probs) / n_draws)
    return float(np.max(np.abs(freq - probs) / np.maximum(se, 1e-12)))


def run_verification(progress=print):
    """Run the whole oracle suite; returns (rows, all_passed)."""
    rows = []

    def add(name, value, threshold, ok):
        rows.append(_row(name, value, threshold, ok))
        if progress:
            progress(f"[{'pass' if ok else 'FAIL'}] {name}: {value:.3e} "
                     f"(threshold {threshold})")

    v = check_grad_equivalence()
    add("detached-expectation gradient equivalence (100 batches)",
        v, "< 1e-9", v < 1e-9)
    v = check_negative_control()
    add("non-detached negative control diverges", v, "> 1e-3", v > 1e-3)
    v = check_constant_shift()
    add("value offset matches closed form", v, "< 1e-9", v < 1e-9)
    for op in ("radiance_field_loss", "nerf_loss", "relaxed_loss"):
        v = check_finite_diff(op)
        add(f"finite differences: {op}", v, "< 1e-4", v < 1e-4)
    v = check_finite_diff_laplacian()
    add("finite differences: laplacian_penalty", v, "< 1e-4", v < 1e-4)
    v = check_weight_normalization()
    add("terminal sample normalizes weights", v, "< 1e-9", v < 1e-9)
    v = check_monte_carlo()
    add("Monte-Carlo background matches enumeration", v, "< 3 sigma", v < 3.0)
    v = check_background_frequencies()
    add("stopping frequencies match analytic probabilities",
        v, "< 3 sigma", v < 3.0)
    ok = all(r["status"] == "pass" for r in rows)
    return rows, ok
