"""Brute-force verification of the loss derivation and its detach semantics.

Everything here is written as plain exhaustive enumeration with explicit
products, deliberately independent of the vectorized recurrences in the loss
module, and always in double precision. The derived tests and the `verify`
CLI subcommand route through these oracles.

Conventions: a ray is (alphas, losses/colors) with the final sample terminal
(alpha = 1). The "expectation form" scores every candidate against the
free-flight distribution over backgrounds behind it; the "product form" is
the blended per-sample loss the training path uses. Their gradients agree
exactly once the weight and background terms of the expectation form are
detached; without detaching them, they do not (the negative control).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .loss import ColorMetric


def _check_terminal(alphas) -> np.ndarray:
    a = np.asarray(alphas, dtype=np.float64)
    if a.ndim != 1 or len(a) == 0 or a[-1] != 1.0:
        raise ValueError("expected a 1-d sample row ending in a terminal alpha of 1")
    return a


def product_form_value(alphas, losses) -> float:
    """sum_i prod_{j<i}(1 - a_j) * a_i * l_i by explicit products."""
    a = _check_terminal(alphas)
    l = np.asarray(losses, dtype=np.float64)
    total = 0.0
    for i in range(len(a)):
        w = float(np.prod(1.0 - a[:i]))
        total += w * a[i] * l[i]
    return total


def enumerate_expectation(alphas, losses) -> float:
    """Candidate-vs-background expectation, exhaustively enumerated.

    For each candidate i: weight prod_{k<i}(1-a_k) times
    [a_i l_i + (1-a_i) * sum over backgrounds j>i of the free-flight
    probability of j times l_j]. O(m^2).
    """
    a = _check_terminal(alphas)
    l = np.asarray(losses, dtype=np.float64)
    m = len(a)
    total = 0.0
    for i in range(m):
        w = float(np.prod(1.0 - a[:i]))
        bg = 0.0
        reach = 1.0
        for j in range(i + 1, m):
            bg += reach * a[j] * l[j]
            reach *= 1.0 - a[j]
        total += w * (a[i] * l[i] + (1.0 - a[i]) * bg)
    return total


def expectation_constant(alphas, losses) -> float:
    """The value offset between the two forms (zero-gradient under the
    detach convention): enumerate_expectation - product_form_value."""
    return enumerate_expectation(alphas, losses) - product_form_value(alphas, losses)


def detached_expectation_grads(alphas, colors, target, metric: ColorMetric):
    """Gradients of the expectation form with weight and background detached.

    d/da_i = w_i (l_i - E[l behind i]); d/dL_i = w_i a_i dl_i/dL_i.
    All pieces enumerated explicitly.
    """
    a = _check_terminal(alphas)
    colors = np.asarray(colors, dtype=np.float64)
    l = metric.value(colors, target)
    m = len(a)
    d_alpha = np.zeros(m)
    d_color = np.zeros_like(colors)
    for i in range(m):
        w = float(np.prod(1.0 - a[:i]))
        bg = 0.0
        reach = 1.0
        for j in range(i + 1, m):
            bg += reach * a[j] * l[j]
            reach *= 1.0 - a[j]
        if i < m - 1:
            d_alpha[i] = w * (l[i] - bg)
        d_color[i] = w * a[i] * metric.grad_a(colors[i], target)
    return d_alpha, d_color


def product_form_grads(alphas, colors, target, metric: ColorMetric):
    """Gradients of the fully-differentiated product form, term by term."""
    a = _check_terminal(alphas)
    colors = np.asarray(colors, dtype=np.float64)
    l = metric.value(colors, target)
    m = len(a)
    d_alpha = np.zeros(m)
    d_color = np.zeros_like(colors)
    for i in range(m):
        w = float(np.prod(1.0 - a[:i]))
        d_color[i] = w * a[i] * metric.grad_a(colors[i], target)
        if i == m - 1:
            continue
        acc = w * l[i]
        for k in range(i + 1, m):
            mask = [j for j in range(k) if j != i]
            w_k = float(np.prod(1.0 - a[mask]))
            acc -= w_k * a[k] * l[k]
        d_alpha[i] = acc
    return d_alpha, d_color


def attached_expectation_grads(alphas, colors, target, metric: ColorMetric):
    """Negative control: differentiate the expectation form *without*
    detaching weights or backgrounds (uses E = sum_k k w_k a_k l_k)."""
    a = _check_terminal(alphas)
    colors = np.asarray(colors, dtype=np.float64)
    l = metric.value(colors, target)
    m = len(a)
    d_alpha = np.zeros(m)
    d_color = np.zeros_like(colors)
    for i in range(m):
        w = float(np.prod(1.0 - a[:i]))
        d_color[i] = (i + 1) * w * a[i] * metric.grad_a(colors[i], target)
        if i == m - 1:
            continue
        acc = (i + 1) * w * l[i]
        for k in range(i + 1, m):
            mask = [j for j in range(k) if j != i]
            w_k = float(np.prod(1.0 - a[mask]))
            acc -= (k + 1) * w_k * a[k] * l[k]
        d_alpha[i] = acc
    return d_alpha, d_color


def relative_discrepancy(g1, g2, floor: float = 1e-12) -> float:
    g1 = np.concatenate([np.ravel(x) for x in g1])
    g2 = np.concatenate([np.ravel(x) for x in g2])
    denom = np.maximum(np.maximum(np.abs(g1), np.abs(g2)), floor)
    return float(np.max(np.abs(g1 - g2) / denom))


@dataclass
class EquivalenceReport:
    max_rel_discrepancy: float
    constant: float


def grad_equivalence(alphas, colors, target, metric: ColorMetric,
                     detach: bool = True) -> EquivalenceReport:
    """Compare product-form gradients against the expectation form.

    detach=True uses the detached expectation form (should agree to float
    noise); detach=False is the negative control (should diverge).
    """
    ga = product_form_grads(alphas, colors, target, metric)
    if detach:
        gb = detached_expectation_grads(alphas, colors, target, metric)
    else:
        gb = attached_expectation_grads(alphas, colors, target, metric)
    losses = metric.value(np.asarray(colors, dtype=np.float64), target)
    return EquivalenceReport(relative_discrepancy(ga, gb),
                             expectation_constant(alphas, losses))


def finite_diff_check(loss_fn, params: np.ndarray, eps: float = 1e-5,
                      analytic: np.ndarray | None = None) -> float:
    """Max relative error of central differences vs analytic gradients.

    ``loss_fn(params) -> (value, grad)``; set ``analytic`` to reuse a
    precomputed gradient. eps must lie in [1e-7, 1e-3].
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    params = np.array(params, dtype=np.float64)   # contiguous working copy
    if analytic is None:
        _, analytic = loss_fn(params)
    analytic = np.asarray(analytic, dtype=np.float64)
    num = np.zeros_like(params)
    flat = params.ravel()
    nflat = num.ravel()
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        hi, _ = loss_fn(params)
        flat[k] = orig - eps
        lo, _ = loss_fn(params)
        flat[k] = orig
        nflat[k] = (hi - lo) / (2.0 * eps)
    scale = max(float(np.max(np.abs(analytic))),
                float(np.max(np.abs(num))), 1e-10)
    return float(np.max(np.abs(analytic - num)) / scale)


def random_ray(rng: np.random.Generator, m_max: int = 8, channels: int = 3):
    """A random sample row (alphas, colors, target) with a terminal sample."""
    m = int(rng.integers(2, m_max + 1))
    alphas = np.concatenate([rng.uniform(0.05, 0.95, m - 1), [1.0]])
    colors = rng.uniform(0.0, 1.0, (m, channels))
    target = rng.uniform(0.0, 1.0, channels)
    return alphas, colors, target
