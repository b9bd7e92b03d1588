"""
Mirror descent (exponentiated gradient) on the probability simplex.

Used for the reweighting objective and for the numeric minimizer that checks
the closed-form bias minimizer. The step size adapts: it grows after every
accepted step and halves whenever a step is rejected.
"""

from dataclasses import dataclass

import numpy as np

from src.helpers.errors import ConvergenceError

# Entries at or below this are treated as sitting on the simplex boundary
ACTIVE_TOL = 1e-9
UNDERFLOW = 1e-300
NOISE_RTOL = 1e-12


@dataclass
class SimplexResult:
    x: np.ndarray
    value: float
    residual: float
    iterations: int
    converged: bool


def kkt_residual(x, grad, active_tol=ACTIVE_TOL):
    """
    Relative stationarity residual on the simplex.

    With λ = <x, ∇f>, interior entries need ∇f_i = λ and boundary entries
    need ∇f_i ≥ λ. Returns the worst violation divided by |λ|.
    """
    lam = float(x @ grad)
    scale = max(abs(lam), 1e-12)
    active = x > active_tol
    interior = np.abs(grad[active] - lam)
    boundary = np.clip(lam - grad[~active], 0.0, None)
    return max(interior.max(initial=0.0), boundary.max(initial=0.0)) / scale


def _normalize(x):
    x = np.asarray(x, dtype=float)
    x = np.where(x < UNDERFLOW, 0.0, x)
    return x / x.sum()


def mirror_descent(objective, gradient, x0, step=0.5, max_iters=20_000, tol=1e-9, exponent_clip=2.0):
    """
    Minimize a convex function over the simplex starting from x0.

    Args:
        objective: callable x -> float (may return inf outside the domain).
        gradient: callable x -> array.
        x0: starting point; entries that are zero stay zero.
        step: first multiplicative step, relative to the gradient spread.
        max_iters: iteration cap.
        tol: KKT residual that counts as converged.
        exponent_clip: bound on |exponent| of a single multiplicative update.

    Returns:
        SimplexResult
    """
    x = _normalize(x0)
    value = objective(x)
    grad = gradient(x)
    lam = float(x @ grad)
    spread = np.abs(grad - lam)[x > 0].max(initial=0.0)
    eta = step / max(spread, 1e-12)

    iterations = 0
    residual = kkt_residual(x, grad)
    while iterations < max_iters and residual > tol:
        iterations += 1
        exponent = np.clip(-eta * (grad - lam), -exponent_clip, exponent_clip)
        candidate = _normalize(x * np.exp(exponent))
        candidate_value = objective(candidate)
        accepted = False
        if np.isfinite(candidate_value) and candidate_value <= value + NOISE_RTOL * abs(value):
            candidate_grad = gradient(candidate)
            candidate_residual = kkt_residual(candidate, candidate_grad)
            # within the noise floor of the objective, progress is judged by the residual
            accepted = candidate_value < value or candidate_residual < residual
        if accepted:
            x, value, grad, residual = candidate, candidate_value, candidate_grad, candidate_residual
            lam = float(x @ grad)
            eta *= 1.5
        else:
            eta *= 0.5
            if eta < 1e-300:
                break

    return SimplexResult(x, float(value), float(residual), iterations, bool(residual <= tol))


def minimize_on_simplex(objective, gradient, support, restarts=10, seed=0, **kwargs):
    """
    Mirror descent from the uniform point on `support` plus `restarts` random
    Dirichlet starts; returns the best result over all runs.

    Raises:
        ConvergenceError: no run reached the tolerance; carries the best iterate.
    """
    support = np.asarray(support, dtype=bool)
    if not support.any():
        raise ValueError("support is empty")
    size = int(support.sum())
    rng = np.random.default_rng(seed)
    starts = [np.full(size, 1.0 / size)]
    starts += [rng.dirichlet(np.ones(size)) for _ in range(restarts)]

    def embed(z):
        full = np.zeros(support.shape)
        full[support] = z
        return full

    best = None
    for start in starts:
        result = mirror_descent(
            lambda z: objective(embed(z)),
            lambda z: gradient(embed(z))[support],
            start,
            **kwargs,
        )
        if best is None or (result.converged, -result.value) > (best.converged, -best.value):
            best = result

    best.x = embed(best.x)
    if not best.converged:
        raise ConvergenceError(
            "mirror descent did not reach the KKT tolerance",
            best=best.x,
            residual=best.residual,
            iterations=best.iterations,
        )
    return best
