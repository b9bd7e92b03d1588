"""
Retry utility for iterative solves.

Regularized policy iteration and mirror descent stop at an iteration cap.
This module re-runs a solve with a geometrically growing cap until it
converges or the attempts run out.
"""

from src.helpers.errors import ConvergenceError


def is_converged(result):
    """
    Returns True if a solve result reports convergence (results without a
    `converged` flag count as converged).
    """
    return bool(getattr(result, "converged", True))


def retry_on_nonconvergence(fn, *, max_iters, max_attempts=3, growth=4.0):
    """
    Run fn(max_iters), retrying with a larger iteration cap on non-convergence.

    Args:
        fn: Callable taking the iteration cap (e.g. a solve_conservative wrapper)
        max_iters: Cap for the first attempt
        max_attempts: Maximum number of attempts (default 3)
        growth: Factor applied to the cap after every failed attempt (default 4)

    Returns:
        The first converged result, or the last unconverged one if every
        attempt returned converged=False

    Raises:
        The last ConvergenceError if every attempt raised
    """
    last_result = None
    last_exc = None
    for attempt in range(max_attempts):
        cap = int(max_iters * growth ** attempt)
        try:
            result = fn(cap)
        except ConvergenceError as e:
            last_exc = e
            continue
        if is_converged(result):
            return result
        last_result = result
    if last_result is not None:
        return last_result
    raise last_exc
