"""Helpers shared by the gradient-check tests."""

import numpy as np


def he_rescale(module, rng):
    """Redraw parameters at He scale so activations stay O(1) through deep stacks.

    With the default init activations shrink layer by layer, so deep gradients fall
    to ~1e-10 and many pre-activations sit within eps of a leaky-ReLU kink; central
    differences are then roundoff or kink artefacts rather than a test of the gradient.
    """
    for p in module.parameters():
        fan_in = int(np.prod(p.shape[1:])) if p.data.ndim > 1 else 1
        std = np.sqrt(2.0 / fan_in) if p.data.ndim > 1 else 0.1
        p.data = rng.normal(0.0, std, size=p.shape)


def measurable_indices(p, scale, eps, tol, k, rng):
    """Up to ``k`` elements whose analytic gradient clears the central-difference roundoff floor.

    A function whose terms sum to magnitude ``scale`` is evaluated with ~eps_machine * scale
    absolute error, so its central difference carries ~eps_machine * scale / eps of noise and a
    relative error of ``tol`` is only measurable where ``|grad|`` exceeds that over ``tol``.
    ``p.grad`` must already hold the analytic gradient.
    """
    floor = np.finfo(np.float64).eps * scale / (eps * tol)
    big = np.flatnonzero(np.abs(p.grad) > floor)
    return [np.unravel_index(i, p.shape) for i in rng.choice(big, min(k, big.size), replace=False)]
