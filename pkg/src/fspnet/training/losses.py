import numpy as np

from ..autodiff import tensor as T

LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_nll(recon, target, sigma):
    """Mean over bins (and batch) of 0.5 [ln(2 pi sigma^2) + (recon - target)^2 / sigma^2].

    ``sigma`` is the data-side uncertainty, not a learned quantity.
    """
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("gaussian_nll needs strictly positive sigma")
    target = np.asarray(target, dtype=float)
    resid = T.as_diff(recon) - target
    const = 0.5 * (LOG_2PI + 2.0 * np.log(sigma))
    return T.mean(0.5 * T.square(resid) * (1.0 / (sigma * sigma)) + const)


def latent_mse(draws, target):
    """Mean squared distance between latent draws and the target parameters."""
    return T.mean(T.square(T.as_diff(draws) - np.asarray(target, dtype=float)))


def flow_nll(flow, theta, context):
    """Mean of -log q(theta | context) over the batch."""
    return -T.mean(flow.log_prob(theta, context))
