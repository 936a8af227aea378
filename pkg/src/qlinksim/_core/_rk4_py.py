"""Pure-Python RK4 propagation; same contract as the compiled ``_rk4`` module."""

import numpy as np


def prepare(stacked, nterms, dim):
    return (stacked.tocsr(), nterms, dim)


def propagate(prepared, coeffs, psi, dt, n_steps, threshold):
    """Advance ``psi`` by up to ``n_steps`` RK4 steps.

    See the compiled implementation for the argument layout.
    """
    mat, nterms, dim = prepared
    coeffs = np.asarray(coeffs, dtype=np.complex128)

    def deriv(c, x):
        return -1j * (c @ (mat @ x).reshape(nterms, dim))

    x = np.array(psi, dtype=np.complex128, copy=True)
    prev = x
    norms = np.empty(n_steps)
    h2 = 0.5 * dt
    done = 0
    for j in range(n_steps):
        prev = x
        k1 = deriv(coeffs[2 * j], x)
        k2 = deriv(coeffs[2 * j + 1], x + h2 * k1)
        k3 = deriv(coeffs[2 * j + 1], x + h2 * k2)
        k4 = deriv(coeffs[2 * j + 2], x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        nrm = float(np.vdot(x, x).real)
        norms[j] = nrm
        done = j + 1
        if nrm <= threshold:
            break
    return x, prev.copy(), done, norms[:done].copy()
