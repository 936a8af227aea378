# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled RK4 propagation for H(t) = sum_k c_k(t) H_k stored as stacked CSR."""

import numpy as np


cdef void _deriv(const long long[::1] indptr, const long long[::1] indices,
                 const double complex[::1] data, Py_ssize_t nterms, Py_ssize_t dim,
                 const double complex[::1] coef, const double complex[::1] x,
                 double complex[::1] y) noexcept nogil:
    cdef Py_ssize_t k, row, p, base
    cdef double complex c, acc
    for row in range(dim):
        y[row] = 0
    for k in range(nterms):
        c = coef[k]
        if c.real == 0.0 and c.imag == 0.0:
            continue
        base = k * dim
        for row in range(dim):
            acc = 0
            for p in range(indptr[base + row], indptr[base + row + 1]):
                acc = acc + data[p] * x[indices[p]]
            y[row] = y[row] + c * acc
    # y <- -i y
    for row in range(dim):
        y[row] = (y[row].imag) - 1j * (y[row].real)


def prepare(stacked, Py_ssize_t nterms, Py_ssize_t dim):
    return (
        np.ascontiguousarray(stacked.indptr, dtype=np.int64),
        np.ascontiguousarray(stacked.indices, dtype=np.int64),
        np.ascontiguousarray(stacked.data, dtype=np.complex128),
        nterms,
        dim,
    )


def propagate(prepared, coeffs, psi, double dt, Py_ssize_t n_steps, double threshold):
    """Advance ``psi`` by up to ``n_steps`` RK4 steps.

    ``coeffs`` holds the term coefficients on the half-step grid, shape
    ``(2 * n_steps + 1, nterms)``.  Stops early after the first step whose
    end-of-step norm squared is ``<= threshold``.

    Returns ``(psi_end, psi_before_last_step, steps_done, norms)``.
    """
    cdef const long long[::1] indptr = prepared[0]
    cdef const long long[::1] indices = prepared[1]
    cdef const double complex[::1] data = prepared[2]
    cdef Py_ssize_t nterms = prepared[3]
    cdef Py_ssize_t dim = prepared[4]
    cdef const double complex[:, ::1] cf = np.ascontiguousarray(coeffs, dtype=np.complex128)

    out = np.array(psi, dtype=np.complex128, copy=True)
    prev = out.copy()
    norms_arr = np.empty(n_steps, dtype=np.float64)
    cdef double complex[::1] x = out
    cdef double complex[::1] xp = prev
    cdef double[::1] norms = norms_arr
    cdef double complex[::1] k1 = np.empty(dim, dtype=np.complex128)
    cdef double complex[::1] k2 = np.empty(dim, dtype=np.complex128)
    cdef double complex[::1] k3 = np.empty(dim, dtype=np.complex128)
    cdef double complex[::1] k4 = np.empty(dim, dtype=np.complex128)
    cdef double complex[::1] tmp = np.empty(dim, dtype=np.complex128)
    cdef Py_ssize_t j, i, done = 0
    cdef double h2 = 0.5 * dt, h6 = dt / 6.0, nrm

    with nogil:
        for j in range(n_steps):
            for i in range(dim):
                xp[i] = x[i]
            _deriv(indptr, indices, data, nterms, dim, cf[2 * j], x, k1)
            for i in range(dim):
                tmp[i] = x[i] + h2 * k1[i]
            _deriv(indptr, indices, data, nterms, dim, cf[2 * j + 1], tmp, k2)
            for i in range(dim):
                tmp[i] = x[i] + h2 * k2[i]
            _deriv(indptr, indices, data, nterms, dim, cf[2 * j + 1], tmp, k3)
            for i in range(dim):
                tmp[i] = x[i] + dt * k3[i]
            _deriv(indptr, indices, data, nterms, dim, cf[2 * j + 2], tmp, k4)
            nrm = 0.0
            for i in range(dim):
                x[i] = x[i] + h6 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                nrm = nrm + x[i].real * x[i].real + x[i].imag * x[i].imag
            norms[j] = nrm
            done = j + 1
            if nrm <= threshold:
                break

    return out, prev, done, norms_arr[:done].copy()
