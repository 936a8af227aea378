import numpy as np

from qlinksim._reference import ToyModel, compare, lindblad_reference, trace_distance

import oracles


def test_reference_solver_matches_matrix_exponential():
    model = ToyModel()
    h, ls = model.operators()
    psi0 = model.initial_state().amplitudes
    times = np.array([0.3, 1.0, 2.5])
    got = lindblad_reference(model, times)
    ref = oracles.lindblad_expm(h.to_dense(), [l.to_dense() for l in ls], np.outer(psi0, psi0.conj()), times)
    for a, b in zip(got, ref):
        assert trace_distance(a, b) < 1e-8
        assert abs(np.trace(a) - 1) < 1e-9


def test_trace_distance_basics():
    a = np.diag([1.0, 0.0])
    b = np.diag([0.0, 1.0])
    assert trace_distance(a, b) == 1.0
    assert trace_distance(a, a) == 0.0


def test_small_ensemble_is_close():
    rows = compare(ToyModel(), n_traj=300, base_seed=0, dt=2e-3)
    assert len(rows) == 5
    assert max(d for _, d in rows) < 0.1
