import json
import math

import numpy as np
import pytest
from scipy import stats

from qlinksim import _core
from qlinksim.linalg import HilbertSpace, LinearOperator, StateVector, annihilation, basis_state, embed, transition
from qlinksim.mcwf import (
    RNG_ALGORITHM,
    Generator,
    GeneratorTerm,
    IntegrationError,
    IntegratorConfig,
    JumpChannel,
    TrajectoryRecord,
    TrajectorySampler,
    ensemble_expectation,
    evolve_no_jump,
    make_rng,
    sample_trajectory,
)

CAV = HilbertSpace.of(("cav", 2))
A = annihilation(CAV["cav"])
N = A.dag() @ A


def decaying_cavity(kappa=1.0):
    gen = Generator.constant(N * (-1j * kappa))
    jumps = [JumpChannel("out", A * math.sqrt(2 * kappa), "cavity_output")]
    return gen, jumps


def one_photon():
    return basis_state(CAV, {"cav": 1})


def test_zero_generator_leaves_state():
    psi = one_photon()
    out = evolve_no_jump(psi, Generator.constant(LinearOperator.zero(CAV)), 0, 2, IntegratorConfig())
    np.testing.assert_array_equal(out.amplitudes, psi.amplitudes)


def test_hermitian_generator_keeps_norm():
    space = HilbertSpace.of(("q", 2))
    sx = transition(space["q"], 0, 1) + transition(space["q"], 1, 0)
    psi = basis_state(space, {"q": 0})
    out = evolve_no_jump(psi, Generator.constant(sx * 3.0), 0, 5, IntegratorConfig(dt=1e-3))
    assert abs(out.norm() - 1) < 1e-8
    # Rabi oscillation cos(3t)
    assert abs(abs(out.amplitudes[0]) - abs(math.cos(15.0))) < 1e-8


@pytest.mark.parametrize("kappa", [0.5, 1.0, 2.0])
def test_no_jump_decay_closed_form(kappa):
    gen, _ = decaying_cavity(kappa)
    for t in (0.3, 1.0, 2.0):
        out = evolve_no_jump(one_photon(), gen, 0, t, IntegratorConfig(dt=1e-3))
        assert abs(out.norm2() - math.exp(-2 * kappa * t)) < 1e-6


def test_time_dependent_coefficients_and_samples():
    gen = Generator(CAV, [GeneratorTerm(N, lambda t: -1j * t)])
    seen = []
    out = evolve_no_jump(one_photon(), gen, 0, 1.0, IntegratorConfig(dt=1e-3, sample_stride=250),
                         on_sample=lambda t, s: seen.append((t, s.norm2())))
    # d|c|^2/dt = -2t|c|^2
    assert abs(out.norm2() - math.exp(-1.0)) < 1e-8
    assert [round(t, 6) for t, _ in seen] == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_unstable_step_detected():
    # gain instead of loss violates passivity
    gen = Generator.constant(N * 1j)
    with pytest.raises(IntegrationError):
        evolve_no_jump(one_photon(), gen, 0, 1, IntegratorConfig())


def test_no_jump_channels_matches_evolution():
    space = HilbertSpace.of(("q", 2))
    sx = transition(space["q"], 0, 1) + transition(space["q"], 1, 0)
    gen = Generator.constant(sx)
    cfg = IntegratorConfig(dt=1e-3, t_final=1.3)
    psi = basis_state(space, {"q": 0})
    final, rec = sample_trajectory(psi, gen, [], cfg, seed=1)
    ref = evolve_no_jump(psi, gen, 0, 1.3, cfg)
    np.testing.assert_allclose(final.amplitudes, ref.amplitudes, atol=1e-12)
    assert rec.jump_events == []


def test_jump_times_exponential():
    kappa = 1.0
    gen, jumps = decaying_cavity(kappa)
    cfg = IntegratorConfig(dt=1e-3, t_final=6.0, sample_stride=6000)
    sampler = TrajectorySampler(gen, jumps, cfg)
    times = []
    for seed in range(10_000):
        _, rec = sampler.run(one_photon(), seed)
        if rec.jump_events:
            times.append(rec.jump_events[0].t)
    # trajectories without a jump by t_final are censored; compare the truncated law
    rate = 2 * kappa
    cdf = lambda t: (1 - np.exp(-rate * t)) / (1 - np.exp(-rate * 6.0))  # noqa: E731
    assert len(times) > 9900
    assert stats.kstest(times, cdf).pvalue > 1e-3


def test_bisection_tolerance_and_norm_monotone():
    gen, jumps = decaying_cavity()
    cfg = IntegratorConfig(dt=1e-2, t_final=5.0, norm_bisection_tol=1e-8, sample_stride=1)
    for seed in range(50):
        _, rec = sample_trajectory(one_photon(), gen, jumps, cfg, seed)
        r = make_rng(seed).random()
        if rec.jump_events:
            assert abs(rec.jump_events[0].norm2 - r) <= 1e-8 * r
            ts = [e.t for e in rec.jump_events]
            assert ts == sorted(ts)
        norms = [n for t, n in rec.norm_history if not rec.jump_events or t < rec.jump_events[0].t]
        assert all(b <= a + 1e-8 for a, b in zip(norms, norms[1:]))


def test_jump_collapses_state():
    gen, jumps = decaying_cavity()
    cfg = IntegratorConfig(dt=1e-3, t_final=3.0)
    psi = StateVector(CAV, np.array([0.6, 0.8]))
    for seed in range(20):
        final, rec = sample_trajectory(psi, gen, jumps, cfg, seed)
        if rec.jump_events:
            np.testing.assert_allclose(np.abs(final.amplitudes), [1, 0], atol=1e-12)
            break
    else:
        pytest.fail("no jump sampled")


def test_seed_determinism_and_json():
    gen, jumps = decaying_cavity()
    cfg = IntegratorConfig(dt=1e-3, t_final=2.0, sample_stride=50)
    _, a = sample_trajectory(one_photon(), gen, jumps, cfg, 42)
    _, b = sample_trajectory(one_photon(), gen, jumps, cfg, 42)
    assert a.to_json() == b.to_json()
    d = json.loads(a.to_json())
    assert set(d) == {"seed", "rng", "events", "norm_history"}
    assert d["rng"] == RNG_ALGORITHM
    assert TrajectoryRecord.from_json(a.to_json()) == a


def test_initial_state_must_be_normalized():
    gen, jumps = decaying_cavity()
    with pytest.raises(ValueError):
        sample_trajectory(StateVector(CAV, np.array([0, 2.0])), gen, jumps, IntegratorConfig(), 0)


def test_all_rates_zero_at_crossing():
    # generator decays but the jump operator never acts on the state
    space = HilbertSpace.of(("q", 2))
    gen = Generator.constant(embed(transition(space["q"], 1, 1), space) * -1j)
    jumps = [JumpChannel("wrong", transition(space["q"], 1, 0), "bad")]
    with pytest.raises(IntegrationError):
        sample_trajectory(basis_state(space, {"q": 1}), gen, jumps, IntegratorConfig(t_final=20.0), 0)


def test_ensemble_single_trajectory_and_workers():
    gen, jumps = decaying_cavity()
    cfg = IntegratorConfig(dt=1e-3, t_final=1.0, sample_stride=100)
    psi = StateVector(CAV, np.array([0.6, 0.8]))
    one = ensemble_expectation(N, psi, gen, jumps, cfg, 1, 7)
    vals = []
    sample_trajectory(psi, gen, jumps, cfg, 7, on_sample=lambda t, s: vals.append(
        (np.vdot(s.amplitudes, N.entries @ s.amplitudes) / s.norm2()).real))
    np.testing.assert_allclose(one.mean, vals)
    serial = ensemble_expectation(N, psi, gen, jumps, cfg, 40, 3)
    threaded = ensemble_expectation(N, psi, gen, jumps, cfg, 40, 3, workers=4)
    np.testing.assert_array_equal(serial.mean, threaded.mean)


def test_ensemble_photon_number_decay():
    gen, jumps = decaying_cavity()
    cfg = IntegratorConfig(dt=1e-3, t_final=1.5, sample_stride=300)
    res = ensemble_expectation(N, one_photon(), gen, jumps, cfg, 5000, 0)
    expected = np.exp(-2 * res.times)
    assert np.all(np.abs(res.mean - expected) <= 3 * np.maximum(res.stderr, 1e-12))


def test_kernel_backends_agree():
    # sender-like toy: driven three-level atom coupled to a decaying cavity
    space = HilbertSpace.of(("atom", ("g", "e", "r")), ("cav", 3))
    a = embed(annihilation(space["cav"]), space)
    er = embed(transition(space["atom"], "e", "r"), space)
    ge = embed(transition(space["atom"], "g", "e"), space)
    terms = [GeneratorTerm(a.dag() @ a * -1j),
             GeneratorTerm(er @ a, lambda t: -1j * np.sin(t)),
             GeneratorTerm((er @ a).dag(), lambda t: 1j * np.sin(t)),
             GeneratorTerm(ge + ge.dag(), lambda t: 0.3 + 0 * t)]
    gen = Generator(space, terms)
    jumps = [JumpChannel("out", a * math.sqrt(2.0), "cavity_output")]
    psi = basis_state(space, {"atom": "r", "cav": 1})
    cfg = IntegratorConfig(dt=1e-3, t_final=3.0, sample_stride=100)
    compiled = TrajectorySampler(gen, jumps, cfg, kernel=_core.kernel)
    python = TrajectorySampler(gen, jumps, cfg, kernel=_core.python_kernel)
    for seed in range(3):
        fa, ra = compiled.run(psi, seed)
        fb, rb = python.run(psi, seed)
        np.testing.assert_allclose(fa.amplitudes, fb.amplitudes, atol=1e-10)
        assert [e.channel for e in ra.jump_events] == [e.channel for e in rb.jump_events]
        np.testing.assert_allclose([e.t for e in ra.jump_events], [e.t for e in rb.jump_events], atol=1e-9)


def test_dt_halving_converges():
    gen, _ = decaying_cavity(1.5)
    a = evolve_no_jump(one_photon(), gen, 0, 2.0, IntegratorConfig(dt=2e-3)).norm2()
    b = evolve_no_jump(one_photon(), gen, 0, 2.0, IntegratorConfig(dt=1e-3)).norm2()
    assert abs(a - b) < 1e-9
