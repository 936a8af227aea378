import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qlinksim.channel import (
    ChannelParams,
    EnvironmentModel,
    NoiseConfig,
    ParamSampler,
    SectorError,
    apply_channel,
    apply_env_channel,
    check_commuting,
    params_log_line,
    sample_channel,
    sample_round,
)
from qlinksim.linalg import HilbertSpace, StateVector, product_state
from qlinksim.mcwf import make_rng

import oracles

ATOMS = HilbertSpace.of(("atom1", ("g", "e", "r")), ("atomb", ("g", "e", "r")),
                        ("atom2", ("G", "E", "R")), ("atoma", ("G", "E", "R")))
PAIR = ATOMS.subspace(["atom1", "atom2"])


def amp(psi, **levels):
    return psi.amplitude(levels)


def test_ideal_map():
    psi = product_state(PAIR, {"atom1": {"g": 0.6, "e": 0.8}, "atom2": "R"})
    out = apply_channel(psi, ChannelParams.ideal())
    assert amp(out, atom1="g", atom2="R") == pytest.approx(0.6)
    assert amp(out, atom1="r", atom2="E") == pytest.approx(0.8)
    assert out.norm2() == pytest.approx(1.0)


def test_jump_map():
    psi = product_state(PAIR, {"atom1": {"g": 0.6, "e": 0.8}, "atom2": "R"})
    out = apply_channel(psi, ChannelParams.jump())
    expected = np.zeros(9, complex)
    expected[PAIR.basis_index({"atom1": "r", "atom2": "R"})] = 0.8
    np.testing.assert_allclose(out.amplitudes, expected, atol=1e-15)


def random_params(rng):
    return ParamSampler(gamma_scale=0.3).draw(rng)


def random_sector_state(rng):
    c = rng.normal(size=2) + 1j * rng.normal(size=2)
    return product_state(PAIR, {"atom1": {"g": c[0], "e": c[1]}, "atom2": "R"})


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_linearity_and_contraction(seed):
    rng = np.random.default_rng(seed)
    p = random_params(rng)
    a, b = random_sector_state(rng), random_sector_state(rng)
    z = complex(*rng.normal(size=2))
    lhs = apply_channel(StateVector(PAIR, a.amplitudes + z * b.amplitudes), p).amplitudes
    rhs = apply_channel(a, p).amplitudes + z * apply_channel(b, p).amplitudes
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    assert apply_channel(a, p).norm2() <= a.norm2() * (1 + 1e-9)


def test_no_loss_special_case():
    # |alpha| = 1 and |beta| = 1 with vanishing gammas: a pure phase map
    p = ChannelParams(np.exp(0.3j), np.exp(-1.1j))
    psi = product_state(PAIR, {"atom1": {"g": 0.6, "e": 0.8j}, "atom2": "R"})
    out = apply_channel(psi, p)
    assert out.norm2() == pytest.approx(1.0, abs=1e-14)
    assert amp(out, atom1="g", atom2="R") == pytest.approx(0.6 * np.exp(0.3j))
    assert amp(out, atom1="r", atom2="E") == pytest.approx(0.8j * np.exp(-1.1j))


def test_matches_dict_oracle_with_spectators():
    rng = np.random.default_rng(11)
    p = random_params(rng)
    state = oracles.encode(oracles.initial(0.6, 0.8j))
    psi = StateVector(ATOMS, oracles.to_vector(state, ATOMS))
    out = apply_channel(psi, p, "atom1", "atom2")
    ref = oracles.channel(state, "1", "2", p.alpha, p.beta, p.gamma1, p.gamma2)
    np.testing.assert_allclose(out.amplitudes, oracles.to_vector(ref, ATOMS), atol=1e-14)
    # atom b is a spectator: its marginal over the untouched branch is unchanged
    psi_b = StateVector(ATOMS, oracles.to_vector(oracles.initial(0.6, 0.8j), ATOMS))
    np.testing.assert_allclose(apply_channel(psi_b, ChannelParams.ideal()).norm2(), 1.0)


@pytest.mark.parametrize("levels", [{"atom1": "r", "atom2": "R"}, {"atom1": "g", "atom2": "E"}])
def test_sector_error(levels):
    with pytest.raises(SectorError):
        apply_channel(product_state(PAIR, levels), ChannelParams.ideal())


def test_params_validation():
    with pytest.raises(ValueError):
        ChannelParams(1.1, 0.5)
    with pytest.raises(ValueError):
        ChannelParams(0.5, 0.9, 0.5, 0.0)
    with pytest.raises(ValueError):
        ChannelParams(0.5, 0.0, 1.0, 0.0, jumped=True)
    with pytest.raises(ValueError):
        NoiseConfig(p_nojump=1.5)


def test_jump_frequency_binomial():
    p_nojump = 0.7
    cfg = NoiseConfig(p_nojump)
    rng = make_rng(5)
    n = 100_000
    jumps = sum(sample_channel(cfg, rng).jumped for _ in range(n))
    sigma = np.sqrt(n * p_nojump * (1 - p_nojump))
    assert abs(jumps - n * (1 - p_nojump)) < 4 * sigma


def test_correlated_draws_share_alpha_beta_exactly():
    cfg = NoiseConfig(1.0, ParamSampler(gamma_scale=0.5), correlated=True)
    rng = make_rng(3)
    for _ in range(500):
        first, second, base = sample_round(cfg, rng)
        assert first.alpha == second.alpha == base.alpha
        assert first.beta == second.beta == base.beta
    prev = ParamSampler().draw(rng)
    nxt = sample_channel(cfg, rng, previous=prev)
    assert (nxt.alpha, nxt.beta) == (prev.alpha, prev.beta)


def test_uncorrelated_draws_differ():
    cfg = NoiseConfig(1.0, ParamSampler(), correlated=False)
    first, second, _ = sample_round(cfg, make_rng(0))
    assert first.alpha != second.alpha


def test_scalar_environment_reduces_to_plain_channel():
    rng = np.random.default_rng(2)
    p = random_params(rng)
    psi = random_sector_state(rng)
    np.testing.assert_array_equal(apply_env_channel(psi, EnvironmentModel.scalar(p)).amplitudes,
                                  apply_channel(psi, p).amplitudes)


def test_commutation_check():
    x = np.array([[0, 1], [1, 0]])
    z = np.diag([1, -1])
    ind = EnvironmentModel.independent_reservoirs(0.9 * x, 0.8 * z, xi_t=[0.6, 0.8], xi_s=[0.8, 0.6])
    ok, res = check_commuting(ind)
    assert ok and res < 1e-12
    bad = EnvironmentModel(np.array([1.0, 0.0]), 0.9 * x, 0.9 * z, np.zeros((2, 2)), np.zeros((2, 2)))
    ok, res = check_commuting(bad)
    # ||(ZX - XZ)|0>|| * 0.81 = 2 * 0.81
    assert not ok and res == pytest.approx(1.62)


def test_env_channel_operator_blocks():
    env = EnvironmentModel(np.array([1.0, 0.0]), np.diag([0.9, 0.5]), np.array([[0, 0.7], [0.7, 0]]),
                           0.1 * np.eye(2), 0.2 * np.eye(2))
    space = PAIR.tensor(HilbertSpace((env.subsystem(),)))
    psi = product_state(space, {"atom1": {"g": 0.6, "e": 0.8}, "atom2": "R", "env": "x0"})
    out = apply_env_channel(psi, env)
    assert out.amplitude({"atom1": "g", "atom2": "R", "env": "x0"}) == pytest.approx(0.54)
    assert out.amplitude({"atom1": "r", "atom2": "E", "env": "x1"}) == pytest.approx(0.56)
    assert out.amplitude({"atom1": "r", "atom2": "R", "env": "x0"}) == pytest.approx(0.08)
    assert out.amplitude({"atom1": "e", "atom2": "R", "env": "x0"}) == pytest.approx(0.16)


def test_environment_validation():
    with pytest.raises(ValueError):
        EnvironmentModel(np.ones(2), 2 * np.eye(2), np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        EnvironmentModel(np.ones(2), np.eye(2), np.eye(2), 0.5 * np.eye(2), np.zeros((2, 2)))


def test_serialization_roundtrip():
    p = ChannelParams(0.3 + 0.4j, 0.5j, 0.1, -0.2j)
    assert ChannelParams.from_dict(json.loads(json.dumps(p.to_dict()))) == p
    cfg = NoiseConfig(0.4, ParamSampler(alpha_mag=(0.5, 0.9), gamma_scale=0.05), False)
    assert NoiseConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    line = json.loads(params_log_line(2, "ii", p))
    assert line["round"] == 2 and line["transmission"] == "ii"
    env = EnvironmentModel(np.array([0.6, 0.8j]), np.eye(2) * 0.5, np.eye(2) * 0.5, np.zeros((2, 2)),
                           np.zeros((2, 2)))
    back = EnvironmentModel.from_dict(json.loads(json.dumps(env.to_dict())))
    np.testing.assert_allclose(back.xi, env.xi)
    np.testing.assert_allclose(back.S, env.S)


def test_dense_and_embedded_routes_agree():
    from qlinksim.channel import channel_operator
    from qlinksim.linalg import apply

    rng = np.random.default_rng(6)
    p = random_params(rng)
    v = rng.normal(size=81) + 1j * rng.normal(size=81)
    t = v.reshape(3, 3, 3, 3)
    # keep only the channel sector for (atom1, atoma): atom1 in {g, e}, atoma = R
    t[2] = 0
    t[..., :2] = 0
    psi = StateVector(ATOMS, t.ravel())
    a = apply_channel(psi, p, "atom1", "atoma").amplitudes
    b = apply(channel_operator(ATOMS, p, "atom1", "atoma"), psi).amplitudes
    np.testing.assert_allclose(a, b, atol=1e-15)
