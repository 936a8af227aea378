import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from qlinksim.cqed import system_space
from qlinksim.linalg import (
    DimensionError,
    HilbertSpace,
    LinearOperator,
    StateVector,
    Subsystem,
    annihilation,
    apply,
    basis_state,
    check_projectors,
    dump_state_csv,
    embed,
    fidelity,
    inner,
    load_state_csv,
    measure_projective,
    overlap,
    product_state,
    projector,
    reduced_density_matrix,
    transition,
)

SPACE = system_space(1)


def random_state(space, rng):
    v = rng.normal(size=space.total_dim) + 1j * rng.normal(size=space.total_dim)
    return StateVector(space, v / np.linalg.norm(v), True)


def random_unitary(n, rng):
    q, r = np.linalg.qr(rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n)))
    return q * (np.diag(r) / np.abs(np.diag(r)))


def test_dimensions_and_labels():
    assert SPACE.labels == ("atom1", "atomb", "atom2", "atoma", "cav1", "cav2")
    assert SPACE.total_dim == 324
    assert system_space(2).total_dim == 729
    assert SPACE.basis_label(SPACE.basis_index(
        {"atom1": "g", "atomb": "e", "atom2": "R", "atoma": "R", "cav1": 0, "cav2": 0})) == "g,e,R,R,0,0"


def test_invalid_spaces():
    with pytest.raises(DimensionError):
        Subsystem("x", ("only",))
    with pytest.raises(DimensionError):
        HilbertSpace.of(("a", 2), ("a", 3))
    with pytest.raises(DimensionError):
        SPACE.position("nope")


@given(st.integers(0, 323))
def test_index_digits_roundtrip(idx):
    levels = {s.label: s.levels[d] for s, d in zip(SPACE.subsystems, SPACE.digits(idx))}
    assert SPACE.basis_index(levels) == idx


def test_embed_identity():
    eye = LinearOperator.identity(SPACE.subspace(["atom1"]))
    full = embed(eye, SPACE)
    assert abs(full.entries - sp.identity(324)).max() == 0


def test_embed_matches_kron():
    space = HilbertSpace.of(("atom1", ("g", "e", "r")), ("cav1", 2))
    op = embed(transition(space["atom1"], "r", "e"), space)
    local = np.zeros((3, 3))
    local[2, 1] = 1
    np.testing.assert_array_equal(op.to_dense(), np.kron(local, np.eye(2)))


def test_embed_reversed_order_of_local_factors():
    space = HilbertSpace.of(("x", 2), ("y", 3), ("z", 2))
    rng = np.random.default_rng(0)
    m = rng.normal(size=(4, 4))
    # local operator given on (z, x); compare with an explicit permutation
    op = embed(LinearOperator(space.subspace(["z", "x"]), sp.csr_matrix(m)), space)
    t = m.reshape(2, 2, 2, 2)  # z, x, z', x'
    dense = np.einsum("ZXzx,Yy->XYZxyz", t, np.eye(3)).reshape(12, 12)
    np.testing.assert_allclose(op.to_dense(), dense)


def test_embed_errors():
    other = Subsystem("atom1", ("g", "e"))
    with pytest.raises(DimensionError):
        embed(transition(other, "g", "e"), SPACE)
    with pytest.raises(DimensionError):
        embed(transition(Subsystem("ghost", ("a", "b")), "a", "b"), SPACE)


def test_annihilation_kills_vacuum_exhaustively():
    a = embed(annihilation(SPACE["cav1"]), SPACE)
    pos = SPACE.position("cav1")
    for idx in range(SPACE.total_dim):
        out = a.entries @ basis_state(SPACE, dict(zip(SPACE.labels, [
            s.levels[d] for s, d in zip(SPACE.subsystems, SPACE.digits(idx))]))).amplitudes
        if SPACE.digits(idx)[pos] == 0:
            assert not out.any()
        else:
            assert np.count_nonzero(out) == 1


def test_apply_ladder_and_identity():
    cav = HilbertSpace.of(("cav", 2))
    out = apply(annihilation(cav["cav"]), basis_state(cav, {"cav": 1}))
    np.testing.assert_array_equal(out.amplitudes, [1, 0])
    rng = np.random.default_rng(1)
    psi = random_state(SPACE, rng)
    np.testing.assert_array_equal(apply(LinearOperator.identity(SPACE), psi).amplitudes, psi.amplitudes)
    assert not apply(LinearOperator.identity(SPACE), psi).is_normalized


def test_embed_homomorphism():
    rng = np.random.default_rng(2)
    sub = SPACE.subspace(["atom2"])
    a, b = (rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3)) for _ in range(2))
    A = LinearOperator(sub, sp.csr_matrix(a))
    B = LinearOperator(sub, sp.csr_matrix(b))
    lhs = embed(A @ B, SPACE).entries
    rhs = embed(A, SPACE).entries @ embed(B, SPACE).entries
    assert abs(lhs - rhs).max() < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_unitary_preserves_norm(seed):
    rng = np.random.default_rng(seed)
    u = embed(LinearOperator(SPACE.subspace(["atomb", "cav2"]), sp.csr_matrix(random_unitary(6, rng))), SPACE)
    psi = random_state(SPACE, rng)
    assert abs(apply(u, psi).norm() - 1) < 1e-10


def test_inner_properties():
    rng = np.random.default_rng(3)
    phi, psi = random_state(SPACE, rng), random_state(SPACE, rng)
    assert inner(phi, psi) == pytest.approx(np.conj(inner(psi, phi)), abs=1e-14)
    assert inner(psi, psi).imag == 0 and inner(psi, psi).real > 0
    atom = HilbertSpace.of(("a", ("g", "e")))
    assert inner(basis_state(atom, {"a": "g"}), basis_state(atom, {"a": "e"})) == 0


def test_measure_simple_cases():
    atom = HilbertSpace.of(("a", ("g", "e")))
    pe = projector(atom, "a", ("e",))
    ps = [pe, LinearOperator.identity(atom) - pe]
    for u in (0.0, 0.5, 0.999):
        k, _, prob = measure_projective(basis_state(atom, {"a": "e"}), ps, u)
        assert (k, prob) == (0, 1.0)
    plus = product_state(atom, {"a": {"g": 2 ** -0.5, "e": 2 ** -0.5}})
    k, post, prob = measure_projective(plus, ps, 0.1)
    assert k == 0 and prob == pytest.approx(0.5, abs=1e-15)
    assert post.is_normalized


def test_measure_rejects_bad_projectors():
    atom = HilbertSpace.of(("a", ("g", "e", "r")))
    with pytest.raises(ValueError):
        check_projectors([projector(atom, "a", ("g",)), projector(atom, "a", ("e",))])
    with pytest.raises(ValueError):
        check_projectors([projector(atom, "a", ("g", "e")), projector(atom, "a", ("e", "r"))])
    with pytest.raises(ValueError):
        measure_projective(StateVector(atom, np.zeros(3)), [LinearOperator.identity(atom)], 0.3)


def test_measure_frequencies_binomial():
    # 4-sigma bound on outcome frequencies over 1e5 draws
    space = HilbertSpace.of(("a", ("g", "e", "r")))
    psi = product_state(space, {"a": {"g": 0.6, "e": 0.48j, "r": 0.64}})
    ps = [projector(space, "a", (lv,)) for lv in ("g", "e", "r")]
    probs = np.array([0.36, 0.2304, 0.4096])
    rng = np.random.default_rng(4)
    n = 100_000
    counts = np.zeros(3)
    for u in rng.random(n):
        counts[measure_projective(psi, ps, u, validate=False)[0]] += 1
    sigma = np.sqrt(n * probs * (1 - probs))
    assert np.all(np.abs(counts - n * probs) < 4 * sigma)


def test_reduced_density_and_fidelity():
    space = HilbertSpace.of(("x", 2), ("y", 2))
    bell = StateVector(space, np.array([1, 0, 0, 1]) / np.sqrt(2))
    np.testing.assert_allclose(reduced_density_matrix(bell, ["y"]), np.eye(2) / 2)
    prod = product_state(space, {"x": {"0": 0.6, "1": 0.8}, "y": "1"})
    assert fidelity(reduced_density_matrix(prod, ["x"]), [0.6, 0.8]) == pytest.approx(1.0)


def test_overlap_normalization_flag():
    space = HilbertSpace.of(("x", 2))
    t = basis_state(space, {"x": 0})
    psi = StateVector(space, np.array([0.5, 0.0]))
    assert overlap(t, psi) == pytest.approx(1.0)
    assert overlap(t, psi, normalize=False) == pytest.approx(0.25)


def test_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    psi = random_state(SPACE, rng)
    path = tmp_path / "state.csv"
    dump_state_csv(psi, path)
    header = path.read_text().splitlines()[0]
    assert header == "basis_index,basis_label,re,im"
    back = load_state_csv(path, SPACE)
    np.testing.assert_array_equal(back.amplitudes, psi.amplitudes)


def test_state_invariants():
    with pytest.raises(DimensionError):
        StateVector(SPACE, np.zeros(10))
    with pytest.raises(ValueError):
        StateVector(HilbertSpace.of(("x", 2)), np.array([1.0, 1.0]), True)
    with pytest.raises(ValueError):
        StateVector(HilbertSpace.of(("x", 2)), np.array([np.nan, 1.0]))
