"""Composite Hilbert spaces, sparse operators and dense state vectors.

Subsystems carry a label and a tuple of level names, so basis states can be
addressed as ``{"atom1": "e", "cav1": "0"}`` and printed as ``"e,g,R,R,0,0"``.
Operators are stored as CSR matrices, states as dense complex arrays.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

COMPLETENESS_TOL = 1e-10


class DimensionError(ValueError):
    """Raised when spaces, labels or array shapes do not line up."""


@dataclass(frozen=True)
class Subsystem:
    label: str
    levels: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(str(x) for x in self.levels))
        if len(self.levels) < 2:
            raise DimensionError(f"subsystem {self.label!r} needs at least 2 levels")
        if len(set(self.levels)) != len(self.levels):
            raise DimensionError(f"subsystem {self.label!r} has repeated level names")

    @property
    def dim(self) -> int:
        return len(self.levels)

    def level_index(self, level: str | int) -> int:
        if isinstance(level, (int, np.integer)):
            if not 0 <= level < self.dim:
                raise DimensionError(f"level {level} out of range for {self.label!r}")
            return int(level)
        try:
            return self.levels.index(level)
        except ValueError:
            raise DimensionError(f"{self.label!r} has no level {level!r}") from None


@dataclass(frozen=True)
class HilbertSpace:
    """Ordered tensor product of labelled subsystems.

    The first subsystem is the most significant digit of the flat index.
    """

    subsystems: tuple[Subsystem, ...]

    def __post_init__(self):
        object.__setattr__(self, "subsystems", tuple(self.subsystems))
        labels = [s.label for s in self.subsystems]
        if not labels:
            raise DimensionError("a Hilbert space needs at least one subsystem")
        if len(set(labels)) != len(labels):
            raise DimensionError(f"duplicate subsystem labels in {labels}")

    @classmethod
    def of(cls, *parts: tuple[str, Sequence[str] | int]) -> "HilbertSpace":
        """Build from ``(label, levels)`` pairs; an int gives levels ``0..n-1``."""
        subs = []
        for label, levels in parts:
            if isinstance(levels, int):
                levels = tuple(str(i) for i in range(levels))
            subs.append(Subsystem(label, tuple(levels)))
        return cls(tuple(subs))

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(s.label for s in self.subsystems)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(s.dim for s in self.subsystems)

    @property
    def total_dim(self) -> int:
        return math.prod(self.dims)

    def position(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise DimensionError(f"unknown subsystem label {label!r}") from None

    def __getitem__(self, label: str) -> Subsystem:
        return self.subsystems[self.position(label)]

    def __contains__(self, label: str) -> bool:
        return label in self.labels

    def strides(self) -> tuple[int, ...]:
        out = []
        acc = 1
        for d in reversed(self.dims):
            out.append(acc)
            acc *= d
        return tuple(reversed(out))

    def subspace(self, labels: Iterable[str]) -> "HilbertSpace":
        return HilbertSpace(tuple(self[label] for label in labels))

    def tensor(self, other: "HilbertSpace") -> "HilbertSpace":
        return HilbertSpace(self.subsystems + other.subsystems)

    def basis_index(self, levels: Mapping[str, str | int]) -> int:
        unknown = set(levels) - set(self.labels)
        if unknown:
            raise DimensionError(f"unknown subsystem labels {sorted(unknown)}")
        idx = 0
        for sub, stride in zip(self.subsystems, self.strides()):
            if sub.label not in levels:
                raise DimensionError(f"no level given for subsystem {sub.label!r}")
            idx += sub.level_index(levels[sub.label]) * stride
        return idx

    def digits(self, index: int) -> tuple[int, ...]:
        return tuple(int(x) for x in np.unravel_index(index, self.dims))

    def basis_label(self, index: int) -> str:
        return ",".join(s.levels[d] for s, d in zip(self.subsystems, self.digits(index)))


@dataclass(frozen=True, eq=False)
class StateVector:
    space: HilbertSpace
    amplitudes: np.ndarray
    is_normalized: bool = False

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex).reshape(-1)
        if amps.shape[0] != self.space.total_dim:
            raise DimensionError(
                f"state has {amps.shape[0]} amplitudes, space needs {self.space.total_dim}"
            )
        if not np.all(np.isfinite(amps)):
            raise ValueError("state amplitudes must be finite")
        amps.flags.writeable = False
        object.__setattr__(self, "amplitudes", amps)
        if self.is_normalized and abs(np.linalg.norm(amps) - 1.0) >= 1e-10:
            raise ValueError("state flagged as normalized has norm != 1")

    def norm2(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real)

    def norm(self) -> float:
        return math.sqrt(self.norm2())

    def normalized(self) -> "StateVector":
        n = self.norm()
        if n == 0.0:
            raise ValueError("cannot normalize a zero state")
        return StateVector(self.space, self.amplitudes / n, True)

    def __add__(self, other: "StateVector") -> "StateVector":
        _check_same(self.space, other.space)
        return StateVector(self.space, self.amplitudes + other.amplitudes)

    def __sub__(self, other: "StateVector") -> "StateVector":
        _check_same(self.space, other.space)
        return StateVector(self.space, self.amplitudes - other.amplitudes)

    def __mul__(self, scalar: complex) -> "StateVector":
        return StateVector(self.space, self.amplitudes * scalar)

    __rmul__ = __mul__

    def amplitude(self, levels: Mapping[str, str | int]) -> complex:
        return complex(self.amplitudes[self.space.basis_index(levels)])


@dataclass(frozen=True, eq=False)
class LinearOperator:
    space: HilbertSpace
    entries: sp.csr_matrix
    hermitian_hint: bool = False

    def __post_init__(self):
        m = sp.csr_matrix(self.entries, dtype=complex)
        n = self.space.total_dim
        if m.shape != (n, n):
            raise DimensionError(f"operator shape {m.shape} does not match dimension {n}")
        if not np.all(np.isfinite(m.data)):
            raise ValueError("operator entries must be finite")
        m.sum_duplicates()
        m.eliminate_zeros()
        object.__setattr__(self, "entries", m)

    @classmethod
    def identity(cls, space: HilbertSpace) -> "LinearOperator":
        return cls(space, sp.identity(space.total_dim, dtype=complex, format="csr"), True)

    @classmethod
    def zero(cls, space: HilbertSpace) -> "LinearOperator":
        n = space.total_dim
        return cls(space, sp.csr_matrix((n, n), dtype=complex), True)

    def dag(self) -> "LinearOperator":
        return LinearOperator(self.space, self.entries.conj().T.tocsr(), self.hermitian_hint)

    def to_dense(self) -> np.ndarray:
        return self.entries.toarray()

    def __matmul__(self, other):
        if isinstance(other, LinearOperator):
            _check_same(self.space, other.space)
            return LinearOperator(self.space, self.entries @ other.entries)
        if isinstance(other, StateVector):
            return apply(self, other)
        return NotImplemented

    def __add__(self, other: "LinearOperator") -> "LinearOperator":
        _check_same(self.space, other.space)
        return LinearOperator(
            self.space, self.entries + other.entries, self.hermitian_hint and other.hermitian_hint
        )

    def __sub__(self, other: "LinearOperator") -> "LinearOperator":
        _check_same(self.space, other.space)
        return LinearOperator(
            self.space, self.entries - other.entries, self.hermitian_hint and other.hermitian_hint
        )

    def __mul__(self, scalar: complex) -> "LinearOperator":
        herm = self.hermitian_hint and complex(scalar).imag == 0
        return LinearOperator(self.space, self.entries * scalar, herm)

    __rmul__ = __mul__

    def __neg__(self) -> "LinearOperator":
        return self * -1.0


def _check_same(a: HilbertSpace, b: HilbertSpace) -> None:
    if a != b:
        raise DimensionError(f"spaces differ: {a.labels}/{a.dims} vs {b.labels}/{b.dims}")


def local_operator(space: HilbertSpace, matrix) -> LinearOperator:
    """Wrap a dense or sparse matrix acting on ``space``."""
    return LinearOperator(space, sp.csr_matrix(np.asarray(matrix) if not sp.issparse(matrix) else matrix))


def transition(sub: Subsystem, to: str | int, frm: str | int) -> LinearOperator:
    """``|to><frm|`` on a single subsystem."""
    m = sp.csr_matrix(
        ([1.0 + 0j], ([sub.level_index(to)], [sub.level_index(frm)])), shape=(sub.dim, sub.dim)
    )
    return LinearOperator(HilbertSpace((sub,)), m)


def annihilation(sub: Subsystem) -> LinearOperator:
    n = sub.dim
    data = np.sqrt(np.arange(1, n)).astype(complex)
    m = sp.csr_matrix((data, (np.arange(n - 1), np.arange(1, n))), shape=(n, n))
    return LinearOperator(HilbertSpace((sub,)), m)


def embed(op_local: LinearOperator, target: HilbertSpace) -> LinearOperator:
    """Lift an operator on some subsystems of ``target`` to the whole space.

    The local operator may list its subsystems in any order; the result acts as
    the identity on every factor it does not mention.
    """
    local = op_local.space
    positions = []
    for sub in local.subsystems:
        pos = target.position(sub.label)
        if target.subsystems[pos].dim != sub.dim:
            raise DimensionError(
                f"subsystem {sub.label!r}: dimension {sub.dim} vs {target.subsystems[pos].dim}"
            )
        positions.append(pos)
    if local == target:
        return op_local

    coo = op_local.entries.tocoo()
    strides = np.array(target.strides())
    rows_local = np.array(np.unravel_index(coo.row, local.dims)) if coo.nnz else np.zeros((len(positions), 0), int)
    cols_local = np.array(np.unravel_index(coo.col, local.dims)) if coo.nnz else np.zeros((len(positions), 0), int)
    pos = np.array(positions)
    row_off = strides[pos] @ rows_local
    col_off = strides[pos] @ cols_local

    rest = [i for i in range(len(target.dims)) if i not in positions]
    if rest:
        rest_dims = [target.dims[i] for i in rest]
        grid = np.indices(rest_dims).reshape(len(rest), -1)
        rest_off = strides[rest] @ grid
    else:
        rest_off = np.zeros(1, dtype=int)

    rows = (rest_off[:, None] + row_off[None, :]).ravel()
    cols = (rest_off[:, None] + col_off[None, :]).ravel()
    data = np.broadcast_to(coo.data, (rest_off.size, coo.nnz)).ravel()
    n = target.total_dim
    m = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
    return LinearOperator(target, m, op_local.hermitian_hint)


def apply_local(matrix: np.ndarray, labels: Sequence[str], psi: StateVector) -> StateVector:
    """Apply a dense matrix on the factors ``labels`` of ``psi`` without embedding it.

    Same result as ``apply(embed(...), psi)``; cheaper when the operator
    changes on every call.
    """
    space = psi.space
    pos = [space.position(lb) for lb in labels]
    local_dims = [space.dims[k] for k in pos]
    d = int(np.prod(local_dims))
    m = np.asarray(matrix)
    if m.shape != (d, d):
        raise DimensionError(f"matrix shape {m.shape} does not match local dimension {d}")
    t = np.moveaxis(psi.amplitudes.reshape(space.dims), pos, range(len(pos)))
    shape = t.shape
    t = (m @ t.reshape(d, -1)).reshape(shape)
    t = np.moveaxis(t, range(len(pos)), pos)
    return StateVector(space, t.reshape(-1))


def kron(a: LinearOperator, b: LinearOperator) -> LinearOperator:
    space = a.space.tensor(b.space)
    return LinearOperator(space, sp.kron(a.entries, b.entries, format="csr"),
                          a.hermitian_hint and b.hermitian_hint)


@lru_cache(maxsize=512)
def projector(target: HilbertSpace, label: str, levels: tuple[str, ...]) -> LinearOperator:
    """Projector onto ``levels`` of one subsystem, embedded in ``target``."""
    sub = target[label]
    diag = np.zeros(sub.dim, dtype=complex)
    for lv in levels:
        diag[sub.level_index(lv)] = 1.0
    op = LinearOperator(HilbertSpace((sub,)), sp.diags(diag, format="csr"), True)
    return embed(op, target)


def apply(op: LinearOperator, psi: StateVector) -> StateVector:
    _check_same(op.space, psi.space)
    return StateVector(psi.space, op.entries @ psi.amplitudes)


def inner(phi: StateVector, psi: StateVector) -> complex:
    """``<phi|psi>``, conjugate-linear in ``phi``."""
    _check_same(phi.space, psi.space)
    return complex(np.vdot(phi.amplitudes, psi.amplitudes))


def expectation(op: LinearOperator, psi: StateVector) -> complex:
    """Expectation value in the normalized version of ``psi``."""
    return inner(psi, apply(op, psi)) / psi.norm2()


def overlap(target: StateVector, psi: StateVector, normalize: bool = True) -> float:
    """``|<target|psi>|^2`` with ``target`` normalized.

    With ``normalize=False`` the norm of ``psi`` is kept, which for a no-jump
    trajectory weights the overlap by the no-jump probability.
    """
    t = target.normalized()
    s = psi.normalized() if normalize else psi
    return abs(inner(t, s)) ** 2


def check_projectors(projectors: Sequence[LinearOperator], tol: float = COMPLETENESS_TOL) -> None:
    if not projectors:
        raise ValueError("empty projector list")
    space = projectors[0].space
    total = sp.csr_matrix((space.total_dim, space.total_dim), dtype=complex)
    for i, p in enumerate(projectors):
        _check_same(space, p.space)
        total = total + p.entries
        for q in projectors[i + 1:]:
            cross = p.entries @ q.entries
            if cross.nnz and np.abs(cross.data).max() > tol:
                raise ValueError("projectors are not mutually orthogonal")
    diff = total - sp.identity(space.total_dim, dtype=complex, format="csr")
    if diff.nnz and np.abs(diff.data).max() > tol:
        raise ValueError("projectors do not sum to the identity")


def project(psi: StateVector, proj: LinearOperator) -> tuple[StateVector | None, float]:
    """Return the renormalized post-measurement state and its probability.

    The state is ``None`` when the outcome has zero probability.
    """
    total = psi.norm2()
    if total == 0.0:
        raise ValueError("cannot measure a zero-norm state")
    out = apply(proj, psi)
    prob = out.norm2() / total
    if prob == 0.0:
        return None, 0.0
    return StateVector(psi.space, out.amplitudes / math.sqrt(out.norm2()), True), prob


def measure_projective(
    psi: StateVector,
    projectors: Sequence[LinearOperator],
    u: float,
    validate: bool = True,
) -> tuple[int, StateVector, float]:
    """Sample a projective measurement with the uniform draw ``u`` in [0, 1).

    Outcome ``k`` is the first index whose cumulative probability exceeds ``u``.
    """
    if validate:
        check_projectors(projectors)
    total = psi.norm2()
    if total == 0.0:
        raise ValueError("cannot measure a zero-norm state")
    projected = [apply(p, psi) for p in projectors]
    probs = np.array([s.norm2() / total for s in projected])
    cum = np.cumsum(probs)
    k = int(np.searchsorted(cum, u, side="right"))
    k = min(k, len(probs) - 1)
    while probs[k] == 0.0 and k > 0:
        k -= 1
    chosen = projected[k]
    return k, StateVector(psi.space, chosen.amplitudes / chosen.norm(), True), float(probs[k])


def basis_state(space: HilbertSpace, levels: Mapping[str, str | int]) -> StateVector:
    amps = np.zeros(space.total_dim, dtype=complex)
    amps[space.basis_index(levels)] = 1.0
    return StateVector(space, amps, True)


def product_state(space: HilbertSpace, factors: Mapping[str, Mapping[str, complex] | str]) -> StateVector:
    """Tensor product of per-subsystem states.

    Each factor is either a level name or a ``{level: amplitude}`` mapping.
    """
    vec = np.ones(1, dtype=complex)
    for sub in space.subsystems:
        f = factors[sub.label]
        local = np.zeros(sub.dim, dtype=complex)
        if isinstance(f, (str, int)):
            local[sub.level_index(f)] = 1.0
        else:
            for lv, amp in f.items():
                local[sub.level_index(lv)] = amp
        vec = np.kron(vec, local)
    return StateVector(space, vec)


def reduced_density_matrix(psi: StateVector, keep: Sequence[str]) -> np.ndarray:
    """Partial trace of the normalized ``|psi><psi|`` onto ``keep`` (in that order)."""
    space = psi.space
    axes = [space.position(k) for k in keep]
    others = [i for i in range(len(space.dims)) if i not in axes]
    t = psi.amplitudes.reshape(space.dims)
    t = np.transpose(t, axes + others)
    d_keep = math.prod(space.dims[i] for i in axes)
    m = t.reshape(d_keep, -1)
    rho = m @ m.conj().T
    return rho / np.trace(rho).real


def fidelity(rho: np.ndarray, target: np.ndarray) -> float:
    """``<t|rho|t>`` for a pure target vector ``t`` (normalized here)."""
    t = np.asarray(target, dtype=complex)
    t = t / np.linalg.norm(t)
    return float(np.real(np.vdot(t, rho @ t)))


def dump_state_csv(psi: StateVector, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["basis_index", "basis_label", "re", "im"])
        for i, a in enumerate(psi.amplitudes):
            w.writerow([i, psi.space.basis_label(i), repr(float(a.real)), repr(float(a.imag))])


def load_state_csv(path, space: HilbertSpace) -> StateVector:
    amps = np.zeros(space.total_dim, dtype=complex)
    seen = set()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            i = int(row["basis_index"])
            if space.basis_label(i) != row["basis_label"]:
                raise DimensionError(f"row {i}: label {row['basis_label']!r} does not match space")
            amps[i] = complex(float(row["re"]), float(row["im"]))
            seen.add(i)
    if len(seen) != space.total_dim:
        raise DimensionError(f"expected {space.total_dim} rows, got {len(seen)}")
    return StateVector(space, amps)
