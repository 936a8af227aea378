"""Repeat-until-success transmission of one qubit from atom 1 to atom 2.

A round runs five local/non-local steps on the four atoms ``atom1``,
``atomb`` (backup, node 1), ``atom2`` and ``atoma`` (auxiliary, node 2):

1. entangle atom 1 with the backup atom;
2. transmit atom 1 -> atom 2, then check atom 1 for ``|e>``;
3. relabel atom 1 (``r -> g``, ``g -> e``, ``e -> r``);
4. transmit atom 1 -> atom a, check atom 1 for ``|e>`` and atoms 2, a for
   ``|R>|R>``;
5. measure b, atom 1 and atom a and correct atom 2.

A failed check leaves the qubit on the backup atom, possibly after a known
level flip, and the round is repeated.  Transmissions are pluggable: channel
constants, an explicit environment model or a physical gate callable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .channel import (
    ChannelParams,
    EnvironmentModel,
    NoiseConfig,
    apply_channel,
    apply_env_channel,
    sample_round,
)
from .linalg import (
    HilbertSpace,
    LinearOperator,
    StateVector,
    embed,
    fidelity,
    measure_projective,
    product_state,
    project,
    projector,
    reduced_density_matrix,
)

ATOMS = ("atom1", "atomb", "atom2", "atoma")
SQ2 = 1 / math.sqrt(2)
ZERO_TOL = 1e-24

# Correction on atom 2 after teleportation, keyed by (b outcome, atom-1
# sign, atom-a sign).  Columns are the source levels (G, E, R).  Generated by
# scripts/derive_tables.py and checked in tests/test_protocol.py.
CORRECTION_TABLE: dict[tuple[str, str, str], np.ndarray] = {
    ("g", "+", "+"): np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=complex),
    ("g", "+", "-"): np.array([[0, -1, 0], [0, 0, 1], [1, 0, 0]], dtype=complex),
    ("g", "-", "+"): np.array([[0, 1, 0], [0, 0, -1], [1, 0, 0]], dtype=complex),
    ("g", "-", "-"): np.array([[0, -1, 0], [0, 0, -1], [1, 0, 0]], dtype=complex),
    ("e", "+", "+"): np.array([[0, 0, 1], [0, 1, 0], [1, 0, 0]], dtype=complex),
    ("e", "+", "-"): np.array([[0, 0, 1], [0, -1, 0], [1, 0, 0]], dtype=complex),
    ("e", "-", "+"): np.array([[0, 0, -1], [0, 1, 0], [1, 0, 0]], dtype=complex),
    ("e", "-", "-"): np.array([[0, 0, -1], [0, -1, 0], [1, 0, 0]], dtype=complex),
}

# Whether the backup atom's g and e must be swapped to recover the qubit
# after a detected error, keyed by where it was detected.
RECOVERY_FLIP: dict[str, bool] = {
    "ii:e": False,
    "iv:e": True,
    "iv:RR:g": False,
    "iv:RR:r": True,
}


class ProtocolError(ValueError):
    """A step was called on a state outside its precondition."""


@dataclass(frozen=True)
class QubitInput:
    c0: complex
    c1: complex

    def __post_init__(self):
        object.__setattr__(self, "c0", complex(self.c0))
        object.__setattr__(self, "c1", complex(self.c1))
        n = abs(self.c0) ** 2 + abs(self.c1) ** 2
        if abs(n - 1.0) > 1e-10:
            raise ValueError(f"|c0|^2 + |c1|^2 = {n:.12g}, expected 1")

    @classmethod
    def normalized(cls, c0: complex, c1: complex, tol: float = 1e-3) -> "QubitInput":
        """Accept amplitudes whose norm is within ``tol`` of 1 and rescale them."""
        n = abs(c0) ** 2 + abs(c1) ** 2
        if abs(n - 1.0) > tol:
            raise ValueError(f"|c0|^2 + |c1|^2 = {n:.6g} differs from 1 by more than {tol}")
        s = 1 / math.sqrt(n)
        return cls(c0 * s, c1 * s)

    @classmethod
    def random(cls, rng: np.random.Generator) -> "QubitInput":
        v = rng.normal(size=2) + 1j * rng.normal(size=2)
        v /= np.linalg.norm(v)
        return cls(v[0], v[1])

    def node1(self) -> np.ndarray:
        return np.array([self.c0, self.c1, 0], dtype=complex)

    def node1_flipped(self) -> np.ndarray:
        return np.array([self.c1, self.c0, 0], dtype=complex)

    def node2(self) -> np.ndarray:
        return np.array([self.c0, self.c1, 0], dtype=complex)


@dataclass(frozen=True)
class Measurement:
    step: str
    description: str
    outcome: str
    probability: float


@dataclass
class Transcript:
    entries: list[Measurement] = field(default_factory=list)
    rounds_used: int = 0

    def add(self, m: Measurement) -> None:
        self.entries.append(m)

    def probability(self) -> float:
        return float(np.prod([m.probability for m in self.entries])) if self.entries else 1.0

    def to_list(self) -> list[dict]:
        return [{"step": m.step, "measurement": m.description, "outcome": m.outcome,
                 "probability": m.probability} for m in self.entries]


@dataclass
class ProtocolOutcome:
    status: str
    fidelity: float
    transcript: Transcript
    reason: str | None = None
    channel_draws: list = field(default_factory=list)
    retry_fidelities: list = field(default_factory=list)

    @property
    def rounds(self) -> int:
        return self.transcript.rounds_used

    @property
    def success(self) -> bool:
        return self.status == "Success"

    def to_dict(self) -> dict:
        return {"status": self.status, "rounds": self.rounds, "fidelity": self.fidelity,
                "reason": self.reason, "branches": self.transcript.to_list(),
                "channel_draws": self.channel_draws, "retry_backup_fidelities": self.retry_fidelities}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass
class StepResult:
    status: str
    state: StateVector
    reason: str | None = None
    backup_fidelity: float | None = None
    recovered: np.ndarray | None = None

    @property
    def retry(self) -> bool:
        return self.status == "Retry"


# outcome selection ------------------------------------------------------------


class RandomOutcomes:
    """Sample measurement outcomes with the uniform draws of ``rng``."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def pick(self, psi: StateVector, projectors: Sequence[LinearOperator]):
        return measure_projective(psi, projectors, self.rng.random(), validate=False)


class _NeedBranch(Exception):
    def __init__(self, n: int):
        self.n = n


class _ZeroBranch(Exception):
    pass


class ForcedOutcomes:
    """Follow a fixed path of outcome indices; used to enumerate the branch tree."""

    def __init__(self, path: Sequence[int]):
        self.path = tuple(path)
        self.pos = 0

    def pick(self, psi: StateVector, projectors: Sequence[LinearOperator]):
        if self.pos >= len(self.path):
            raise _NeedBranch(len(projectors))
        k = self.path[self.pos]
        self.pos += 1
        state, prob = project(psi, projectors[k])
        if state is None:
            raise _ZeroBranch()
        return k, state, prob


def _measure(psi, projectors, names, step, description, outcomes, transcript):
    k, state, prob = outcomes.pick(psi, projectors)
    if transcript is not None:
        transcript.add(Measurement(step, description, names[k], float(prob)))
    return names[k], state


# local operations ---------------------------------------------------------------


def _local_unitary(space: HilbertSpace, labels: tuple[str, ...], matrix: np.ndarray) -> LinearOperator:
    local = space.subspace(labels)
    return embed(LinearOperator(local, sp.csr_matrix(matrix)), space)


def _encoding_matrix() -> np.ndarray:
    # basis (atom1, atomb) with levels (g, e, r) each; qubit block {g, e} x {g, e}
    def idx(a, b):
        return 3 * "ger".index(a) + "ger".index(b)

    u = np.eye(9, dtype=complex)
    images = {
        ("g", "g"): {("e", "g"): SQ2, ("g", "e"): SQ2},
        ("e", "g"): {("e", "e"): SQ2, ("g", "g"): SQ2},
        ("g", "e"): {("e", "g"): SQ2, ("g", "e"): -SQ2},
        ("e", "e"): {("e", "e"): SQ2, ("g", "g"): -SQ2},
    }
    for src, img in images.items():
        col = idx(*src)
        u[:, col] = 0
        for dst, amp in img.items():
            u[idx(*dst), col] = amp
    return u


ENCODING_UNITARY = _encoding_matrix()
# r -> g, g -> e, e -> r on (g, e, r)
SYMMETRIZE_UNITARY = np.array([[0, 0, 1], [1, 0, 0], [0, 1, 0]], dtype=complex)
FLIP_GE = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1]], dtype=complex)


@lru_cache(maxsize=64)
def _ops(space: HilbertSpace) -> dict:
    """Projectors and unitaries for one state space, built once."""

    def basis_proj(label, vecs):
        sub = space[label]
        m = sum(np.outer(v, v.conj()) for v in vecs)
        return embed(LinearOperator(HilbertSpace((sub,)), sp.csr_matrix(m), True), space)

    e3 = np.eye(3)
    plus_gr = (e3[0] + e3[2]) * SQ2
    minus_gr = (e3[0] - e3[2]) * SQ2
    plus_er = (e3[1] + e3[2]) * SQ2
    minus_er = (e3[1] - e3[2]) * SQ2
    rr = projector(space, "atom2", ("R",)) @ projector(space, "atoma", ("R",))
    ident = LinearOperator.identity(space)
    return {
        "e1": [projector(space, "atom1", ("e",)), projector(space, "atom1", ("g", "r"))],
        "RR": [rr, ident - rr],
        "atom1": [projector(space, "atom1", (lv,)) for lv in ("g", "e", "r")],
        "b": [projector(space, "atomb", (lv,)) for lv in ("g", "e", "r")],
        "pm1": [basis_proj("atom1", [plus_gr]), basis_proj("atom1", [minus_gr]), basis_proj("atom1", [e3[1]])],
        "pma": [basis_proj("atoma", [plus_er]), basis_proj("atoma", [minus_er]), basis_proj("atoma", [e3[0]])],
        "encode": _local_unitary(space, ("atom1", "atomb"), ENCODING_UNITARY),
        "symmetrize": _local_unitary(space, ("atom1",), SYMMETRIZE_UNITARY),
        "flip_b": _local_unitary(space, ("atomb",), FLIP_GE),
        "corrections": {k: _local_unitary(space, ("atom2",), m) for k, m in CORRECTION_TABLE.items()},
    }


def _weight(psi: StateVector, label: str, levels: tuple[str, ...]) -> float:
    p = projector(psi.space, label, levels)
    v = p.entries @ psi.amplitudes
    return float(np.vdot(v, v).real) / psi.norm2()


# states ---------------------------------------------------------------------------


def initial_state(q: QubitInput, space: HilbertSpace, extra: dict | None = None) -> StateVector:
    """``(c0|g> + c1|e>)_1 |g>_b |R>_2 |R>_a`` with cavities empty.

    ``extra`` supplies factors for any further subsystems, e.g. an
    environment vector ``{"env": {"x0": 1.0}}``.
    """
    factors = {"atom1": {"g": q.c0, "e": q.c1}, "atomb": "g", "atom2": "R", "atoma": "R"}
    for label in space.labels:
        if label.startswith("cav"):
            factors[label] = "0"
    factors.update(extra or {})
    return product_state(space, factors)


def ideal_intermediate_state(q: QubitInput, space: HilbertSpace, extra: dict | None = None) -> StateVector:
    """State after an error-free first transmission (before the ``|e>_1`` check)."""
    f = dict(extra or {})
    for label in space.labels:
        if label.startswith("cav"):
            f[label] = "0"
    psi = product_state(space, {"atom1": "r", "atomb": {"g": q.c0, "e": q.c1}, "atom2": "E", "atoma": "R", **f})
    phi = product_state(space, {"atom1": "g", "atomb": {"g": q.c1, "e": q.c0}, "atom2": "R", "atoma": "R", **f})
    return (psi + phi).normalized()


def teleport_ready_state(q: QubitInput, space: HilbertSpace, extra: dict | None = None) -> StateVector:
    """The two-component state that enters teleportation."""
    f = dict(extra or {})
    for label in space.labels:
        if label.startswith("cav"):
            f[label] = "0"
    a = product_state(space, {"atom1": "g", "atomb": {"g": q.c0, "e": q.c1}, "atom2": "E", "atoma": "R", **f})
    b = product_state(space, {"atom1": "r", "atomb": {"g": q.c1, "e": q.c0}, "atom2": "R", "atoma": "E", **f})
    return (a + b).normalized()


# transmission dispatch -----------------------------------------------------------------

Transmitter = Callable[[StateVector, str, str], StateVector]


def _transmit(psi: StateVector, channel, sender: str, receiver: str,
              fallback: ChannelParams | None = None) -> StateVector:
    if isinstance(channel, ChannelParams):
        out = apply_channel(psi, channel, sender, receiver)
        if channel.jumped and out.norm2() <= ZERO_TOL * psi.norm2():
            # nothing was emitted, so no jump could have happened
            if fallback is None:
                raise ProtocolError("jump draw annihilated the state and no fallback draw was given")
            out = apply_channel(psi, fallback, sender, receiver)
        return out
    if isinstance(channel, EnvironmentModel):
        return apply_env_channel(psi, channel, sender, receiver)
    return channel(psi, sender, receiver)


def _recover(psi: StateVector, flip: bool, q: QubitInput, reason: str) -> StepResult:
    if flip:
        psi = StateVector(psi.space, _ops(psi.space)["flip_b"].entries @ psi.amplitudes)
    rho_b = reduced_density_matrix(psi, ["atomb"])
    fid = fidelity(rho_b, q.node1())
    w, v = np.linalg.eigh(rho_b)
    return StepResult("Retry", psi, reason, fid, v[:, -1])


# steps ---------------------------------------------------------------------------------


def encode_backup(psi: StateVector) -> StateVector:
    """Entangle atom 1 with the backup atom (local to node 1)."""
    if _weight(psi, "atomb", ("g",)) < 1 - 1e-10:
        raise ProtocolError("backup atom must start in |g>")
    if _weight(psi, "atom2", ("R",)) < 1 - 1e-10 or _weight(psi, "atoma", ("R",)) < 1 - 1e-10:
        raise ProtocolError("atoms 2 and a must start in |R>")
    if _weight(psi, "atom1", ("r",)) > 1e-10:
        raise ProtocolError("atom 1 must carry the qubit in {g, e}")
    return StateVector(psi.space, _ops(psi.space)["encode"].entries @ psi.amplitudes)


def step_ii_transmit_and_check(psi: StateVector, channel, q: QubitInput, outcomes=None,
                               transcript: Transcript | None = None,
                               fallback: ChannelParams | None = None) -> StepResult:
    """Transmit atom 1 -> atom 2 and test atom 1 for ``|e>``."""
    outcomes = outcomes or RandomOutcomes(np.random.default_rng())
    out = _transmit(psi, channel, "atom1", "atom2", fallback)
    ops = _ops(out.space)
    found, state = _measure(out, ops["e1"], ("e", "not-e"), "ii", "atom1 in |e>", outcomes, transcript)
    if found == "e":
        return _recover(state, RECOVERY_FLIP["ii:e"], q, "ii:e")
    return StepResult("continue", state)


def symmetrize(psi: StateVector) -> StateVector:
    """Relabel atom 1: ``r -> g``, ``g -> e`` (and ``e -> r``)."""
    if _weight(psi, "atom1", ("e",)) > 1e-10:
        raise ProtocolError("atom 1 still has |e> amplitude before symmetrization")
    return StateVector(psi.space, _ops(psi.space)["symmetrize"].entries @ psi.amplitudes)


def step_iv_transmit_and_check(psi: StateVector, channel, q: QubitInput, outcomes=None,
                               transcript: Transcript | None = None,
                               fallback: ChannelParams | None = None) -> StepResult:
    """Transmit atom 1 -> atom a, then test atom 1 for ``|e>`` and atoms 2, a for ``|R>|R>``."""
    outcomes = outcomes or RandomOutcomes(np.random.default_rng())
    out = _transmit(psi, channel, "atom1", "atoma", fallback)
    ops = _ops(out.space)
    found, state = _measure(out, ops["e1"], ("e", "not-e"), "iv", "atom1 in |e>", outcomes, transcript)
    if found == "e":
        return _recover(state, RECOVERY_FLIP["iv:e"], q, "iv:e")
    found, state = _measure(state, ops["RR"], ("RR", "not-RR"), "iv", "atoms 2,a in |R>|R>",
                            outcomes, transcript)
    if found == "RR":
        level, state = _measure(state, ops["atom1"], ("g", "e", "r"), "iv", "atom1 level",
                                outcomes, transcript)
        key = f"iv:RR:{level}"
        if key not in RECOVERY_FLIP:
            raise ProtocolError(f"atom 1 found in unexpected level {level!r}")
        return _recover(state, RECOVERY_FLIP[key], q, key)
    return StepResult("continue", state)


def step_v_teleport(psi: StateVector, q: QubitInput, outcomes=None, transcript: Transcript | None = None,
                    form_tol: float | None = 1e-6) -> tuple[float, tuple[str, str, str], StateVector]:
    """Measure b, atom 1 and atom a, correct atom 2.

    Returns the fidelity of atom 2 with ``c0|G> + c1|E>``, the outcome triple
    and the corrected state.  With ``form_tol`` set the input must match the
    expected two-component form to that tolerance.
    """
    outcomes = outcomes or RandomOutcomes(np.random.default_rng())
    if form_tol is not None:
        atoms_only = psi.space.subspace(ATOMS)
        target = teleport_ready_state(q, atoms_only).amplitudes
        f = fidelity(reduced_density_matrix(psi, ATOMS), target)
        if f < 1 - form_tol:
            raise ProtocolError(f"teleportation input deviates from the expected form (fidelity {f:.3g})")
    ops = _ops(psi.space)
    b, state = _measure(psi, ops["b"], ("g", "e", "r"), "v", "atom b level", outcomes, transcript)
    s1, state = _measure(state, ops["pm1"], ("+", "-", "e"), "v", "atom1 in (|g>+-|r>)/sqrt2",
                         outcomes, transcript)
    sa, state = _measure(state, ops["pma"], ("+", "-", "G"), "v", "atom a in (|E>+-|R>)/sqrt2",
                         outcomes, transcript)
    key = (b, s1, sa)
    if key not in CORRECTION_TABLE:
        raise ProtocolError(f"no correction for outcome {key}")
    state = StateVector(state.space, ops["corrections"][key].entries @ state.amplitudes)
    fid = fidelity(reduced_density_matrix(state, ["atom2"]), q.node2())
    return fid, key, state


# rounds and runs ---------------------------------------------------------------------------


def run_round(q: QubitInput, space: HilbertSpace, channel_ii, channel_iv, outcomes=None,
              transcript: Transcript | None = None, fallback: ChannelParams | None = None,
              carried: QubitInput | None = None, extra: dict | None = None,
              form_tol: float | None = None) -> StepResult:
    """One pass through steps (i)-(v).

    ``carried`` is the qubit currently held (it differs from ``q`` by a
    global phase after a retry); fidelities always refer to ``q``.
    """
    outcomes = outcomes or RandomOutcomes(np.random.default_rng())
    psi = encode_backup(initial_state(carried or q, space, extra))
    res = step_ii_transmit_and_check(psi, channel_ii, q, outcomes, transcript, fallback)
    if res.retry:
        return res
    psi = symmetrize(res.state)
    res = step_iv_transmit_and_check(psi, channel_iv, q, outcomes, transcript, fallback)
    if res.retry:
        return res
    fid, _, state = step_v_teleport(res.state, q, outcomes, transcript, form_tol)
    return StepResult("Success", state, None, fid)


@dataclass
class Leaf:
    path: tuple[int, ...]
    probability: float
    result: StepResult
    transcript: Transcript


def enumerate_branches(run: Callable[[object, Transcript], StepResult]) -> list[Leaf]:
    """Enumerate every measurement branch of ``run(outcomes, transcript)``.

    Zero-probability branches are dropped.  Leaf probabilities are products of
    the conditional outcome probabilities.
    """
    leaves = []
    stack: list[tuple[int, ...]] = [()]
    while stack:
        path = stack.pop()
        src = ForcedOutcomes(path)
        tr = Transcript()
        try:
            result = run(src, tr)
        except _NeedBranch as nb:
            stack.extend(path + (k,) for k in reversed(range(nb.n)))
            continue
        except _ZeroBranch:
            continue
        leaves.append(Leaf(path, tr.probability(), result, tr))
    return leaves


def enumerate_round(q: QubitInput, draw_ii, draw_iv, fallback: ChannelParams | None = None,
                    space: HilbertSpace | None = None, extra: dict | None = None) -> list[Leaf]:
    space = space or atoms_space()
    return enumerate_branches(
        lambda src, tr: run_round(q, space, draw_ii, draw_iv, src, tr, fallback, extra=extra)
    )


def atoms_space() -> HilbertSpace:
    from .cqed import system_space
    return system_space(None)


def _run_loop(q: QubitInput, rng: np.random.Generator, max_rounds: int, space: HilbertSpace,
              next_channels: Callable[[int], tuple], extra: dict | None = None) -> ProtocolOutcome:
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    transcript = Transcript()
    outcomes = RandomOutcomes(rng)
    carried = q
    draws_log = []
    retries = []
    res = None
    for rnd in range(1, max_rounds + 1):
        transcript.rounds_used = rnd
        ch_ii, ch_iv, fallback, log = next_channels(rnd)
        draws_log.extend(log)
        res = run_round(q, space, ch_ii, ch_iv, outcomes, transcript, fallback, carried, extra)
        if not res.retry:
            return ProtocolOutcome("Success", float(res.backup_fidelity), transcript, None, draws_log, retries)
        retries.append(float(res.backup_fidelity))
        vec = res.recovered
        carried = QubitInput.normalized(vec[0], vec[1], tol=1e-6)
    return ProtocolOutcome("RetryAfterDetectedError", float(res.backup_fidelity), transcript,
                           res.reason, draws_log, retries)


def run_protocol(q: QubitInput, cfg: NoiseConfig, rng: np.random.Generator, max_rounds: int = 100) -> ProtocolOutcome:
    """Abstract-channel protocol: repeat rounds until success or ``max_rounds``."""
    space = atoms_space()

    def channels(rnd):
        d2, d4, base = sample_round(cfg, rng)
        log = [{"round": rnd, "transmission": "ii", **d2.to_dict()},
               {"round": rnd, "transmission": "iv", **d4.to_dict()}]
        return d2, d4, base, log

    return _run_loop(q, rng, max_rounds, space, channels)


def env_space(env: EnvironmentModel) -> HilbertSpace:
    return atoms_space().tensor(HilbertSpace((env.subsystem(),)))


def run_protocol_env(q: QubitInput, env: EnvironmentModel, rng: np.random.Generator,
                     max_rounds: int = 100) -> ProtocolOutcome:
    """Protocol with an explicit environment; each round starts from a fresh ``xi``."""
    if env.env_dim == 1:
        return _run_loop(q, rng, max_rounds, atoms_space(), lambda rnd: (env, env, None, []))
    space = env_space(env)
    extra = {env.label: {f"x{k}": a for k, a in enumerate(env.xi)}}
    return _run_loop(q, rng, max_rounds, space, lambda rnd: (env, env, None, []), extra)


def run_protocol_physical(q: QubitInput, p, pulses, cfg, rng: np.random.Generator, max_rounds: int = 20,
                          n_max: int = 1) -> ProtocolOutcome:
    """Protocol with both transmissions simulated as sampled trajectories of the cavity model."""
    from .cqed import run_transmission_gate, system_space

    space = system_space(n_max)
    records = []

    def gate(psi, sender, receiver):
        seed = int(rng.integers(0, 2 ** 63 - 1))
        out, rec = run_transmission_gate(psi.normalized(), sender, receiver, p, pulses, cfg, seed)
        records.append({"receiver": receiver, **rec.to_dict()})
        return out

    def channels(rnd):
        return gate, gate, None, []

    outcome = _run_loop(q, rng, max_rounds, space, channels)
    outcome.channel_draws = [{k: v for k, v in r.items() if k != "norm_history"} for r in records]
    return outcome


class _SeriesRecorder:
    """Collects the time-series columns of a physical run."""

    def __init__(self, q: QubitInput, space: HilbertSpace):
        self.ideal_ii = ideal_intermediate_state(q, space).amplitudes
        self.ideal_v = teleport_ready_state(q, space).amplitudes
        self.flipped = q.node1_flipped()
        self.rows: list[tuple[float, float, float, float, float]] = []

    def at(self, offset: float):
        def rec(t, s):
            a = s.amplitudes
            self.rows.append((offset + t, abs(np.vdot(self.ideal_ii, a)) ** 2, abs(np.vdot(self.ideal_v, a)) ** 2,
                              fidelity(reduced_density_matrix(s, ["atomb"]), self.flipped), s.norm2()))
        return rec

    def columns(self) -> np.ndarray:
        return np.array(self.rows, dtype=float).reshape(-1, 5)


SERIES_COLUMNS = ("t", "overlap_after_step_ii_target", "overlap_final_target", "backup_overlap", "norm2")


@dataclass
class NoJumpRun:
    """Conditional no-jump run of the physical protocol.

    Overlaps use the unnormalized trajectory state, whose squared norm is the
    probability of no jump since the last measurement; measurements
    renormalize.  ``final_fidelity`` is the worst case over the teleportation
    outcomes of the no-detected-error path.  ``series`` has the columns of
    ``SERIES_COLUMNS``; ``backup_overlap`` compares atom b with
    ``c0|e> + c1|g>``, the form it holds before the one-bit recovery.
    """

    series: np.ndarray
    overlap_after_ii: float
    p_continue_ii: float
    p_continue_iv: float
    final_fidelity: float
    branch_fidelities: dict


def _first_half(q, p, pulses, cfg, space, recorder):
    from .cqed import run_transmission_gate

    psi = encode_backup(initial_state(q, space))
    out, _ = run_transmission_gate(psi, "atom1", "atom2", p, pulses, cfg, no_jump=True,
                                   on_sample=recorder.at(0.0))
    overlap_ii = abs(np.vdot(recorder.ideal_ii, out.amplitudes)) ** 2
    state, p2 = project(out.normalized(), _ops(space)["e1"][1])
    if state is None:
        raise ProtocolError("no-jump path has no weight after the first check")
    return symmetrize(state), float(overlap_ii), float(p2)


def physical_no_jump_run(q: QubitInput, p, pulses, cfg, n_max: int = 1) -> NoJumpRun:
    """Both transmissions as conditional no-jump evolutions of the cavity model."""
    from .cqed import run_transmission_gate, system_space

    space = system_space(n_max)
    recorder = _SeriesRecorder(q, space)
    psi, overlap_ii, p2 = _first_half(q, p, pulses, cfg, space, recorder)
    out, _ = run_transmission_gate(psi, "atom1", "atoma", p, pulses, cfg, no_jump=True,
                                   on_sample=recorder.at(pulses.duration))
    ops = _ops(space)
    state, p4a = project(out.normalized(), ops["e1"][1])
    state, p4b = project(state, ops["RR"][1])
    if state is None:
        raise ProtocolError("no-jump path has no weight after the second check")
    fids = {}
    for leaf in enumerate_branches(lambda src, tr: _teleport_leaf(state, q, src, tr)):
        fids["".join(leaf.result.reason)] = float(leaf.result.backup_fidelity)
    return NoJumpRun(recorder.columns(), overlap_ii, p2, float(p4a * p4b), min(fids.values()), fids)


def _teleport_leaf(state, q, src, tr):
    fid, key, out = step_v_teleport(state, q, src, tr, form_tol=None)
    return StepResult("Success", out, key, fid)


@dataclass
class JumpRun:
    """A physical run whose second transmission contains at least one jump."""

    series: np.ndarray
    seed: int
    jump_times: list[float]
    status: str
    reason: str | None
    recovered_fidelity: float
    backup_overlap_after_jump: float


def physical_jump_run(q: QubitInput, p, pulses, cfg, seed: int, max_attempts: int = 200,
                      n_max: int = 1) -> JumpRun:
    """First transmission without a jump, second one sampled until a jump occurs.

    Trajectory seeds ``seed, seed + 1, ...`` are tried in order.  The
    measurements after the gate use a generator seeded with the accepted seed.
    """
    from .cqed import run_transmission_gate, system_space
    from .mcwf import make_rng

    space = system_space(n_max)
    for attempt in range(max_attempts):
        s = seed + attempt
        recorder = _SeriesRecorder(q, space)
        psi, _, _ = _first_half(q, p, pulses, cfg, space, recorder)
        T = pulses.duration
        out, record = run_transmission_gate(psi, "atom1", "atoma", p, pulses, cfg, seed=s,
                                            on_sample=recorder.at(T))
        if not record.jump_events:
            continue
        t_jump = record.jump_events[0].t + T
        series = recorder.columns()
        after = series[series[:, 0] >= t_jump, 3]
        res = step_iv_checks(out, q, RandomOutcomes(make_rng(s)))
        return JumpRun(series, s, [e.t + T for e in record.jump_events], res.status, res.reason,
                       float(res.backup_fidelity if res.retry else 0.0),
                       float(after.min()) if after.size else float("nan"))
    raise ProtocolError(f"no jump in {max_attempts} sampled second transmissions")


def step_iv_checks(out: StateVector, q: QubitInput, outcomes, transcript: Transcript | None = None) -> StepResult:
    """The two error checks of step (iv) on an already transmitted state."""
    return step_iv_transmit_and_check(out, lambda psi, i, j: psi, q, outcomes, transcript)
