"""Cascaded two-cavity model with adiabatically eliminated Lambda atoms.

All rates are in units of the cavity decay rate ``kappa`` and times in
``1/kappa``.  Atoms ``atom1`` and ``atomb`` sit in ``cav1``; ``atom2`` and
``atoma`` sit in ``cav2``.  Only the sender and receiver of the current gate
interact with their cavity; spectator atoms are left untouched.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .channel import NODE1_LEVELS, NODE2_LEVELS, ChannelParams
from .linalg import (
    HilbertSpace,
    LinearOperator,
    StateVector,
    Subsystem,
    annihilation,
    basis_state,
    embed,
    transition,
)
from .mcwf import (
    Generator,
    GeneratorTerm,
    IntegratorConfig,
    JumpChannel,
    TrajectoryRecord,
    evolve_no_jump,
    sample_trajectory,
)

ATOMS = ("atom1", "atomb", "atom2", "atoma")
CAVITY_OF = {"atom1": "cav1", "atomb": "cav1", "atom2": "cav2", "atoma": "cav2"}
LEAKAGE_TOL = 1e-3
RESIDUAL_TOL = 1e-2


class GateError(RuntimeError):
    """The gate left too much population outside the expected subspace."""


class PulseDesignError(RuntimeError):
    """Pulse optimization did not reach the requested transfer."""


def atom_subsystem(label: str) -> Subsystem:
    return Subsystem(label, NODE1_LEVELS if CAVITY_OF[label] == "cav1" else NODE2_LEVELS)


def system_space(n_max: int | None = 1, atoms=ATOMS) -> HilbertSpace:
    """Atoms in the fixed order, followed by both cavities when ``n_max`` is set."""
    subs = [atom_subsystem(a) for a in atoms]
    if n_max is not None:
        if n_max < 1:
            raise ValueError("photon cutoff must be >= 1")
        subs += [Subsystem("cav1", tuple(str(k) for k in range(n_max + 1))),
                 Subsystem("cav2", tuple(str(k) for k in range(n_max + 1)))]
    return HilbertSpace(tuple(subs))


def gate_space(n_max: int = 1, sender: str = "atom1", receiver: str = "atom2") -> HilbertSpace:
    return system_space(n_max, (sender, receiver))


@dataclass(frozen=True)
class PhysicalParams:
    g: float = 5.0
    kappa: float = 1.0
    kappa_loss_1: float = 0.0
    kappa_loss_2: float = 0.0
    Gamma: float = 0.0
    Delta: float = 10.0
    delta: float = 0.0

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        for name in ("g", "kappa_loss_1", "kappa_loss_2", "Gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.Delta == 0 and self.Gamma == 0:
            raise ValueError("Delta and Gamma cannot both vanish")
        if self.Gamma > 0 and abs(self.Delta) < 5 * self.Gamma:
            warnings.warn("|Delta| < 5 Gamma: adiabatic elimination is questionable", stacklevel=2)

    @property
    def complex_detuning(self) -> complex:
        return self.Delta + 0.5j * self.Gamma

    def ideal(self) -> "PhysicalParams":
        return replace(self, kappa_loss_1=0.0, kappa_loss_2=0.0, Gamma=0.0, delta=0.0)

    def with_loss(self, kappa_loss: float) -> "PhysicalParams":
        return replace(self, kappa_loss_1=kappa_loss, kappa_loss_2=kappa_loss)


@dataclass(frozen=True)
class DerivedCouplings:
    stark_shift: complex
    eff_rabi: complex
    cavity_stark: complex


def derived_couplings(p: PhysicalParams, omega: complex) -> DerivedCouplings:
    d = p.complex_detuning
    return DerivedCouplings(
        stark_shift=abs(omega) ** 2 / (4 * d),
        eff_rabi=p.g * omega / (2 * d),
        cavity_stark=p.g ** 2 / d,
    )


@dataclass(frozen=True, eq=False)
class PulseSchedule:
    """Real laser envelopes on a shared grid, linearly interpolated.

    ``phase_2`` is a constant laser phase of the receiving node; it rotates
    the phase of the transferred amplitude and nothing else.
    """

    t_grid: np.ndarray
    omega_1: np.ndarray
    omega_2: np.ndarray
    phase_2: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.t_grid, dtype=float)
        o1 = np.asarray(self.omega_1, dtype=float)
        o2 = np.asarray(self.omega_2, dtype=float)
        if not (t.shape == o1.shape == o2.shape) or t.ndim != 1 or t.size < 2:
            raise ValueError("pulse arrays must be 1-D and of equal length >= 2")
        if np.any(np.diff(t) <= 0):
            raise ValueError("t_grid must be strictly increasing")
        if not (np.all(np.isfinite(o1)) and np.all(np.isfinite(o2))):
            raise ValueError("envelopes must be finite")
        for name, v in (("t_grid", t), ("omega_1", o1), ("omega_2", o2)):
            v.flags.writeable = False
            object.__setattr__(self, name, v)

    @property
    def duration(self) -> float:
        return float(self.t_grid[-1] - self.t_grid[0])

    def _interp(self, t, values):
        t = np.asarray(t, dtype=float)
        eps = 1e-9 * max(1.0, self.duration)
        if np.any(t < self.t_grid[0] - eps) or np.any(t > self.t_grid[-1] + eps):
            raise ValueError(f"time outside the pulse grid [{self.t_grid[0]}, {self.t_grid[-1]}]")
        return np.interp(t, self.t_grid, values)

    def omega1_at(self, t) -> np.ndarray:
        return self._interp(t, self.omega_1).astype(complex)

    def omega2_at(self, t) -> np.ndarray:
        return self._interp(t, self.omega_2) * np.exp(1j * self.phase_2)

    def scaled(self, factor: float) -> "PulseSchedule":
        return PulseSchedule(self.t_grid, self.omega_1 * factor, self.omega_2 * factor, self.phase_2)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "omega1", "omega2", "phase2"])
            for t, a, b in zip(self.t_grid, self.omega_1, self.omega_2):
                w.writerow([repr(float(t)), repr(float(a)), repr(float(b)), repr(float(self.phase_2))])

    @classmethod
    def from_csv(cls, path) -> "PulseSchedule":
        ts, o1, o2, ph = [], [], [], []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                ts.append(float(row["t"]))
                o1.append(float(row["omega1"]))
                o2.append(float(row["omega2"]))
                ph.append(float(row.get("phase2") or 0.0))
        if len(set(ph)) > 1:
            raise ValueError("phase2 column must be constant")
        return cls(np.array(ts), np.array(o1), np.array(o2), ph[0] if ph else 0.0)


@dataclass(frozen=True)
class GateLayout:
    sender: str = "atom1"
    receiver: str = "atom2"

    def __post_init__(self):
        if CAVITY_OF.get(self.sender) != "cav1":
            raise ValueError(f"sender must be a node-1 atom, got {self.sender!r}")
        if CAVITY_OF.get(self.receiver) != "cav2":
            raise ValueError(f"receiver must be a node-2 atom, got {self.receiver!r}")


def _cavity_ops(space: HilbertSpace):
    a1 = embed(annihilation(space["cav1"]), space)
    a2 = embed(annihilation(space["cav2"]), space)
    return a1, a2


def _local(space, label, to, frm) -> LinearOperator:
    return embed(transition(space[label], to, frm), space)


def build_generator(p: PhysicalParams, pulses: PulseSchedule, layout: GateLayout, space: HilbertSpace) -> Generator:
    """Effective Hamiltonian of one gate as a sum of constant operators times scalar envelopes."""
    a1, a2 = _cavity_ops(space)
    n1 = a1.dag() @ a1
    n2 = a2.dag() @ a2
    d = p.complex_detuning
    cav_stark = p.g ** 2 / d

    s, r = layout.sender, layout.receiver
    static = (
        -p.delta * (n1 + n2)
        + (-1j * p.kappa) * (n1 + n2 + 2.0 * (a2.dag() @ a1))
        + (-1j) * (p.kappa_loss_1 * n1 + p.kappa_loss_2 * n2)
        + cav_stark * (n1 @ _local(space, s, "r", "r"))
        + cav_stark * (n2 @ _local(space, r, "R", "R"))
    )
    terms = [GeneratorTerm(static)]

    def add_atom(label, e, rr, a, omega_fn):
        ee = _local(space, label, e, e)
        er_a = _local(space, label, e, rr) @ a
        terms.append(GeneratorTerm(ee, lambda t: np.abs(omega_fn(t)) ** 2 / (4 * d)))
        terms.append(GeneratorTerm(-1j * er_a, lambda t: p.g * omega_fn(t) / (2 * d)))
        terms.append(GeneratorTerm(1j * er_a.dag(), lambda t: np.conj(p.g * omega_fn(t) / (2 * d))))

    add_atom(s, "e", "r", a1, pulses.omega1_at)
    add_atom(r, "E", "R", a2, pulses.omega2_at)
    return Generator(space, terms, passive=True)


def build_heff(p: PhysicalParams, pulses: PulseSchedule, layout: GateLayout, t: float,
               space: HilbertSpace | None = None) -> LinearOperator:
    space = space or system_space(1)
    return build_generator(p, pulses, layout, space)(t)


def build_jump_channels(p: PhysicalParams, layout: GateLayout, space: HilbertSpace,
                        pulses: PulseSchedule | None = None) -> list[JumpChannel]:
    """Collapse operators matching the anti-Hermitian part of the gate Hamiltonian.

    Spontaneous emission returns the atom to ``r``/``R``; its Raman part has
    a rate that follows the laser envelope, so ``pulses`` is required when
    ``Gamma > 0``.
    """
    a1, a2 = _cavity_ops(space)
    chans = [JumpChannel("out", math.sqrt(2 * p.kappa) * (a1 + a2), "cavity_output")]
    if p.kappa_loss_1 > 0:
        chans.append(JumpChannel("loss1", math.sqrt(2 * p.kappa_loss_1) * a1, "cavity_loss_1"))
    if p.kappa_loss_2 > 0:
        chans.append(JumpChannel("loss2", math.sqrt(2 * p.kappa_loss_2) * a2, "cavity_loss_2"))
    if p.Gamma > 0:
        if pulses is None:
            raise ValueError("spontaneous-emission rates need the pulse schedule")
        d2 = abs(p.complex_detuning) ** 2
        cav_rate = p.g ** 2 * p.Gamma / d2
        for label, e, rr, a, omega_fn in (
            (layout.sender, "e", "r", a1, pulses.omega1_at),
            (layout.receiver, "E", "R", a2, pulses.omega2_at),
        ):
            chans.append(JumpChannel(
                f"spont_{label}_laser", _local(space, label, rr, e), f"spont_em_{label}",
                rate=lambda t, f=omega_fn: p.Gamma * np.abs(f(t)) ** 2 / (4 * d2),
            ))
            chans.append(JumpChannel(
                f"spont_{label}_cavity", math.sqrt(cav_rate) * (_local(space, label, rr, rr) @ a),
                f"spont_em_{label}",
            ))
    return chans


def sech_schedule(T: float, omega0: float, nu: float, offset: float, n_grid: int | None = None,
                  phase_2: float = 0.0) -> PulseSchedule:
    """``Omega_1(t) = omega0 sech(nu (t - T/2 - offset))`` and its mirror ``Omega_2(t) = Omega_1(T - t)``."""
    n_grid = n_grid or int(round(T / 0.005)) + 1
    t = np.linspace(0.0, T, n_grid)
    o1 = omega0 / np.cosh(nu * (t - 0.5 * T - offset))
    return PulseSchedule(t, o1, o1[::-1].copy(), phase_2)


def _transfer_amplitude(p: PhysicalParams, pulses: PulseSchedule, dt: float, n_max: int = 1) -> tuple[complex, StateVector]:
    space = gate_space(n_max)
    gen = build_generator(p, pulses, GateLayout(), space)
    psi0 = basis_state(space, {"atom1": "e", "atom2": "R", "cav1": "0", "cav2": "0"})
    cfg = IntegratorConfig(dt=dt, t_final=pulses.duration, sample_stride=10 ** 9)
    out = evolve_no_jump(psi0, gen, 0.0, pulses.duration, cfg)
    amp = out.amplitude({"atom1": "r", "atom2": "E", "cav1": "0", "cav2": "0"})
    return amp, out


def gate_transfer(p: PhysicalParams, pulses: PulseSchedule, dt: float = 1e-3, n_max: int = 1) -> float:
    """Population moved from ``|e>_1|R>_2`` to ``|r>_1|E>_2`` with both cavities empty."""
    amp, _ = _transfer_amplitude(p, pulses, dt, n_max)
    return abs(amp) ** 2


def design_pulses(p: PhysicalParams, T: float = 30.0, target: float = 0.98, dt: float = 1e-3,
                  dt_search: float = 1e-2, maxiter: int = 400) -> PulseSchedule:
    """Tune a mirrored sech pulse pair for maximal transfer in the lossless case.

    The optimized quantities are the peak Rabi frequency, the inverse width
    and the shift of the sender pulse from the gate centre.  The receiving
    laser phase is then set so the transferred amplitude is real and positive.
    """
    if T < 10.0 / p.kappa:
        raise ValueError("gate duration must be at least 10/kappa")
    if p.g == 0:
        raise PulseDesignError("g = 0: the atoms do not couple to the cavities")
    ideal = p.ideal()

    def loss(x, step):
        omega0, nu, offset = x
        if omega0 <= 0 or nu <= 0 or abs(offset) > 0.4 * T:
            return 1.0
        sched = sech_schedule(T, omega0, nu, offset)
        amp, _ = _transfer_amplitude(ideal, sched, step)
        return 1.0 - abs(amp) ** 2

    # Rabi frequency at which the two-photon coupling g*Omega/(2 Delta) equals kappa
    unit = 2 * abs(ideal.Delta) * ideal.kappa / ideal.g
    seeds = [(w * unit, nu * ideal.kappa, off / ideal.kappa)
             for w in (1.5, 3.0, 6.0, 10.0) for nu in (0.3, 0.7) for off in (0.0, 2.0, 4.0)]
    scored = sorted((loss(s, dt_search), s) for s in seeds)
    best_x, best_val = None, 2.0
    for _, start in scored[:3]:
        res = minimize(loss, np.array(start), args=(dt_search,), method="Nelder-Mead",
                       options={"maxiter": maxiter, "xatol": 1e-4, "fatol": 1e-7})
        if res.fun < best_val:
            best_val, best_x = res.fun, res.x
    sched = sech_schedule(T, *best_x)
    amp, _ = _transfer_amplitude(ideal, sched, dt)
    if abs(amp) ** 2 < target:
        raise PulseDesignError(f"best transfer {abs(amp) ** 2:.4f} is below the target {target}")
    return sech_schedule(T, *best_x, phase_2=-float(np.angle(amp)))


def cavity_population(psi: StateVector) -> float:
    """Relative weight of states with at least one photon."""
    space = psi.space
    t = np.abs(psi.amplitudes.reshape(space.dims)) ** 2
    idx = [slice(None)] * len(space.dims)
    idx[space.position("cav1")] = 0
    idx[space.position("cav2")] = 0
    vac = t[tuple(idx)].sum()
    total = t.sum()
    return float((total - vac) / total) if total > 0 else 0.0


def run_transmission_gate(
    psi: StateVector,
    sender: str,
    receiver: str,
    p: PhysicalParams,
    pulses: PulseSchedule,
    cfg: IntegratorConfig,
    seed: int | None = None,
    no_jump: bool = False,
    on_sample: Callable[[float, StateVector], None] | None = None,
) -> tuple[StateVector, TrajectoryRecord]:
    """Run one photon-mediated transmission over ``[0, T]``.

    With ``no_jump=True`` the conditional no-jump evolution is returned,
    unnormalized so its squared norm is the no-jump probability.  Otherwise a
    trajectory is sampled with ``seed`` and the normalized final state returned.
    """
    layout = GateLayout(sender, receiver)
    space = psi.space
    if cavity_population(psi) > 1e-8:
        raise GateError("cavities must start in the vacuum")
    gen = build_generator(p, pulses, layout, space)
    T = pulses.duration
    run_cfg = replace(cfg, t_final=T)
    if no_jump:
        record = TrajectoryRecord(seed=-1 if seed is None else int(seed))

        def rec(t, s):
            record.norm_history.append((t, s.norm2()))
            if on_sample:
                on_sample(t, s)

        out = evolve_no_jump(psi, gen, 0.0, T, run_cfg, rec)
    else:
        if seed is None:
            raise ValueError("a seed is required to sample a trajectory")
        jumps = build_jump_channels(p, layout, space, pulses)
        out, record = sample_trajectory(psi.normalized(), gen, jumps, run_cfg, seed, on_sample=on_sample)
    leak = cavity_population(out)
    if leak > LEAKAGE_TOL:
        raise GateError(f"cavity population {leak:.3g} left after the gate; lengthen the gate")
    return out, record


def extract_channel_params(final: StateVector, input_amplitudes=(1 / math.sqrt(2), 1 / math.sqrt(2)),
                           sender: str = "atom1", receiver: str = "atom2") -> tuple[ChannelParams, float]:
    """Read the channel constants off a no-jump gate output.

    ``final`` must be the unnormalized output for the input
    ``(c_g |g> + c_e |e>)_sender |R>_receiver`` on :func:`gate_space`.
    Returns the parameters and the weight left outside the four channel
    components, relative to the input norm.
    """
    space = final.space
    if set(space.labels) != {sender, receiver, "cav1", "cav2"}:
        raise ValueError("expected a two-atom gate space")
    cg, ce = input_amplitudes

    def amp(a, b):
        return final.amplitude({sender: a, receiver: b, "cav1": "0", "cav2": "0"})

    alpha = amp("g", "R") / cg
    beta = amp("r", "E") / ce
    gamma1 = amp("r", "R") / ce
    gamma2 = amp("e", "R") / ce
    captured = abs(cg * alpha) ** 2 + abs(ce) ** 2 * (abs(beta) ** 2 + abs(gamma1) ** 2 + abs(gamma2) ** 2)
    residual = max(final.norm2() - captured, 0.0) / (abs(cg) ** 2 + abs(ce) ** 2)
    if residual > RESIDUAL_TOL:
        raise GateError(f"weight {residual:.3g} outside the channel components")
    return ChannelParams(alpha, beta, gamma1, gamma2), residual


def gate_channel_params(p: PhysicalParams, pulses: PulseSchedule, dt: float = 1e-3,
                        n_max: int = 1) -> tuple[ChannelParams, float]:
    """Channel constants of the no-jump physical gate."""
    space = gate_space(n_max)
    c = 1 / math.sqrt(2)
    psi = StateVector(space, c * (basis_state(space, {"atom1": "g", "atom2": "R", "cav1": "0", "cav2": "0"}).amplitudes
                                  + basis_state(space, {"atom1": "e", "atom2": "R", "cav1": "0", "cav2": "0"}).amplitudes))
    out, _ = run_transmission_gate(psi, "atom1", "atom2", p, pulses,
                                   IntegratorConfig(dt=dt, sample_stride=10 ** 9), no_jump=True)
    return extract_channel_params(out, (c, c))
