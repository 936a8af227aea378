"""Quantum-trajectory integration under a time-dependent non-Hermitian generator.

Between jumps the state obeys ``d psi/dt = -i H(t) psi`` and is left
unnormalized, so its squared norm is the probability that no jump has
happened since the last renormalization.  A jump fires when that norm falls
to a uniform random level ``r``; the crossing time is located by bisection
inside the RK4 step where it happens.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from . import _core
from .linalg import DimensionError, HilbertSpace, LinearOperator, StateVector, apply

RNG_ALGORITHM = "numpy.PCG64"

CoefficientFn = Callable[[np.ndarray], np.ndarray]


class IntegrationError(RuntimeError):
    """Integration became unstable or a jump could not be assigned."""


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFF_FFFF_FFFF_FFFF))


@dataclass(frozen=True)
class GeneratorTerm:
    operator: LinearOperator
    coefficient: CoefficientFn | None = None

    def values(self, times: np.ndarray) -> np.ndarray:
        if self.coefficient is None:
            return np.ones(len(times), dtype=complex)
        return np.asarray(self.coefficient(np.asarray(times, dtype=float)), dtype=complex)


class Generator:
    """``H(t) = sum_k c_k(t) H_k`` with constant sparse ``H_k``.

    Calling the generator returns the assembled operator at one time.  The
    term structure is what lets the compiled kernel step without rebuilding
    matrices.
    """

    def __init__(self, space: HilbertSpace, terms: Sequence[GeneratorTerm], passive: bool = True):
        self.space = space
        self.terms = tuple(terms)
        self.passive = passive
        for term in self.terms:
            if term.operator.space != space:
                raise DimensionError("generator term lives on a different space")
        if not self.terms:
            self.terms = (GeneratorTerm(LinearOperator.zero(space)),)
        self._stacked = sp.vstack([t.operator.entries for t in self.terms], format="csr")

    @classmethod
    def constant(cls, op: LinearOperator, passive: bool = True) -> "Generator":
        return cls(op.space, [GeneratorTerm(op)], passive)

    @property
    def stacked(self) -> sp.csr_matrix:
        return self._stacked

    def coefficients(self, times) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=float))
        return np.stack([t.values(times) for t in self.terms], axis=1)

    def __call__(self, t: float) -> LinearOperator:
        c = self.coefficients([t])[0]
        m = sum((ck * term.operator.entries for ck, term in zip(c, self.terms)),
                sp.csr_matrix((self.space.total_dim,) * 2, dtype=complex))
        return LinearOperator(self.space, m)


@dataclass(frozen=True)
class JumpChannel:
    """Collapse operator ``sqrt(rate(t)) * operator``; constant when ``rate`` is None."""

    id: str
    operator: LinearOperator
    kind: str
    rate: CoefficientFn | None = None

    def __post_init__(self):
        if self.operator.entries.nnz == 0:
            raise ValueError(f"jump channel {self.id!r} has a zero operator")

    def scale(self, t: float) -> float:
        if self.rate is None:
            return 1.0
        return math.sqrt(max(float(np.real(self.rate(np.array([t]))[0])), 0.0))

    def at(self, t: float) -> LinearOperator:
        return self.operator * self.scale(t)

    def weight(self, psi: np.ndarray, t: float) -> float:
        v = self.operator.entries @ psi
        return self.scale(t) ** 2 * float(np.vdot(v, v).real)


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1e-3
    t_final: float = 1.0
    norm_bisection_tol: float = 1e-6
    sample_stride: int = 100

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.norm_bisection_tol > 0:
            raise ValueError("norm_bisection_tol must be positive")
        if self.sample_stride < 1:
            raise ValueError("sample_stride must be >= 1")


@dataclass(frozen=True)
class JumpEvent:
    t: float
    channel: str
    norm2: float


@dataclass
class TrajectoryRecord:
    seed: int
    jump_events: list[JumpEvent] = field(default_factory=list)
    norm_history: list[tuple[float, float]] = field(default_factory=list)
    rng: str = RNG_ALGORITHM

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "rng": self.rng,
            "events": [{"t": e.t, "channel": e.channel, "norm2": e.norm2} for e in self.jump_events],
            "norm_history": [[t, n] for t, n in self.norm_history],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryRecord":
        return cls(
            seed=int(d["seed"]),
            jump_events=[JumpEvent(float(e["t"]), str(e["channel"]), float(e["norm2"])) for e in d["events"]],
            norm_history=[(float(t), float(n)) for t, n in d["norm_history"]],
            rng=d.get("rng", RNG_ALGORITHM),
        )

    @classmethod
    def from_json(cls, text: str) -> "TrajectoryRecord":
        return cls.from_dict(json.loads(text))


def _grid(t0: float, t1: float, dt: float) -> tuple[int, float]:
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    n = int(math.ceil((t1 - t0) / dt - 1e-9))
    if n == 0:
        return 0, dt
    return n, (t1 - t0) / n


class _Plan:
    """Fixed-grid propagation of one generator over ``[t0, t0 + n*h]``."""

    def __init__(self, gen, t0: float, h: float, n: int, kernel=None):
        self.gen = gen
        self.t0 = t0
        self.h = h
        self.n = n
        self.structured = isinstance(gen, Generator)
        self.passive = getattr(gen, "passive", True)
        if self.structured:
            self.kernel = kernel or _core.kernel
            halves = t0 + 0.5 * h * np.arange(2 * n + 1)
            self.coeffs = gen.coefficients(halves)
            nterms = len(gen.terms)
            dim = gen.space.total_dim
            self.prepared = self.kernel.prepare(gen.stacked, nterms, dim)
            self._py = _core.python_kernel.prepare(gen.stacked, nterms, dim)

    def time(self, j: int) -> float:
        return self.t0 + j * self.h

    def advance(self, psi: np.ndarray, j0: int, n: int, threshold: float):
        if self.structured:
            c = self.coeffs[2 * j0: 2 * (j0 + n) + 1]
            return self.kernel.propagate(self.prepared, c, psi, self.h, n, threshold)
        x = psi
        prev = psi
        norms = []
        for j in range(j0, j0 + n):
            prev = x
            x = self.step(x, self.time(j), self.h)
            norms.append(float(np.vdot(x, x).real))
            if norms[-1] <= threshold:
                break
        return x, prev, len(norms), np.array(norms)

    def step(self, psi: np.ndarray, t: float, h: float) -> np.ndarray:
        """One RK4 step of arbitrary size ``h`` from time ``t``."""
        if self.structured:
            c = self.gen.coefficients([t, t + 0.5 * h, t + h])
            coeffs = np.stack([c[0], c[1], c[2]])
            out, _, _, _ = _core.python_kernel.propagate(self._py, coeffs, psi, h, 1, -1.0)
            return out

        def f(tt, x):
            return -1j * (self.gen(tt).entries @ x)

        k1 = f(t, psi)
        k2 = f(t + h / 2, psi + h / 2 * k1)
        k3 = f(t + h / 2, psi + h / 2 * k2)
        k4 = f(t + h, psi + h * k3)
        return psi + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _check_monotone(start: float, norms: np.ndarray, passive: bool) -> None:
    if not passive or len(norms) == 0:
        return
    seq = np.concatenate([[start], norms])
    rel = np.diff(seq) / np.maximum(seq[:-1], 1e-300)
    if np.any(rel > 1e-6):
        raise IntegrationError("norm increased during a step of a passive generator; reduce dt")


def evolve_no_jump(
    psi: StateVector,
    gen,
    t0: float,
    t1: float,
    cfg: IntegratorConfig,
    on_sample: Callable[[float, StateVector], None] | None = None,
) -> StateVector:
    """Integrate ``d psi/dt = -i H(t) psi`` from ``t0`` to ``t1`` without jumps.

    The result is not renormalized.  ``gen`` is a :class:`Generator` or any
    callable returning a :class:`LinearOperator` for a time ``t``.
    """
    n, h = _grid(t0, t1, cfg.dt)
    if n == 0:
        if on_sample:
            on_sample(t0, psi)
        return psi
    plan = _Plan(gen, t0, h, n)
    x = psi.amplitudes
    j = 0
    if on_sample:
        on_sample(t0, psi)
    while j < n:
        m = min(cfg.sample_stride - j % cfg.sample_stride, n - j)
        start = float(np.vdot(x, x).real)
        x, _, done, norms = plan.advance(x, j, m, -1.0)
        _check_monotone(start, norms, plan.passive)
        j += done
        if on_sample and (j % cfg.sample_stride == 0 or j == n):
            on_sample(plan.time(j), StateVector(psi.space, x))
    return StateVector(psi.space, x)


class TrajectorySampler:
    """Reusable waiting-time sampler for one generator, jump set and time grid."""

    def __init__(self, gen, jumps: Sequence[JumpChannel], cfg: IntegratorConfig, t0: float = 0.0,
                 kernel=None):
        self.gen = gen
        self.jumps = tuple(jumps)
        self.cfg = cfg
        self.t0 = t0
        n, h = _grid(t0, cfg.t_final, cfg.dt)
        self.plan = _Plan(gen, t0, h, n, kernel)

    def _locate(self, psi_a: np.ndarray, t_a: float, h_max: float, r: float):
        """Bisect the step size at which the squared norm reaches ``r``."""
        plan = self.plan
        tol = self.cfg.norm_bisection_tol * r
        lo, hi = 0.0, h_max
        best = plan.step(psi_a, t_a, hi)
        h = hi
        for _ in range(200):
            val = float(np.vdot(best, best).real) - r
            if abs(val) <= tol:
                break
            if val > 0:
                lo = h
            else:
                hi = h
            h = 0.5 * (lo + hi)
            if hi - lo < 1e-15 * max(1.0, abs(t_a)):
                best = plan.step(psi_a, t_a, h)
                break
            best = plan.step(psi_a, t_a, h)
        return t_a + h, best

    def _jump(self, psi: np.ndarray, tau: float, rng: np.random.Generator):
        weights = np.array([ch.weight(psi, tau) for ch in self.jumps])
        total = weights.sum()
        if not total > 0:
            raise IntegrationError(f"all jump rates vanish at t={tau:.6g}; generator and jumps disagree")
        u = rng.random()
        k = int(np.searchsorted(np.cumsum(weights) / total, u, side="right"))
        k = min(k, len(weights) - 1)
        while weights[k] == 0:
            k -= 1
        out = self.jumps[k].scale(tau) * (self.jumps[k].operator.entries @ psi)
        return k, out / math.sqrt(float(np.vdot(out, out).real))

    def _finish(self, psi, t_from, t_to, r, rng, record):
        """Propagate through a partial step, handling any further jumps in it."""
        while True:
            h = t_to - t_from
            if h <= 0:
                return psi, r
            out = self.plan.step(psi, t_from, h)
            if float(np.vdot(out, out).real) > r or not self.jumps:
                return out, r
            tau, psi_tau = self._locate(psi, t_from, h, r)
            k, psi = self._jump(psi_tau, tau, rng)
            record.jump_events.append(JumpEvent(tau, self.jumps[k].id, float(np.vdot(psi_tau, psi_tau).real)))
            r = rng.random()
            t_from = tau

    def run(self, psi0: StateVector, seed: int,
            on_sample: Callable[[float, StateVector], None] | None = None,
            ) -> tuple[StateVector, TrajectoryRecord]:
        if abs(psi0.norm2() - 1.0) > 1e-10:
            raise ValueError("initial trajectory state must be normalized")
        plan, cfg = self.plan, self.cfg
        rng = make_rng(seed)
        record = TrajectoryRecord(seed=int(seed))
        x = psi0.amplitudes.copy()
        r = rng.random() if self.jumps else -1.0
        space = psi0.space

        def sample(j):
            n2 = float(np.vdot(x, x).real)
            record.norm_history.append((plan.time(j), n2))
            if on_sample:
                on_sample(plan.time(j), StateVector(space, x))

        sample(0)
        j = 0
        while j < plan.n:
            m = min(cfg.sample_stride - j % cfg.sample_stride, plan.n - j)
            start = float(np.vdot(x, x).real)
            out, prev, done, norms = plan.advance(x, j, m, r)
            _check_monotone(start, norms, plan.passive)
            if self.jumps and done and norms[-1] <= r:
                js = j + done - 1
                t_a = plan.time(js)
                tau, psi_tau = self._locate(prev, t_a, plan.h, r)
                k, x = self._jump(psi_tau, tau, rng)
                record.jump_events.append(JumpEvent(tau, self.jumps[k].id, float(np.vdot(psi_tau, psi_tau).real)))
                r = rng.random()
                x, r = self._finish(x, tau, plan.time(js + 1), r, rng, record)
                j = js + 1
            else:
                x = out
                j += done
            if j % cfg.sample_stride == 0 or j == plan.n:
                sample(j)
        final = StateVector(space, x)
        return final.normalized(), record


def sample_trajectory(
    psi0: StateVector,
    gen,
    jumps: Sequence[JumpChannel],
    cfg: IntegratorConfig,
    seed: int,
    t0: float = 0.0,
    on_sample: Callable[[float, StateVector], None] | None = None,
) -> tuple[StateVector, TrajectoryRecord]:
    """Sample one trajectory on ``[t0, cfg.t_final]``; the final state is normalized.

    ``on_sample`` receives the unnormalized state every ``cfg.sample_stride``
    steps and at the end.
    """
    return TrajectorySampler(gen, jumps, cfg, t0).run(psi0, seed, on_sample)


class EnsembleResult(NamedTuple):
    times: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray


def ensemble_expectation(
    observable: LinearOperator,
    psi0: StateVector,
    gen,
    jumps: Sequence[JumpChannel],
    cfg: IntegratorConfig,
    n_traj: int,
    base_seed: int,
    t0: float = 0.0,
    workers: int = 1,
) -> EnsembleResult:
    """Average ``<psi|O|psi>/<psi|psi>`` over ``n_traj`` trajectories.

    Trajectory ``i`` uses seed ``base_seed + i``.  Results are reduced in index
    order, so ``workers`` does not change the output.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    sampler = TrajectorySampler(gen, jumps, cfg, t0)
    op = observable.entries

    def one(i):
        vals = []
        times = []

        def rec(t, psi):
            a = psi.amplitudes
            times.append(t)
            vals.append(np.vdot(a, op @ a) / np.vdot(a, a).real)

        sampler.run(psi0, base_seed + i, rec)
        return np.array(times), np.array(vals)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(n_traj)))
    else:
        results = [one(i) for i in range(n_traj)]
    times = results[0][0]
    data = np.stack([v for _, v in results])
    if observable.hermitian_hint:
        data = data.real
    mean = data.mean(axis=0)
    if n_traj > 1:
        stderr = data.std(axis=0, ddof=1) / math.sqrt(n_traj)
    else:
        stderr = np.zeros_like(mean, dtype=float)
    return EnsembleResult(times, mean, np.abs(stderr))


def ensemble_density_matrix(
    psi0: StateVector,
    gen,
    jumps: Sequence[JumpChannel],
    cfg: IntegratorConfig,
    n_traj: int,
    base_seed: int,
    t0: float = 0.0,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Trajectory average of ``|psi><psi|`` at the sample times.

    Returns ``(times, rho)`` with ``rho`` of shape ``(n_times, dim, dim)``.
    Only practical for small spaces.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    sampler = TrajectorySampler(gen, jumps, cfg, t0)

    def one(i):
        times, vecs = [], []

        def rec(t, psi):
            a = psi.amplitudes
            times.append(t)
            vecs.append(a / math.sqrt(np.vdot(a, a).real))

        sampler.run(psi0, base_seed + i, rec)
        v = np.array(vecs)
        return np.array(times), np.einsum("ti,tj->tij", v, v.conj())

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(n_traj)))
    else:
        results = [one(i) for i in range(n_traj)]
    rho = results[0][1].copy()
    for _, r in results[1:]:
        rho += r
    return results[0][0], rho / n_traj


def apply_jump(channel: JumpChannel, psi: StateVector, t: float = 0.0) -> StateVector:
    """Apply a jump operator and renormalize."""
    return apply(channel.at(t), psi).normalized()
