"""Abstract noisy transmission channel between a node-1 and a node-2 atom.

No jump::

    |g>_i|R>_j -> alpha |g>_i|R>_j
    |e>_i|R>_j -> beta |r>_i|E>_j + gamma1 |r>_i|R>_j + gamma2 |e>_i|R>_j

Jump: ``alpha = beta = gamma2 = 0`` and ``gamma1 = 1``.  Outputs are left
unnormalized.  The explicit-environment variant replaces the four numbers by
operators ``T, S, G1, G2`` acting on an environment factor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .linalg import (
    DimensionError,
    HilbertSpace,
    LinearOperator,
    StateVector,
    Subsystem,
    apply,
    apply_local,
    embed,
)

SECTOR_TOL = 1e-10
CONTRACTION_TOL = 1e-9
COMMUTE_TOL = 1e-10

NODE1_LEVELS = ("g", "e", "r")
NODE2_LEVELS = ("G", "E", "R")


class SectorError(ValueError):
    """Input state has weight outside the channel's declared sector."""


@dataclass(frozen=True)
class ChannelParams:
    alpha: complex
    beta: complex
    gamma1: complex = 0j
    gamma2: complex = 0j
    jumped: bool = False

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma1", "gamma2"):
            object.__setattr__(self, name, complex(getattr(self, name)))
        if self.jumped and (self.alpha != 0 or self.beta != 0 or self.gamma2 != 0):
            raise ValueError("a jumped channel has alpha = beta = gamma2 = 0")
        if abs(self.alpha) ** 2 > 1 + CONTRACTION_TOL:
            raise ValueError("|alpha| must be <= 1")
        if abs(self.beta) ** 2 + abs(self.gamma1) ** 2 + abs(self.gamma2) ** 2 > 1 + CONTRACTION_TOL:
            raise ValueError("|beta|^2 + |gamma1|^2 + |gamma2|^2 must be <= 1")

    @classmethod
    def ideal(cls) -> "ChannelParams":
        return cls(1.0, 1.0)

    @classmethod
    def jump(cls) -> "ChannelParams":
        return cls(0.0, 0.0, 1.0, 0.0, jumped=True)

    def to_dict(self) -> dict:
        def c(z):
            return [z.real, z.imag]
        return {"alpha": c(self.alpha), "beta": c(self.beta), "gamma1": c(self.gamma1),
                "gamma2": c(self.gamma2), "jumped": self.jumped}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelParams":
        def z(v):
            return complex(v[0], v[1]) if isinstance(v, (list, tuple)) else complex(v)
        return cls(z(d["alpha"]), z(d["beta"]), z(d.get("gamma1", 0)), z(d.get("gamma2", 0)),
                   bool(d.get("jumped", False)))


@dataclass(frozen=True)
class ParamSampler:
    """Distribution of the no-jump constants.

    Magnitudes of alpha and beta are uniform on their ranges with uniform
    phases; gamma1 and gamma2 are complex Gaussians of width ``gamma_scale``.
    ``(beta, gamma1, gamma2)`` is rescaled to a unit vector when it would
    exceed one.  ``fixed`` turns the sampler into a point mass.
    """

    alpha_mag: tuple[float, float] = (0.3, 1.0)
    beta_mag: tuple[float, float] = (0.3, 1.0)
    phase: tuple[float, float] = (0.0, 2 * math.pi)
    gamma_scale: float = 0.1
    fixed: ChannelParams | None = None

    def draw(self, rng: np.random.Generator) -> ChannelParams:
        if self.fixed is not None:
            return self.fixed
        a = rng.uniform(*self.alpha_mag) * np.exp(1j * rng.uniform(*self.phase))
        b = rng.uniform(*self.beta_mag) * np.exp(1j * rng.uniform(*self.phase))
        g1, g2 = self.gamma_scale * (rng.normal(size=2) + 1j * rng.normal(size=2)) / math.sqrt(2)
        return _contract(a, b, g1, g2)

    def to_dict(self) -> dict:
        d = {"alpha_mag": list(self.alpha_mag), "beta_mag": list(self.beta_mag),
             "phase": list(self.phase), "gamma_scale": self.gamma_scale}
        if self.fixed is not None:
            d["fixed"] = self.fixed.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ParamSampler":
        kw = {}
        for key in ("alpha_mag", "beta_mag", "phase"):
            if key in d:
                lo, hi = d[key]
                kw[key] = (float(lo), float(hi))
        if "gamma_scale" in d:
            kw["gamma_scale"] = float(d["gamma_scale"])
        if d.get("fixed") is not None:
            kw["fixed"] = ChannelParams.from_dict(d["fixed"])
        s = cls(**kw)
        if not (0 <= s.alpha_mag[0] <= s.alpha_mag[1] <= 1 and 0 <= s.beta_mag[0] <= s.beta_mag[1] <= 1):
            raise ValueError("magnitude ranges must satisfy 0 <= lo <= hi <= 1")
        if s.gamma_scale < 0:
            raise ValueError("gamma_scale must be >= 0")
        return s


def _contract(a, b, g1, g2) -> ChannelParams:
    tail = abs(b) ** 2 + abs(g1) ** 2 + abs(g2) ** 2
    if tail > 1:
        s = 1 / math.sqrt(tail)
        b, g1, g2 = b * s, g1 * s, g2 * s
    if abs(a) > 1:
        a = a / abs(a)
    return ChannelParams(a, b, g1, g2)


def _share_alpha_beta(base: ChannelParams, g1, g2) -> ChannelParams:
    # alpha, beta must stay exactly equal to the base draw; only gammas shrink
    room = max(0.0, 1.0 - abs(base.beta) ** 2)
    tail = abs(g1) ** 2 + abs(g2) ** 2
    if tail > room:
        s = math.sqrt(room / tail) * (1 - 1e-12)
        g1, g2 = g1 * s, g2 * s
    return ChannelParams(base.alpha, base.beta, g1, g2)


@dataclass(frozen=True)
class NoiseConfig:
    p_nojump: float = 1.0
    sampler: ParamSampler = field(default_factory=ParamSampler)
    correlated: bool = True

    def __post_init__(self):
        if not 0.0 <= self.p_nojump <= 1.0:
            raise ValueError(f"p_nojump must lie in [0, 1], got {self.p_nojump}")

    @classmethod
    def ideal(cls) -> "NoiseConfig":
        return cls(1.0, ParamSampler(fixed=ChannelParams.ideal()), True)

    def to_dict(self) -> dict:
        return {"p_nojump": self.p_nojump, "sampler": self.sampler.to_dict(), "correlated": self.correlated}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseConfig":
        return cls(float(d.get("p_nojump", 1.0)), ParamSampler.from_dict(d.get("sampler", {})),
                   bool(d.get("correlated", True)))


def sample_channel(cfg: NoiseConfig, rng: np.random.Generator,
                   previous: ChannelParams | None = None) -> ChannelParams:
    """Draw the parameters of one transmission.

    With probability ``P`` a no-jump draw, otherwise the jump map.  Passing
    the round's earlier no-jump draw as ``previous`` with ``cfg.correlated``
    reuses its alpha and beta; gamma1 and gamma2 stay fresh.
    """
    if rng.random() >= cfg.p_nojump:
        return ChannelParams.jump()
    fresh = cfg.sampler.draw(rng)
    if cfg.correlated and previous is not None and not previous.jumped:
        return _share_alpha_beta(previous, fresh.gamma1, fresh.gamma2)
    return fresh


def sample_round(cfg: NoiseConfig, rng: np.random.Generator) -> tuple[ChannelParams, ChannelParams, ChannelParams]:
    """Draws for both transmissions of one protocol round.

    Returns ``(first, second, base)`` where ``base`` is a no-jump draw carrying
    the round's alpha and beta.  It is used when a jump draw would hit a state
    with nothing to emit.
    """
    base = cfg.sampler.draw(rng)
    draws = []
    for _ in range(2):
        if rng.random() >= cfg.p_nojump:
            draws.append(ChannelParams.jump())
        elif cfg.correlated:
            fresh = cfg.sampler.draw(rng)
            draws.append(_share_alpha_beta(base, fresh.gamma1, fresh.gamma2))
        else:
            draws.append(cfg.sampler.draw(rng))
    return draws[0], draws[1], base


def _two_atom(space: HilbertSpace, i: str, j: str):
    si, sj = space[i], space[j]
    if si.levels != NODE1_LEVELS or sj.levels != NODE2_LEVELS:
        raise DimensionError(f"{i!r} must carry levels {NODE1_LEVELS} and {j!r} {NODE2_LEVELS}")
    return si, sj


def _check_sector(psi: StateVector, i: str, j: str, extra=()) -> None:
    space = psi.space
    t = psi.amplitudes.reshape(space.dims)
    pi, pj = space.position(i), space.position(j)
    mask = np.zeros(space.dims, dtype=bool)
    idx = [slice(None)] * len(space.dims)
    for li in (0, 1):
        idx[pi] = li
        idx[pj] = 2
        mask[tuple(idx)] = True
    outside = float(np.sum(np.abs(t[~mask]) ** 2))
    if outside > SECTOR_TOL * max(psi.norm2(), 1e-300):
        raise SectorError(f"state has weight {outside:.3g} outside span{{g,e}}_{i} x {{R}}_{j}")


def _local_matrix(params: ChannelParams) -> np.ndarray:
    # basis (i, j) with levels (g, e, r) x (G, E, R)
    def idx(a, b):
        return 3 * NODE1_LEVELS.index(a) + NODE2_LEVELS.index(b)

    m = np.zeros((9, 9), dtype=complex)
    m[idx("g", "R"), idx("g", "R")] = params.alpha
    m[idx("r", "E"), idx("e", "R")] = params.beta
    m[idx("r", "R"), idx("e", "R")] = params.gamma1
    m[idx("e", "R"), idx("e", "R")] = params.gamma2
    return m


def channel_operator(space: HilbertSpace, params: ChannelParams, i: str, j: str) -> LinearOperator:
    si, sj = _two_atom(space, i, j)
    local = HilbertSpace((si, sj))
    return embed(LinearOperator(local, sp.csr_matrix(_local_matrix(params))), space)


def apply_channel(psi: StateVector, params: ChannelParams, i: str = "atom1", j: str = "atom2") -> StateVector:
    """Transmit from atom ``i`` (node 1) to atom ``j`` (node 2)."""
    _two_atom(psi.space, i, j)
    _check_sector(psi, i, j)
    return apply_local(_local_matrix(params), (i, j), psi)


@dataclass(frozen=True, eq=False)
class EnvironmentModel:
    """Environment operators replacing the channel constants.

    ``T`` acts on the environment in the ``|g>|R>`` branch, ``S``, ``G1`` and
    ``G2`` in the three outputs of the ``|e>|R>`` branch.
    """

    xi: np.ndarray
    T: np.ndarray
    S: np.ndarray
    G1: np.ndarray
    G2: np.ndarray
    label: str = "env"

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=complex).reshape(-1)
        d = xi.size
        object.__setattr__(self, "xi", xi / np.linalg.norm(xi))
        for name in ("T", "S", "G1", "G2"):
            m = np.asarray(getattr(self, name), dtype=complex)
            if m.shape != (d, d):
                raise DimensionError(f"{name} must be {d}x{d}, got {m.shape}")
            object.__setattr__(self, name, m)
        if np.linalg.eigvalsh(self.T.conj().T @ self.T).max() > 1 + CONTRACTION_TOL:
            raise ValueError("T is not a contraction")
        tail = self.S.conj().T @ self.S + self.G1.conj().T @ self.G1 + self.G2.conj().T @ self.G2
        if np.linalg.eigvalsh(tail).max() > 1 + CONTRACTION_TOL:
            raise ValueError("S^dag S + G1^dag G1 + G2^dag G2 exceeds the identity")

    @property
    def env_dim(self) -> int:
        return self.xi.size

    def subsystem(self) -> Subsystem:
        return Subsystem(self.label, tuple(f"x{k}" for k in range(self.env_dim)))

    @classmethod
    def scalar(cls, params: ChannelParams) -> "EnvironmentModel":
        one = np.ones((1, 1))
        return cls(np.ones(1), params.alpha * one, params.beta * one, params.gamma1 * one, params.gamma2 * one)

    @classmethod
    def independent_reservoirs(cls, t_local, s_local, xi_t=None, xi_s=None, g1_local=None, g2_local=None):
        """``T`` on the first factor, ``S`` (and the gammas) on the second."""
        t_local = np.asarray(t_local, dtype=complex)
        s_local = np.asarray(s_local, dtype=complex)
        dt, ds = t_local.shape[0], s_local.shape[0]
        xi_t = np.eye(dt)[0] if xi_t is None else np.asarray(xi_t)
        xi_s = np.eye(ds)[0] if xi_s is None else np.asarray(xi_s)
        g1_local = np.zeros((ds, ds)) if g1_local is None else np.asarray(g1_local)
        g2_local = np.zeros((ds, ds)) if g2_local is None else np.asarray(g2_local)
        it, is_ = np.eye(dt), np.eye(ds)
        return cls(np.kron(xi_t, xi_s), np.kron(t_local, is_), np.kron(it, s_local),
                   np.kron(it, g1_local), np.kron(it, g2_local))

    def to_dict(self) -> dict:
        def m(a):
            return {"re": np.real(a).tolist(), "im": np.imag(a).tolist()}
        return {"xi": m(self.xi), "T": m(self.T), "S": m(self.S), "G1": m(self.G1), "G2": m(self.G2)}

    @classmethod
    def from_dict(cls, d: dict) -> "EnvironmentModel":
        def m(v):
            if isinstance(v, dict):
                return np.asarray(v["re"], dtype=float) + 1j * np.asarray(v.get("im", np.zeros_like(v["re"])), dtype=float)
            return np.asarray(v, dtype=complex)
        xi = m(d["xi"])
        zero = np.zeros((xi.size, xi.size))
        return cls(xi, m(d["T"]), m(d["S"]), m(d.get("G1", zero)), m(d.get("G2", zero)))


def env_channel_operator(space: HilbertSpace, env: EnvironmentModel, i: str, j: str) -> LinearOperator:
    si, sj = _two_atom(space, i, j)
    se = space[env.label]
    local = HilbertSpace((si, sj, se))
    two = HilbertSpace((si, sj))

    def ket_bra(a, b):
        m = sp.csr_matrix(([1.0], ([two.basis_index({i: a[0], j: a[1]})], [two.basis_index({i: b[0], j: b[1]})])),
                          shape=(9, 9))
        return m

    blocks = [
        (ket_bra("gR", "gR"), env.T),
        (ket_bra("rE", "eR"), env.S),
        (ket_bra("rR", "eR"), env.G1),
        (ket_bra("eR", "eR"), env.G2),
    ]
    m = sum(sp.kron(a, sp.csr_matrix(b)) for a, b in blocks)
    return embed(LinearOperator(local, m), space)


def apply_env_channel(psi: StateVector, env: EnvironmentModel, i: str = "atom1", j: str = "atom2") -> StateVector:
    """Transmit with an explicit environment factor labelled ``env.label``.

    A one-dimensional environment has no factor in the state; its operators
    are scalars and the plain channel is applied.
    """
    if env.env_dim == 1:
        params = ChannelParams(env.T[0, 0], env.S[0, 0], env.G1[0, 0], env.G2[0, 0])
        return apply_channel(psi, params, i, j)
    if env.label not in psi.space or psi.space[env.label].dim != env.env_dim:
        raise DimensionError(f"state space lacks an environment factor of dimension {env.env_dim}")
    _two_atom(psi.space, i, j)
    _check_sector(psi, i, j)
    return apply(env_channel_operator(psi.space, env, i, j), psi)


def check_commuting(env: EnvironmentModel, tol: float = COMMUTE_TOL) -> tuple[bool, float]:
    """Residual ``||(ST - TS) xi||`` and whether it is below ``tol``."""
    res = float(np.linalg.norm(env.S @ (env.T @ env.xi) - env.T @ (env.S @ env.xi)))
    return res <= tol, res


def params_log_line(round_index: int, which: str, params: ChannelParams) -> str:
    return json.dumps({"round": round_index, "transmission": which, **params.to_dict()})
