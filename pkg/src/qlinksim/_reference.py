"""Small driven atom-cavity model with a direct master-equation solution.

Used to cross-check the trajectory sampler: the ensemble average of sampled
trajectories must converge to the density matrix integrated here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .linalg import HilbertSpace, StateVector, annihilation, basis_state, embed, transition
from .mcwf import Generator, IntegratorConfig, JumpChannel, ensemble_density_matrix


@dataclass(frozen=True)
class ToyModel:
    """Two-level atom driven at ``omega`` inside a cavity decaying at ``kappa``."""

    omega: float = 0.5
    g: float = 1.0
    kappa: float = 0.5
    gamma: float = 0.1
    n_max: int = 3

    def space(self) -> HilbertSpace:
        return HilbertSpace.of(("atom", ("g", "e")), ("cav", self.n_max + 1))

    def operators(self):
        space = self.space()
        a = embed(annihilation(space["cav"]), space)
        sm = embed(transition(space["atom"], "g", "e"), space)
        h = (sm + sm.dag()) * self.omega + (a.dag() @ sm + sm.dag() @ a) * self.g
        ls = [a * np.sqrt(2 * self.kappa)]
        if self.gamma > 0:
            ls.append(sm * np.sqrt(self.gamma))
        return h, ls

    def generator(self) -> tuple[Generator, list[JumpChannel]]:
        h, ls = self.operators()
        decay = sum((l.dag() @ l for l in ls[1:]), ls[0].dag() @ ls[0])
        heff = h - decay * 0.5j
        jumps = [JumpChannel(f"L{k}", l, "toy") for k, l in enumerate(ls)]
        return Generator.constant(heff), jumps

    def initial_state(self) -> StateVector:
        return basis_state(self.space(), {"atom": "e", "cav": 0})


def lindblad_reference(model: ToyModel, times) -> np.ndarray:
    """Integrate ``d rho/dt = -i[H, rho] + sum L rho L^+ - {L^+L, rho}/2`` at ``times``."""
    h, ls = model.operators()
    H = h.to_dense()
    L = [l.to_dense() for l in ls]
    LdL = sum(l.conj().T @ l for l in L)
    d = H.shape[0]
    psi0 = model.initial_state().amplitudes
    rho0 = np.outer(psi0, psi0.conj())

    def rhs(_t, y):
        rho = y.reshape(d, d)
        out = -1j * (H @ rho - rho @ H) - 0.5 * (LdL @ rho + rho @ LdL)
        for l in L:
            out += l @ rho @ l.conj().T
        return out.ravel()

    times = np.asarray(times, dtype=float)
    sol = solve_ivp(rhs, (0.0, float(times[-1])), rho0.ravel().astype(complex), t_eval=times,
                    rtol=1e-10, atol=1e-12, method="DOP853")
    return sol.y.T.reshape(len(times), d, d)


def trace_distance(a: np.ndarray, b: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.linalg.eigvalsh(a - b)).sum())


def compare(model: ToyModel, n_traj: int = 5000, base_seed: int = 0, checkpoints=(0.5, 1.0, 1.5, 2.0, 2.5),
            dt: float = 1e-3, workers: int = 1) -> list[tuple[float, float]]:
    """Trace distance between the trajectory ensemble and the master equation at each checkpoint."""
    gen, jumps = model.generator()
    stride = int(round(checkpoints[0] / dt))
    cfg = IntegratorConfig(dt=dt, t_final=float(checkpoints[-1]), sample_stride=stride)
    times, rho_mc = ensemble_density_matrix(model.initial_state(), gen, jumps, cfg, n_traj, base_seed,
                                            workers=workers)
    ref = lindblad_reference(model, times)
    out = []
    for t in checkpoints:
        k = int(np.argmin(np.abs(times - t)))
        out.append((float(times[k]), trace_distance(rho_mc[k], ref[k])))
    return out
