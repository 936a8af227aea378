"""Derive the atom-2 correction table used after teleportation.

For each outcome of the b, atom-1 and atom-a measurements the conditional
map from the input amplitudes (c0, c1) to atom 2 is linear.  Each column of
that map is a single signed basis vector, so the correction is a signed
permutation sending the image of c0 to |G> and the image of c1 to |E>.

Run with ``python3 scripts/derive_tables.py``; paste the output into
``CORRECTION_TABLE`` in ``qlinksim/protocol.py``.
"""

import itertools

import numpy as np

LEVELS1 = "ger"
LEVELS2 = "GER"
S = 1 / np.sqrt(2)


def ready_state(c0, c1):
    # axes: atom1, atomb, atom2, atoma
    psi = np.zeros((3, 3, 3, 3), dtype=complex)
    g, e, r = 0, 1, 2
    E, R = 1, 2
    psi[g, g, E, R] += c0 * S
    psi[g, e, E, R] += c1 * S
    psi[r, e, R, E] += c0 * S
    psi[r, g, R, E] += c1 * S
    return psi


def bra(vec):
    return np.conj(np.asarray(vec, dtype=complex))


def conditional_atom2(psi, b, s1, sa):
    v1 = {"+": [S, 0, S], "-": [S, 0, -S]}[s1]
    va = {"+": [0, S, S], "-": [0, S, -S]}[sa]
    vb = np.eye(3)[LEVELS1.index(b)]
    return np.einsum("i,j,k,ijlk->l", bra(v1), bra(vb), bra(va), psi)


def derive():
    table = {}
    for b, s1, sa in itertools.product("ge", "+-", "+-"):
        col0 = conditional_atom2(ready_state(1, 0), b, s1, sa)
        col1 = conditional_atom2(ready_state(0, 1), b, s1, sa)
        scale = np.abs(col0).max()
        u = np.zeros((3, 3))
        used = []
        for target, col in ((0, col0), (1, col1)):
            src = int(np.argmax(np.abs(col)))
            u[target, src] = np.real(col[src] / scale)
            used.append(src)
        free_src = ({0, 1, 2} - set(used)).pop()
        u[2, free_src] = 1
        table[(b, s1, sa)] = u
    return table


def check(table):
    rng = np.random.default_rng(0)
    for key, u in table.items():
        for _ in range(5):
            c = rng.normal(size=2) + 1j * rng.normal(size=2)
            c /= np.linalg.norm(c)
            out = u @ conditional_atom2(ready_state(*c), *key)
            out /= np.linalg.norm(out)
            assert abs(abs(np.vdot([c[0], c[1], 0], out)) - 1) < 1e-12, key


if __name__ == "__main__":
    t = derive()
    check(t)
    for key, u in t.items():
        rows = ", ".join("[" + ", ".join(str(int(x)) for x in row) + "]" for row in u)
        print(f"    {key!r}: np.array([{rows}], dtype=complex),")
