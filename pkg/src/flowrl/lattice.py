"""D2Q9 lattice kernels: TRT collision fused with pull streaming.

The population array always holds post-collision values; one call to the
step kernels gathers (streams), computes macroscopic fields and collides.
Boundaries are resolved during the gather:

* channel walls        halfway bounce-back (rows 0 and ny-1)
* symmetry plane       specular reflection (symmetric half-channel variant)
* cylinder surface     linearly interpolated bounce-back on precomputed
                       boundary links, with a wall-velocity term for the jets
* inlet                Zou/He velocity condition with the parabolic profile
* outlet               zero-gradient copy of the neighbor column with a
                       density anchor

All kernels are single-threaded and allocation-free; determinism does not
depend on thread scheduling. Multiple environments parallelize across
threads since the kernels release the GIL.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# direction order: 0 rest, 1 E, 2 N, 3 W, 4 S, 5 NE, 6 NW, 7 SW, 8 SE
CX = np.array([0, 1, 0, -1, 0, 1, -1, -1, 1], dtype=np.int64)
CY = np.array([0, 0, 1, 0, -1, 1, 1, -1, -1], dtype=np.int64)
OPP = np.array([0, 3, 4, 1, 2, 7, 8, 5, 6], dtype=np.int64)
WEIGHTS = np.array([4 / 9, 1 / 9, 1 / 9, 1 / 9, 1 / 9,
                    1 / 36, 1 / 36, 1 / 36, 1 / 36])
CS2 = 1.0 / 3.0

# values of the `kind` column in the node table
INTERIOR = 0
SOLID = 1
LINKED = 2      # fluid node with at least one cut link to the cylinder
WALL_BOTTOM = 3
WALL_TOP = 4
INLET = 5
OUTLET = 6


@njit(cache=True, nogil=True, fastmath=True, error_model="numpy")
def equilibrium(rho, ux, uy, f):
    ny, nx = rho.shape
    for j in range(ny):
        for i in range(nx):
            r = rho[j, i]
            u = ux[j, i]
            v = uy[j, i]
            usq = 1.5 * (u * u + v * v)
            uu = u * u
            vv = v * v
            upv = u + v
            umv = u - v
            f[j, i, 0] = (4.0 / 9.0) * r * (1.0 - usq)
            rs = r / 9.0
            rd = r / 36.0
            f[j, i, 1] = rs * (1.0 + 3.0 * u + 4.5 * uu - usq)
            f[j, i, 2] = rs * (1.0 + 3.0 * v + 4.5 * vv - usq)
            f[j, i, 3] = rs * (1.0 - 3.0 * u + 4.5 * uu - usq)
            f[j, i, 4] = rs * (1.0 - 3.0 * v + 4.5 * vv - usq)
            f[j, i, 5] = rd * (1.0 + 3.0 * upv + 4.5 * upv * upv - usq)
            f[j, i, 6] = rd * (1.0 - 3.0 * umv + 4.5 * umv * umv - usq)
            f[j, i, 7] = rd * (1.0 - 3.0 * upv + 4.5 * upv * upv - usq)
            f[j, i, 8] = rd * (1.0 + 3.0 * umv + 4.5 * umv * umv - usq)


@njit(cache=True, nogil=True, fastmath=True, inline="always", error_model="numpy")
def _collide_write(fdst, j, i, f0, f1, f2, f3, f4, f5, f6, f7, f8,
                   rho, ux, uy, omega_p, omega_m):
    r = f0 + f1 + f2 + f3 + f4 + f5 + f6 + f7 + f8
    u = (f1 - f3 + f5 - f6 - f7 + f8) / r
    v = (f2 - f4 + f5 + f6 - f7 - f8) / r
    rho[j, i] = r
    ux[j, i] = u
    uy[j, i] = v
    usq = 1.5 * (u * u + v * v)
    uu = u * u
    vv = v * v
    upv = u + v
    umv = u - v
    e0 = (4.0 / 9.0) * r * (1.0 - usq)
    rs = r / 9.0
    rd = r / 36.0
    e1 = rs * (1.0 + 3.0 * u + 4.5 * uu - usq)
    e3 = rs * (1.0 - 3.0 * u + 4.5 * uu - usq)
    e2 = rs * (1.0 + 3.0 * v + 4.5 * vv - usq)
    e4 = rs * (1.0 - 3.0 * v + 4.5 * vv - usq)
    e5 = rd * (1.0 + 3.0 * upv + 4.5 * upv * upv - usq)
    e7 = rd * (1.0 - 3.0 * upv + 4.5 * upv * upv - usq)
    e6 = rd * (1.0 - 3.0 * umv + 4.5 * umv * umv - usq)
    e8 = rd * (1.0 + 3.0 * umv + 4.5 * umv * umv - usq)
    fdst[j, i, 0] = f0 - omega_p * (f0 - e0)
    hp = 0.5 * ((f1 + f3) - (e1 + e3))
    hm = 0.5 * ((f1 - f3) - (e1 - e3))
    fdst[j, i, 1] = f1 - omega_p * hp - omega_m * hm
    fdst[j, i, 3] = f3 - omega_p * hp + omega_m * hm
    hp = 0.5 * ((f2 + f4) - (e2 + e4))
    hm = 0.5 * ((f2 - f4) - (e2 - e4))
    fdst[j, i, 2] = f2 - omega_p * hp - omega_m * hm
    fdst[j, i, 4] = f4 - omega_p * hp + omega_m * hm
    hp = 0.5 * ((f5 + f7) - (e5 + e7))
    hm = 0.5 * ((f5 - f7) - (e5 - e7))
    fdst[j, i, 5] = f5 - omega_p * hp - omega_m * hm
    fdst[j, i, 7] = f7 - omega_p * hp + omega_m * hm
    hp = 0.5 * ((f6 + f8) - (e6 + e8))
    hm = 0.5 * ((f6 - f8) - (e6 - e8))
    fdst[j, i, 6] = f6 - omega_p * hp - omega_m * hm
    fdst[j, i, 8] = f8 - omega_p * hp + omega_m * hm


@njit(cache=True, nogil=True, fastmath=True, error_model="numpy")
def step_interior(fsrc, fdst, kind, rho, ux, uy, omega_p, omega_m):
    """Fused gather + collide for nodes with all-fluid neighborhoods."""
    ny, nx = kind.shape
    for j in range(1, ny - 1):
        for i in range(1, nx - 1):
            if kind[j, i] != INTERIOR:
                continue
            f0 = fsrc[j, i, 0]
            f1 = fsrc[j, i - 1, 1]
            f2 = fsrc[j - 1, i, 2]
            f3 = fsrc[j, i + 1, 3]
            f4 = fsrc[j + 1, i, 4]
            f5 = fsrc[j - 1, i - 1, 5]
            f6 = fsrc[j - 1, i + 1, 6]
            f7 = fsrc[j + 1, i + 1, 7]
            f8 = fsrc[j + 1, i - 1, 8]
            _collide_write(fdst, j, i, f0, f1, f2, f3, f4, f5, f6, f7, f8,
                           rho, ux, uy, omega_p, omega_m)


@njit(cache=True, nogil=True, fastmath=True, error_model="numpy")
def step_walls(fsrc, fdst, kind, rho, ux, uy, omega_p, omega_m, mirror_top):
    """Wall rows: halfway bounce-back; specular reflection if mirror_top."""
    ny, nx = kind.shape
    for i in range(1, nx - 1):
        # bottom row j = 0: populations from the wall replaced by bounce-back
        if kind[0, i] == WALL_BOTTOM:
            j = 0
            f0 = fsrc[j, i, 0]
            f1 = fsrc[j, i - 1, 1]
            f3 = fsrc[j, i + 1, 3]
            f4 = fsrc[j + 1, i, 4]
            f7 = fsrc[j + 1, i + 1, 7]
            f8 = fsrc[j + 1, i - 1, 8]
            f2 = fsrc[j, i, 4]
            f5 = fsrc[j, i, 7]
            f6 = fsrc[j, i, 8]
            _collide_write(fdst, j, i, f0, f1, f2, f3, f4, f5, f6, f7, f8,
                           rho, ux, uy, omega_p, omega_m)
        if kind[ny - 1, i] == WALL_TOP:
            j = ny - 1
            f0 = fsrc[j, i, 0]
            f1 = fsrc[j, i - 1, 1]
            f2 = fsrc[j - 1, i, 2]
            f3 = fsrc[j, i + 1, 3]
            f5 = fsrc[j - 1, i - 1, 5]
            f6 = fsrc[j - 1, i + 1, 6]
            if mirror_top:
                # specular: tangential momentum preserved, shifted by one cell
                f4 = fsrc[j, i, 2]
                f7 = fsrc[j, min(i + 1, nx - 1), 6]
                f8 = fsrc[j, max(i - 1, 0), 5]
            else:
                f4 = fsrc[j, i, 2]
                f7 = fsrc[j, i, 5]
                f8 = fsrc[j, i, 6]
            _collide_write(fdst, j, i, f0, f1, f2, f3, f4, f5, f6, f7, f8,
                           rho, ux, uy, omega_p, omega_m)


@njit(cache=True, nogil=True, fastmath=True, error_model="numpy")
def cylinder_links(fsrc, q_hat, link_jf, link_if, link_k, link_a, link_b,
                   link_j2, link_i2, link_k2, link_jet, link_jet_id,
                   link_values, out):
    """Interpolated bounce-back values for all cut links + momentum exchange.

    Writes the reflected population entering each link's fluid node into
    link_values; accumulates the instantaneous force (lattice units) and the
    per-jet injected mass into out = [fx, fy, flux_jet1, flux_jet2].
    """
    n = link_jf.shape[0]
    fx = 0.0
    fy = 0.0
    flux1 = 0.0
    flux2 = 0.0
    for m in range(n):
        jf = link_jf[m]
        i_f = link_if[m]
        k = link_k[m]
        fk = fsrc[jf, i_f, k]
        val = link_a[m] * fk + link_b[m] * fsrc[link_j2[m], link_i2[m], link_k2[m]]
        jet = link_jet[m] * q_hat
        val += jet
        link_values[m] = val
        fx += CX[k] * (fk + val)
        fy += CY[k] * (fk + val)
        if link_jet_id[m] == 1:
            flux1 += jet
        elif link_jet_id[m] == 2:
            flux2 += jet
    out[0] = fx
    out[1] = fy
    out[2] = flux1
    out[3] = flux2


@njit(cache=True, nogil=True, fastmath=True, error_model="numpy")
def step_linked(fsrc, fdst, rho, ux, uy, omega_p, omega_m,
                bnode_j, bnode_i, bnode_map, bnode_src, link_values):
    """Fluid nodes adjacent to the cylinder: gather with link substitution.

    bnode_src holds a precomputed (j, i, k) source per direction, which also
    encodes specular reflections when such a node touches the symmetry plane.
    """
    n = bnode_j.shape[0]
    fin = np.empty(9)
    for m in range(n):
        j = bnode_j[m]
        i = bnode_i[m]
        for k in range(9):
            idx = bnode_map[m, k]
            if idx >= 0:
                fin[k] = link_values[idx]
            else:
                fin[k] = fsrc[bnode_src[m, k, 0], bnode_src[m, k, 1],
                              bnode_src[m, k, 2]]
        _collide_write(fdst, j, i, fin[0], fin[1], fin[2], fin[3], fin[4],
                       fin[5], fin[6], fin[7], fin[8],
                       rho, ux, uy, omega_p, omega_m)


@njit(cache=True, nogil=True, fastmath=True, error_model="numpy")
def step_inlet(fsrc, fdst, kind, rho, ux, uy, omega_p, omega_m,
               u_profile, mirror_top):
    """Inlet column: Zou/He velocity condition, wall corners by bounce-back."""
    ny, nx = kind.shape
    i = 0
    for j in range(ny):
        f0 = fsrc[j, i, 0]
        f3 = fsrc[j, i + 1, 3]
        if j > 0:
            f2 = fsrc[j - 1, i, 2]
            f6 = fsrc[j - 1, i + 1, 6]
        else:
            f2 = fsrc[j, i, 4]
            f6 = fsrc[j, i, 8]
        if j < ny - 1:
            f4 = fsrc[j + 1, i, 4]
            f7 = fsrc[j + 1, i + 1, 7]
        elif mirror_top:
            f4 = fsrc[j, i, 2]
            f7 = fsrc[j, i + 1, 6]
        else:
            f4 = fsrc[j, i, 2]
            f7 = fsrc[j, i, 5]
        u0 = u_profile[j]
        r = (f0 + f2 + f4 + 2.0 * (f3 + f6 + f7)) / (1.0 - u0)
        f1 = f3 + (2.0 / 3.0) * r * u0
        f5 = f7 - 0.5 * (f2 - f4) + (1.0 / 6.0) * r * u0
        f8 = f6 + 0.5 * (f2 - f4) + (1.0 / 6.0) * r * u0
        _collide_write(fdst, j, i, f0, f1, f2, f3, f4, f5, f6, f7, f8,
                       rho, ux, uy, omega_p, omega_m)


@njit(cache=True, nogil=True, fastmath=True, error_model="numpy")
def step_outlet(fsrc, fdst, kind, rho, ux, uy, omega_p, omega_m, mirror_top):
    """Outlet column: copy the neighbor column's incoming state, anchored
    to the reference density (adding w_k * drho leaves momentum unchanged)."""
    ny, nx = kind.shape
    i = nx - 1
    fin = np.empty(9)
    for j in range(ny):
        # re-gather the post-streaming state of the neighbor column nx-2
        inb = nx - 2
        fin[0] = fsrc[j, inb, 0]
        fin[1] = fsrc[j, inb - 1, 1]
        fin[3] = fsrc[j, inb + 1, 3]
        if j > 0:
            fin[2] = fsrc[j - 1, inb, 2]
            fin[5] = fsrc[j - 1, inb - 1, 5]
            fin[6] = fsrc[j - 1, inb + 1, 6]
        else:
            fin[2] = fsrc[j, inb, 4]
            fin[5] = fsrc[j, inb, 7]
            fin[6] = fsrc[j, inb, 8]
        if j < ny - 1:
            fin[4] = fsrc[j + 1, inb, 4]
            fin[7] = fsrc[j + 1, inb + 1, 7]
            fin[8] = fsrc[j + 1, inb - 1, 8]
        elif mirror_top:
            fin[4] = fsrc[j, inb, 2]
            fin[7] = fsrc[j, inb + 1, 6]
            fin[8] = fsrc[j, inb - 1, 5]
        else:
            fin[4] = fsrc[j, inb, 2]
            fin[7] = fsrc[j, inb, 5]
            fin[8] = fsrc[j, inb, 6]
        r = 0.0
        for k in range(9):
            r += fin[k]
        drho = 1.0 - r
        _collide_write(fdst, j, i,
                       fin[0] + WEIGHTS[0] * drho, fin[1] + WEIGHTS[1] * drho,
                       fin[2] + WEIGHTS[2] * drho, fin[3] + WEIGHTS[3] * drho,
                       fin[4] + WEIGHTS[4] * drho, fin[5] + WEIGHTS[5] * drho,
                       fin[6] + WEIGHTS[6] * drho, fin[7] + WEIGHTS[7] * drho,
                       fin[8] + WEIGHTS[8] * drho,
                       rho, ux, uy, omega_p, omega_m)
