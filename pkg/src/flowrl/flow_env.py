"""Channel-cylinder flow environment with two controllable wall-normal jets.

Physical quantities are nondimensional: lengths in cylinder diameters D,
velocities in bulk velocity U_b, time in D/U_b. Internally the solver runs
a weakly compressible D2Q9 lattice scheme; conversion factors between the
lattice and physical systems are fixed at construction.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import lattice
from .config import ConfigError, GeometryConfig, RunConfig
from .neural import adjacency_normalize

SNAPSHOT_MAGIC = b"FLOWSNAP"
SNAPSHOT_VERSION = 1

FORCE_CSV_HEADER = "t_star,C_D,C_L,C_F,C_D_ema,C_L_ema,Q_hat"

# mirror about a horizontal plane: N<->S, NE<->SE, NW<->SW
MIRROR_Y = np.array([0, 1, 4, 3, 2, 8, 7, 6, 5], dtype=np.int64)


class DivergenceError(RuntimeError):
    """The lattice state became non-physical (NaN or non-positive density)."""

    def __init__(self, t_star: float):
        super().__init__(f"solver diverged at t*={t_star:.4f}")
        self.t_star = t_star


def inflow_profile(y: float | np.ndarray, height: float, u_bulk: float = 1.0):
    """Parabolic inflow with bulk velocity u_bulk: 6 y (H - y) / H^2."""
    y_arr = np.asarray(y, dtype=float)
    if np.any(y_arr < 0.0) or np.any(y_arr > height):
        raise ValueError(f"y outside channel [0, {height}]")
    return u_bulk * 6.0 * y_arr * (height - y_arr) / height**2


@dataclass
class JetSpec:
    """Pair of antisymmetric cosine jets at the cylinder poles."""

    omega: float                       # angular width, radians
    phi_centers: tuple[float, float]   # jet center angles, radians
    q_ref: float                       # reference mass flow across the diameter
    bound_fraction: float = 0.067
    diameter: float = 1.0
    q_hat: float = 0.0

    def __post_init__(self):
        if self.omega <= 0:
            raise ConfigError("jet angular width must be positive")

    @property
    def bound(self) -> float:
        return self.bound_fraction * self.q_ref

    def strength(self, i: int) -> float:
        # net-zero mass flux: Q_1 = -Q_2 = q_hat
        if i not in (1, 2):
            raise ValueError("jet index must be 1 or 2")
        return self.q_hat if i == 1 else -self.q_hat


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def jet_velocity(phi: float, jet: JetSpec, i: int) -> float:
    """Wall-normal velocity of jet i at surface angle phi (cosine profile)."""
    q = jet.strength(i)
    dphi = _wrap_angle(phi - jet.phi_centers[i - 1])
    if abs(dphi) > jet.omega / 2.0:
        return 0.0
    peak = q * math.pi / (2.0 * jet.omega * jet.diameter**2)
    return peak * math.cos(math.pi * dphi / jet.omega)


def ema_update(prev: float, x: float, beta: float) -> float:
    """Exponential moving average: beta * prev + (1 - beta) * x."""
    if not 0.0 < beta < 1.0:
        raise ConfigError(f"ema beta must lie in (0, 1), got {beta}")
    return beta * prev + (1.0 - beta) * x


@dataclass
class ForceRecord:
    C_D: float
    C_L: float
    C_F: float
    C_D_ema: float
    C_L_ema: float

    @classmethod
    def from_forces(cls, fx: float, fy: float, u_bulk: float = 1.0,
                    rho: float = 1.0, ema_d: float | None = None,
                    ema_l: float | None = None) -> "ForceRecord":
        cd = fx / (u_bulk * rho / 2.0)
        cl = fy / (u_bulk * rho / 2.0)
        cf = math.hypot(cd, cl)
        return cls(cd, cl, cf, cd if ema_d is None else ema_d,
                   cl if ema_l is None else ema_l)


@dataclass
class ProbeLayout:
    """Absolute probe positions plus their cylinder-centered normalization.

    The normalized coordinates (wall-parallel component first, wall-normal
    second) are relative to the cylinder center, so a global translation of
    the domain leaves them bit-identical.
    """

    positions: np.ndarray              # (N, 2) absolute coordinates
    center: tuple[float, float]
    diameter: float
    edges: list[tuple[int, int]]
    adjacency: np.ndarray              # (N, N) normalized coefficients c_ij
    order: np.ndarray = field(default=None)  # canonical probe order
    _normalized: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.order is None:
            self.order = np.arange(len(self.positions))
        if self._normalized is None:
            self._normalized = (np.asarray(self.positions, dtype=float)
                                - np.asarray(self.center)) / self.diameter

    @classmethod
    def from_relative(cls, rel, center, diameter, edges, adjacency
                      ) -> "ProbeLayout":
        rel = np.asarray(rel, dtype=float)
        positions = np.asarray(center) + rel * diameter
        return cls(positions, tuple(center), diameter, edges, adjacency,
                   _normalized=rel.copy())

    @property
    def normalized(self) -> np.ndarray:
        return self._normalized


@dataclass
class ProbeGraph:
    """Observation: pressure deviations + normalized coordinates on a graph."""

    delta_p: np.ndarray                # (N,)
    coords: np.ndarray                 # (N, 2) normalized
    adjacency: np.ndarray              # (N, N) c_ij

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([self.delta_p[:, None], self.coords], axis=1)

    def permuted(self, perm: np.ndarray) -> "ProbeGraph":
        perm = np.asarray(perm)
        return ProbeGraph(self.delta_p[perm], self.coords[perm],
                          self.adjacency[np.ix_(perm, perm)])


@dataclass
class FlowField:
    """Full simulator state on a fixed grid of cell centers."""

    f: np.ndarray                      # (ny, nx, 9) populations
    rho: np.ndarray
    ux: np.ndarray
    uy: np.ndarray
    t_star: float
    dx: float
    u_lat: float                       # lattice velocity per unit physical
    solid: np.ndarray

    @property
    def pressure(self) -> np.ndarray:
        """Pressure deviation from the outlet reference, in rho U_b^2 units."""
        return lattice.CS2 * (self.rho - 1.0) / self.u_lat**2

    def velocity(self) -> tuple[np.ndarray, np.ndarray]:
        return self.ux / self.u_lat, self.uy / self.u_lat


def bilinear(fieldvals: np.ndarray, x: float, y: float, dx: float) -> float:
    """Bilinear interpolation on the cell-centered grid."""
    ny, nx = fieldvals.shape
    gx = x / dx - 0.5
    gy = y / dx - 0.5
    i0 = int(math.floor(gx))
    j0 = int(math.floor(gy))
    i0 = min(max(i0, 0), nx - 2)
    j0 = min(max(j0, 0), ny - 2)
    tx = gx - i0
    ty = gy - j0
    return ((1 - tx) * (1 - ty) * fieldvals[j0, i0]
            + tx * (1 - ty) * fieldvals[j0, i0 + 1]
            + (1 - tx) * ty * fieldvals[j0 + 1, i0]
            + tx * ty * fieldvals[j0 + 1, i0 + 1])


def sample_probes(fieldvals: FlowField, layout: ProbeLayout,
                  p_ref: float = 0.0) -> ProbeGraph:
    """Pressure deviations at the probes, with normalized coordinates."""
    p = fieldvals.pressure
    dp = np.empty(len(layout.positions))
    for n, (x, y) in enumerate(layout.positions):
        dp[n] = bilinear(p, x, y, fieldvals.dx) - p_ref
    return ProbeGraph(dp, layout.normalized.copy(), layout.adjacency)


def mirror_populations(f: np.ndarray) -> np.ndarray:
    """Reflect a population array about the horizontal centerline."""
    return f[::-1, :, MIRROR_Y].copy()


def reference_mass_flow(geom: GeometryConfig, u_bulk: float = 1.0) -> float:
    """Mean mass flow across the cylinder diameter from the inflow profile."""
    h = geom.channel_height
    yc = geom.cylinder_y
    a = yc - geom.diameter / 2.0
    b = yc + geom.diameter / 2.0
    # closed form of int 6 y (H - y) / H^2 dy
    prim = lambda y: 6.0 / h**2 * (h * y**2 / 2.0 - y**3 / 3.0)
    return u_bulk * (prim(b) - prim(a))


class CylinderFlowEnv:
    """One simulation instance; exclusively owned by a single rollout worker.

    symmetric=True simulates the lower half channel with a specular symmetry
    plane at the centerline (cylinder forced onto the plane, jets disabled).
    """

    def __init__(self, config: RunConfig, symmetric: bool = False):
        config.validate()
        self.config = config
        self.symmetric = symmetric
        geom = config.geometry
        res = geom.grid_resolution
        self.dx = geom.diameter / res
        self.diameter = geom.diameter
        if symmetric:
            height = geom.channel_height / 2.0
            self.cyl_y = height  # on the symmetry plane
        else:
            height = geom.channel_height
            self.cyl_y = geom.cylinder_y
        self.height = height
        self.full_height = geom.channel_height
        self.length = geom.channel_length
        self.cyl_x = geom.cylinder_x
        self.ny = int(round(height * res))
        self.nx = int(round(geom.channel_length * res))
        if abs(self.ny * self.dx - height) > 1e-9:
            raise ConfigError("grid resolution does not tile the channel height")

        # time/velocity scales: a control interval is an integer number of
        # lattice steps, the lattice velocity is adjusted to make it exact
        dt_c = config.episode.dt_control
        target = config.solver.lattice_velocity
        self.n_sub = max(1, int(round(dt_c * res / target)))
        self.u_lat = dt_c * res / self.n_sub
        self.dt = self.u_lat * self.dx
        mach_proxy = 1.5 * self.u_lat / math.sqrt(lattice.CS2)
        if mach_proxy >= config.solver.mach_proxy_limit:
            raise ConfigError(
                f"unstable lattice parameters: Mach proxy {mach_proxy:.3f} "
                f">= {config.solver.mach_proxy_limit}")
        nu_lat = self.u_lat * res / config.reynolds
        tau_p = 3.0 * nu_lat + 0.5
        tau_m = 0.5 + config.solver.trt_magic / (tau_p - 0.5)
        self.omega_p = 1.0 / tau_p
        self.omega_m = 1.0 / tau_m

        self.q_ref = reference_mass_flow(geom if not symmetric else
                                         self._symmetric_geom(geom))
        jc = config.jets
        self.jet = JetSpec(
            omega=math.radians(jc.width_deg),
            phi_centers=tuple(math.radians(a) for a in jc.center_angles_deg),
            q_ref=self.q_ref,
            bound_fraction=jc.bound_fraction,
            diameter=geom.diameter,
        )
        self.ramp = jc.ramp

        self._build_grid()
        self._build_links()
        self._build_probes()

        self.beta = config.solver.ema_beta
        self.sample_every = max(
            1, self.n_sub // config.solver.force_samples_per_interval)
        # force conversion: lattice momentum exchange -> Eq.-style coefficient
        self.force_scale = 2.0 * self.dx / self.u_lat**2
        if symmetric:
            self.force_scale *= 2.0  # half domain integrates half the surface

        self.reset()

    @staticmethod
    def _symmetric_geom(geom: GeometryConfig) -> GeometryConfig:
        import dataclasses
        return dataclasses.replace(geom, cylinder_offset=0.0)

    # ------------------------------------------------------------------ grid

    def _build_grid(self):
        ny, nx = self.ny, self.nx
        ys = (np.arange(ny) + 0.5) * self.dx
        xs = (np.arange(nx) + 0.5) * self.dx
        self.node_x, self.node_y = np.meshgrid(xs, ys)
        r = self.diameter / 2.0
        self.solid = ((self.node_x - self.cyl_x) ** 2
                      + (self.node_y - self.cyl_y) ** 2) < r * r
        if self.solid[0, :].any() or self.solid[:, 0].any() \
                or self.solid[:, -1].any():
            raise ConfigError("cylinder intersects a domain boundary")
        if not self.symmetric and self.solid[-1, :].any():
            raise ConfigError("cylinder intersects a domain boundary")

        kind = np.full((ny, nx), lattice.INTERIOR, dtype=np.int8)
        kind[self.solid] = lattice.SOLID
        kind[0, :] = np.where(self.solid[0, :], lattice.SOLID, lattice.WALL_BOTTOM)
        kind[-1, :] = np.where(self.solid[-1, :], lattice.SOLID, lattice.WALL_TOP)
        kind[:, 0] = lattice.INLET
        kind[:, -1] = lattice.OUTLET
        # fluid nodes with any solid lattice neighbor take link handling,
        # which also covers the symmetry plane when the cylinder sits on it
        linked = np.zeros((ny, nx), dtype=bool)
        for k in range(1, 9):
            shifted = np.zeros_like(self.solid)
            cy, cx = lattice.CY[k], lattice.CX[k]
            src = self.solid
            ys0, ys1 = max(0, cy), ny + min(0, cy)
            xs0, xs1 = max(0, cx), nx + min(0, cx)
            shifted[ys0:ys1, xs0:xs1] = src[max(0, -cy):ny + min(0, -cy),
                                            max(0, -cx):nx + min(0, -cx)]
            linked |= shifted
        linked &= ~self.solid
        if linked[0, :].any() or linked[:, 0].any() or linked[:, -1].any():
            raise ConfigError("cylinder too close to a domain boundary")
        if linked[-1, :].any() and not self.symmetric:
            raise ConfigError("cylinder too close to a domain boundary")
        kind[linked] = lattice.LINKED
        self.kind = kind

        yprofile = np.array([self._inflow_at(y) for y in ys])
        self.u_profile_lat = yprofile * self.u_lat

    def _inflow_at(self, y: float) -> float:
        # in the symmetric half channel the profile is the lower half of the
        # full-height parabola
        return float(inflow_profile(y, self.full_height))

    # ----------------------------------------------------------------- links

    def _build_links(self):
        r = self.diameter / 2.0
        cx_c, cy_c = self.cyl_x, self.cyl_y
        jf, if_, ks = np.nonzero(
            (self.kind == lattice.LINKED)[:, :, None]
            & np.ones((1, 1, 9), dtype=bool))
        rows = []
        for j, i, k in zip(jf, if_, ks):
            if k == 0:
                continue
            nj = j + lattice.CY[k]
            ni = i + lattice.CX[k]
            if not (0 <= nj < self.ny and 0 <= ni < self.nx):
                continue
            if not self.solid[nj, ni]:
                continue
            rows.append(self._make_link(int(j), int(i), int(k), cx_c, cy_c, r))
        if not rows:
            raise ConfigError("cylinder not resolved by the grid")
        n = len(rows)
        self.link_jf = np.array([r_[0] for r_ in rows], dtype=np.int64)
        self.link_if = np.array([r_[1] for r_ in rows], dtype=np.int64)
        self.link_k = np.array([r_[2] for r_ in rows], dtype=np.int64)
        self.link_a = np.array([r_[3] for r_ in rows])
        self.link_b = np.array([r_[4] for r_ in rows])
        self.link_j2 = np.array([r_[5] for r_ in rows], dtype=np.int64)
        self.link_i2 = np.array([r_[6] for r_ in rows], dtype=np.int64)
        self.link_k2 = np.array([r_[7] for r_ in rows], dtype=np.int64)
        self.link_jet = np.array([r_[8] for r_ in rows])
        self.link_jet_id = np.array([r_[9] for r_ in rows], dtype=np.int64)
        self.link_values = np.zeros(n)

        # per-node map: direction -> link index feeding that direction
        bmask = self.kind == lattice.LINKED
        bj, bi = np.nonzero(bmask)
        self.bnode_j = bj.astype(np.int64)
        self.bnode_i = bi.astype(np.int64)
        node_index = {(int(j), int(i)): m for m, (j, i) in enumerate(zip(bj, bi))}
        self.bnode_map = np.full((len(bj), 9), -1, dtype=np.int64)
        for idx in range(n):
            m = node_index[(int(self.link_jf[idx]), int(self.link_if[idx]))]
            kbar = lattice.OPP[self.link_k[idx]]
            self.bnode_map[m, kbar] = idx
        # gather sources for the remaining directions; a linked node in the
        # top row of the symmetric half channel pulls specular reflections
        self.bnode_src = np.zeros((len(bj), 9, 3), dtype=np.int64)
        for m, (j, i) in enumerate(zip(bj, bi)):
            j, i = int(j), int(i)
            for k in range(9):
                if self.bnode_map[m, k] >= 0:
                    continue
                js = j - lattice.CY[k]
                isrc = i - lattice.CX[k]
                ks = k
                if js >= self.ny:
                    if not self.symmetric:
                        raise ConfigError("linked node at the channel wall")
                    # specular image: same tangential offset, vertical
                    # velocity component flipped
                    js = self.ny - 1
                    ks = int(MIRROR_Y[k])
                if not (0 <= isrc < self.nx):
                    raise ConfigError("linked node at the inlet/outlet")
                if self.solid[js, isrc]:
                    # reflected path grazes the cylinder: local bounce-back
                    js, isrc, ks = j, i, int(lattice.OPP[k])
                self.bnode_src[m, k] = (js, isrc, ks)

    def _make_link(self, j, i, k, cx_c, cy_c, r):
        dx = self.dx
        px = (i + 0.5) * dx - cx_c
        py = (j + 0.5) * dx - cy_c
        ex = lattice.CX[k] * dx
        ey = lattice.CY[k] * dx
        a = ex * ex + ey * ey
        b = 2.0 * (px * ex + py * ey)
        c0 = px * px + py * py - r * r
        disc = b * b - 4.0 * a * c0
        if disc < 0.0:
            q = 0.5  # grazing link; treat as halfway
        else:
            q = (-b - math.sqrt(disc)) / (2.0 * a)
            if not 0.0 < q <= 1.0:
                q = (-b + math.sqrt(disc)) / (2.0 * a)
            q = min(max(q, 1e-9), 1.0)
        # wall intersection point and outward normal
        wx = px + q * ex
        wy = py + q * ey
        wn = math.hypot(wx, wy)
        nxv, nyv = wx / wn, wy / wn
        phi = math.atan2(wy, wx)

        ffj = j - lattice.CY[k]
        ffi = i - lattice.CX[k]
        ff_ok = (0 <= ffj < self.ny and 0 <= ffi < self.nx
                 and not self.solid[ffj, ffi])
        kbar = lattice.OPP[k]
        if q < 0.5 and ff_ok:
            a_co, b_co = 2.0 * q, 1.0 - 2.0 * q
            j2, i2, k2 = ffj, ffi, k
            wall_w = 1.0
        elif q >= 0.5:
            a_co = 1.0 / (2.0 * q)
            b_co = (2.0 * q - 1.0) / (2.0 * q)
            j2, i2, k2 = j, i, kbar
            wall_w = 1.0 / (2.0 * q)
        else:
            a_co, b_co = 1.0, 0.0  # halfway fallback when upstream is solid
            j2, i2, k2 = j, i, k
            wall_w = 1.0

        # jet wall-velocity term: coefficient multiplying q_hat
        jet_coeff = 0.0
        jet_id = 0
        for jet_i in (1, 2):
            dphi = _wrap_angle(phi - self.jet.phi_centers[jet_i - 1])
            if abs(dphi) <= self.jet.omega / 2.0:
                g = (math.pi / (2.0 * self.jet.omega * self.diameter**2)
                     * math.cos(math.pi * dphi / self.jet.omega))
                sign = 1.0 if jet_i == 1 else -1.0
                cdotn = lattice.CX[k] * nxv + lattice.CY[k] * nyv
                u_w_per_q = sign * g * self.u_lat
                jet_coeff = -6.0 * lattice.WEIGHTS[k] * cdotn * u_w_per_q * wall_w
                jet_id = jet_i
                break
        return (j, i, k, a_co, b_co, j2, i2, k2, jet_coeff, jet_id)

    # ---------------------------------------------------------------- probes

    def _build_probes(self):
        pc = self.config.probes
        center = (self.cyl_x, self.cyl_y)
        adjacency = adjacency_normalize(pc.edges, len(pc.positions),
                                        normalize=pc.normalize_adjacency)
        layout = ProbeLayout.from_relative(pc.positions, center,
                                           self.diameter,
                                           [tuple(e) for e in pc.edges],
                                           adjacency)
        margin = self.dx
        r = self.diameter / 2.0
        for n, (x, y) in enumerate(layout.positions):
            if not (margin < x < self.length - margin
                    and margin < y < self.height - margin):
                if self.symmetric and y >= self.height - margin:
                    continue  # probes above the plane are absent in half runs
                raise ConfigError(f"probe {n} at ({x:.3f}, {y:.3f}) "
                                  "outside the fluid domain")
            if math.hypot(x - self.cyl_x, y - self.cyl_y) < r + margin:
                raise ConfigError(f"probe {n} inside or too close to cylinder")
        self.layout = layout

    # ----------------------------------------------------------------- state

    def reset(self):
        """Impulsive start from the parabolic profile at uniform density."""
        ny, nx = self.ny, self.nx
        rho = np.ones((ny, nx))
        ux = np.where(self.solid, 0.0, self.u_profile_lat[:, None]
                      * np.ones((ny, nx)))
        uy = np.zeros((ny, nx))
        f = np.empty((ny, nx, 9))
        lattice.equilibrium(rho, ux, uy, f)
        self.f = f
        self.f2 = f.copy()
        self.rho = rho
        self.ux = ux
        self.uy = uy
        self.t_lattice = 0
        self.t_offset = 0.0
        self.q_prev = 0.0
        self.ema_d: float | None = None
        self.ema_l: float | None = None
        self.history: list[tuple] = []
        self._force_out = np.zeros(4)
        self._last_force = (0.0, 0.0)

    @property
    def t_star(self) -> float:
        return self.t_offset + self.t_lattice * self.dt

    @property
    def field(self) -> FlowField:
        return FlowField(self.f, self.rho, self.ux, self.uy, self.t_star,
                         self.dx, self.u_lat, self.solid)

    def observe(self) -> ProbeGraph:
        return sample_probes(self.field, self.layout)

    def total_mass(self) -> float:
        return float(self.f[~self.solid].sum())

    def jet_mass_fluxes(self) -> tuple[float, float]:
        """Injected lattice mass per step for each jet at the current q."""
        lattice.cylinder_links(
            self.f, self.q_prev * 1.0, self.link_jf, self.link_if,
            self.link_k, self.link_a, self.link_b, self.link_j2,
            self.link_i2, self.link_k2, self.link_jet, self.link_jet_id,
            self.link_values, self._force_out)
        return float(self._force_out[2]), float(self._force_out[3])

    # ------------------------------------------------------------------ step

    def _advance(self, q_step: float, record: bool):
        lattice.cylinder_links(
            self.f, q_step, self.link_jf, self.link_if, self.link_k,
            self.link_a, self.link_b, self.link_j2, self.link_i2,
            self.link_k2, self.link_jet, self.link_jet_id,
            self.link_values, self._force_out)
        args = (self.f, self.f2, self.kind, self.rho, self.ux, self.uy,
                self.omega_p, self.omega_m)
        lattice.step_interior(*args)
        lattice.step_walls(*args, self.symmetric)
        lattice.step_linked(self.f, self.f2, self.rho, self.ux, self.uy,
                            self.omega_p, self.omega_m, self.bnode_j,
                            self.bnode_i, self.bnode_map, self.bnode_src,
                            self.link_values)
        lattice.step_inlet(*args, self.u_profile_lat, self.symmetric)
        lattice.step_outlet(*args, self.symmetric)
        self.f, self.f2 = self.f2, self.f
        self.t_lattice += 1
        fx = self._force_out[0] * self.force_scale
        fy = self._force_out[1] * self.force_scale
        if self.symmetric:
            fy = 0.0  # mirror image cancels the transverse force exactly
        self._last_force = (fx, fy)
        if record:
            self.history.append((self.t_star, fx, fy, math.hypot(fx, fy),
                                 self.ema_d if self.ema_d is not None else fx,
                                 self.ema_l if self.ema_l is not None else fy,
                                 q_step))

    def step(self, q_hat: float = 0.0) -> ForceRecord:
        """Advance one control interval with the given jet strength."""
        bound = self.jet.bound
        if self.symmetric and q_hat != 0.0:
            raise ConfigError("jets are disabled in the symmetric variant")
        if abs(q_hat) > bound * (1.0 + 1e-9):
            raise ValueError(
                f"jet strength {q_hat:.5g} exceeds bound {bound:.5g}")
        q0 = self.q_prev
        for s in range(self.n_sub):
            if self.ramp:
                frac = (s + 1) / self.n_sub
                q_step = q0 + (q_hat - q0) * frac
            else:
                q_step = q_hat
            record = ((s + 1) % self.sample_every == 0) or (s == self.n_sub - 1)
            self._advance(q_step, record)
        self.q_prev = q_hat
        self._check_health()
        cd, cl = self._last_force
        self.ema_d = cd if self.ema_d is None else ema_update(
            self.ema_d, cd, self.beta)
        self.ema_l = cl if self.ema_l is None else ema_update(
            self.ema_l, cl, self.beta)
        return ForceRecord(cd, cl, math.hypot(cd, cl), self.ema_d, self.ema_l)

    def _check_health(self):
        fluid_rho = self.rho[~self.solid]
        if not np.isfinite(fluid_rho).all() or fluid_rho.min() <= 0.0:
            raise DivergenceError(self.t_star)

    def compute_forces(self) -> ForceRecord:
        """Momentum-exchange estimate on the instantaneous populations."""
        lattice.cylinder_links(
            self.f, self.q_prev, self.link_jf, self.link_if, self.link_k,
            self.link_a, self.link_b, self.link_j2, self.link_i2,
            self.link_k2, self.link_jet, self.link_jet_id,
            self.link_values, self._force_out)
        fx = self._force_out[0] * self.force_scale
        fy = 0.0 if self.symmetric else self._force_out[1] * self.force_scale
        cd, cl = fx, fy
        return ForceRecord(cd, cl, math.hypot(cd, cl),
                           self.ema_d if self.ema_d is not None else cd,
                           self.ema_l if self.ema_l is not None else cl)

    def reset_ema(self):
        self.ema_d = None
        self.ema_l = None

    # ------------------------------------------------------------- snapshots

    def save_snapshot(self, path) -> None:
        h = self.config.physics_hash().encode()
        with open(path, "wb") as fh:
            fh.write(SNAPSHOT_MAGIC)
            fh.write(struct.pack("<I", SNAPSHOT_VERSION))
            fh.write(struct.pack("<I", len(h)))
            fh.write(h)
            fh.write(struct.pack("<d", self.t_star))
            fh.write(struct.pack("<III", self.ny, self.nx, 9))
            fh.write(np.ascontiguousarray(self.f, dtype="<f8").tobytes())

    def load_snapshot(self, path) -> None:
        with open(path, "rb") as fh:
            magic = fh.read(len(SNAPSHOT_MAGIC))
            if magic != SNAPSHOT_MAGIC:
                raise ValueError(f"not a flow snapshot: {path}")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != SNAPSHOT_VERSION:
                raise ValueError(f"unsupported snapshot version {version}")
            (hlen,) = struct.unpack("<I", fh.read(4))
            stored = fh.read(hlen).decode()
            expect = self.config.physics_hash()
            if stored != expect:
                raise ValueError(
                    f"snapshot physics hash {stored} does not match the "
                    f"run's {expect}; refusing to mix artifacts")
            (t_star,) = struct.unpack("<d", fh.read(8))
            ny, nx, nk = struct.unpack("<III", fh.read(12))
            if (ny, nx, nk) != (self.ny, self.nx, 9):
                raise ValueError("snapshot shape does not match grid")
            data = np.frombuffer(fh.read(ny * nx * nk * 8), dtype="<f8")
        self.f = data.reshape(ny, nx, 9).copy()
        self.f2 = self.f.copy()
        self.t_lattice = 0
        self.t_offset = t_star
        self.q_prev = 0.0
        self.reset_ema()
        self.history = []
        self._refresh_macro()

    def set_state(self, f: np.ndarray, t_star: float = 0.0) -> None:
        """Install a population array directly (testing and tools)."""
        if f.shape != (self.ny, self.nx, 9):
            raise ValueError("population array shape does not match grid")
        self.f = np.ascontiguousarray(f, dtype=float)
        self.f2 = self.f.copy()
        self.t_lattice = 0
        self.t_offset = t_star
        self.q_prev = 0.0
        self.reset_ema()
        self.history = []
        self._refresh_macro()

    def _refresh_macro(self):
        fl = ~self.solid
        self.rho = self.f.sum(axis=2)
        with np.errstate(invalid="ignore", divide="ignore"):
            self.ux = np.where(fl, (self.f * lattice.CX).sum(axis=2)
                               / self.rho, 0.0)
            self.uy = np.where(fl, (self.f * lattice.CY).sum(axis=2)
                               / self.rho, 0.0)
        self.rho = np.where(fl, self.rho, 1.0)

    # ----------------------------------------------------------------- dumps

    def write_force_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(FORCE_CSV_HEADER + "\n")
            for row in self.history:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")

    def dump_fields(self, prefix) -> None:
        """Raw field dumps (flat binary + JSON header) for external plotting."""
        import json
        ux, uy = self.field.velocity()
        p = self.field.pressure
        bbox = [0.0, 0.0, self.length, self.height]
        for name, arr in (("ux", ux), ("uy", uy), ("p", p)):
            data = np.ascontiguousarray(arr, dtype="<f8")
            with open(f"{prefix}_{name}.bin", "wb") as fh:
                fh.write(data.tobytes())
            header = {"shape": list(arr.shape), "dtype": "<f8",
                      "bbox": bbox, "field": name, "t_star": self.t_star}
            with open(f"{prefix}_{name}.json", "w") as fh:
                json.dump(header, fh, indent=1)
