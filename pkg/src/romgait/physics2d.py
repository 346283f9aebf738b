"""Planar rigid-body dynamics.

Two mechanism families share one integrator convention (semi-implicit Euler
over ``substeps`` substeps per control step) and one contact model
(speculative impulses against a flat ground with Baumgarte correction and
Coulomb friction):

* :class:`SpringLegWorld` -- translating bodies coupled by massless spring
  legs with actuated hips. Used for the reduced-order walker.
* :class:`ArticulatedWorld` -- a floating-base tree of links joined by
  revolute joints, integrated in generalized coordinates. Used for the
  multi-link biped.

The numerical kernels are compiled with numba; the Python classes only hold
arrays and translate them into the small dataclasses below.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Sequence

import numba as nb
import numpy as np

CONTACT_TOLERANCE = 1e-4
MIN_LENGTH_FRACTION = 0.1

_OK, _NONFINITE, _DEGENERATE = 0, 1, 2


class PhysicsError(RuntimeError):
    pass


class NonFiniteState(PhysicsError):
    """Integration produced NaN or Inf; reduce dt or reset the world."""


class DegenerateLeg(PhysicsError):
    """A spring leg was compressed below its minimum-length clamp."""


class TorqueDimensionMismatch(PhysicsError, ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    gravity: tuple[float, float] = (0.0, -9.81)
    dt: float = 1.0 / 60.0
    substeps: int = 8
    ground_height: float = 0.0
    friction: float = 1.0
    baumgarte: float = 0.2
    solver_iterations: int = 12

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ValueError(f"substeps must be a positive integer, got {self.substeps}")
        if self.friction < 0:
            raise ValueError("friction must be non-negative")
        if not all(math.isfinite(g) for g in self.gravity):
            raise ValueError("gravity must be finite")


@dataclass
class RigidBodyState:
    position: np.ndarray
    angle: float
    linear_velocity: np.ndarray
    angular_velocity: float
    mass: float
    inertia: float
    massless_limit: bool = False

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(2)
        self.linear_velocity = np.asarray(self.linear_velocity, dtype=float).reshape(2)
        if not self.mass > 0:
            raise ValueError("mass must be positive (use massless_limit for proxies)")
        if not self.inertia > 0:
            raise ValueError("inertia must be positive")


@dataclass
class SpringLeg:
    rest_length: float
    stiffness: float
    damping: float
    current_length: float
    length_rate: float = 0.0
    hip_angle: float = 0.0
    hip_angular_velocity: float = 0.0
    hip_torque_limit: float = np.inf

    @property
    def min_length(self) -> float:
        return MIN_LENGTH_FRACTION * self.rest_length

    @property
    def axis(self) -> np.ndarray:
        """Unit vector from hip to foot."""
        return np.array([math.sin(self.hip_angle), -math.cos(self.hip_angle)])


@dataclass
class ContactState:
    in_contact: bool
    contact_point: np.ndarray
    normal_force: float
    friction_coefficient: float


@dataclass(frozen=True)
class LegSpec:
    """Static description of one spring leg between two bodies of a SpringLegWorld."""

    hip_body: int
    foot_body: int
    rest_length: float
    stiffness: float
    damping: float
    hip_torque_limit: float
    hip_range: tuple[float, float] = (-np.inf, np.inf)
    limit_stiffness: float = 2000.0
    limit_damping: float = 100.0


def spring_force(leg: SpringLeg) -> np.ndarray:
    """Axial spring-damper force exerted on the foot end of ``leg``.

    Positive magnitude pushes the foot away from the hip; the hip body
    receives the opposite force.
    """
    if not leg.current_length >= leg.min_length:
        raise DegenerateLeg(
            f"leg length {leg.current_length} below clamp {leg.min_length}"
        )
    magnitude = (
        leg.stiffness * (leg.rest_length - leg.current_length)
        - leg.damping * leg.length_rate
    )
    return magnitude * leg.axis


# --------------------------------------------------------------------------
# spring-leg kernel


@nb.njit(cache=True)
def _spring_leg_substeps(pos, vel, inv_mass, leg_idx, leg_par, torques,
                         cp_body, cp_off, gravity, dt, n_sub, ground, mu,
                         beta, iters, impulses):
    n = pos.shape[0]
    nl = leg_idx.shape[0]
    nc = cp_body.shape[0]
    dv = np.zeros((n, 2))
    acc = np.zeros((nc, 2))
    for _ in range(n_sub):
        for i in range(n):
            if inv_mass[i] > 0.0:
                dv[i, 0] = gravity[0] * dt
                dv[i, 1] = gravity[1] * dt
            else:
                dv[i, 0] = 0.0
                dv[i, 1] = 0.0
        for j in range(nl):
            h = leg_idx[j, 0]
            f = leg_idx[j, 1]
            dx = pos[f, 0] - pos[h, 0]
            dy = pos[f, 1] - pos[h, 1]
            length = math.sqrt(dx * dx + dy * dy)
            if not length >= MIN_LENGTH_FRACTION * leg_par[j, 0]:
                return _DEGENERATE
            ux = dx / length
            uy = dy / length
            rate = (vel[f, 0] - vel[h, 0]) * ux + (vel[f, 1] - vel[h, 1]) * uy
            axial = leg_par[j, 1] * (leg_par[j, 0] - length) - leg_par[j, 2] * rate
            tau = torques[j]
            phi = math.atan2(dx, -dy)
            over = 0.0
            if phi > leg_par[j, 5]:
                over = phi - leg_par[j, 5]
            elif phi < leg_par[j, 4]:
                over = phi - leg_par[j, 4]
            if over != 0.0:
                # inelastic penalty; the restoring part never pulls back toward the limit
                omega = ((vel[f, 0] - vel[h, 0]) * (-dy) + (vel[f, 1] - vel[h, 1]) * dx) / (length * length)
                limit = -leg_par[j, 6] * over - leg_par[j, 7] * omega
                if limit * over > 0.0:
                    limit = 0.0
                tau += limit
            tangential = tau / length
            fx = axial * ux - tangential * uy
            fy = axial * uy + tangential * ux
            dv[f, 0] += dt * inv_mass[f] * fx
            dv[f, 1] += dt * inv_mass[f] * fy
            dv[h, 0] -= dt * inv_mass[h] * fx
            dv[h, 1] -= dt * inv_mass[h] * fy
        for i in range(n):
            vel[i, 0] += dv[i, 0]
            vel[i, 1] += dv[i, 1]

        for c in range(nc):
            acc[c, 0] = 0.0
            acc[c, 1] = 0.0
        for _it in range(iters):
            for c in range(nc):
                i = cp_body[c]
                if inv_mass[i] == 0.0:
                    continue
                gap = pos[i, 1] + cp_off[c, 1] - ground
                if gap > 0.05:
                    continue
                if gap > 0.0:
                    target = -gap / dt
                else:
                    target = -beta * gap / dt
                m_eff = 1.0 / inv_mass[i]
                old = acc[c, 0]
                new = max(old + (target - vel[i, 1]) * m_eff, 0.0)
                acc[c, 0] = new
                vel[i, 1] += (new - old) * inv_mass[i]
                bound = mu * new
                old_t = acc[c, 1]
                new_t = min(max(old_t - vel[i, 0] * m_eff, -bound), bound)
                acc[c, 1] = new_t
                vel[i, 0] += (new_t - old_t) * inv_mass[i]
        for i in range(n):
            pos[i, 0] += dt * vel[i, 0]
            pos[i, 1] += dt * vel[i, 1]
            if not (math.isfinite(pos[i, 0]) and math.isfinite(pos[i, 1])
                    and math.isfinite(vel[i, 0]) and math.isfinite(vel[i, 1])):
                return _NONFINITE
    for c in range(nc):
        impulses[c, 0] = acc[c, 0]
        impulses[c, 1] = acc[c, 1]
    return _OK


class World:
    """Common surface of both mechanism families."""

    config: WorldConfig

    @property
    def n_actuators(self) -> int:
        raise NotImplementedError

    def step(self, applied_torques) -> None:
        raise NotImplementedError

    def mechanical_energy(self) -> float:
        raise NotImplementedError

    def copy(self):
        return copy.deepcopy(self)

    def _check_torques(self, applied_torques) -> np.ndarray:
        tau = np.asarray(applied_torques, dtype=float).reshape(-1)
        if tau.shape[0] != self.n_actuators:
            raise TorqueDimensionMismatch(
                f"expected {self.n_actuators} torques, got {tau.shape[0]}"
            )
        if not np.all(np.isfinite(tau)):
            raise NonFiniteState("applied torques contain NaN or Inf")
        return tau

    def _contact_states(self, points: np.ndarray, impulses: np.ndarray) -> list[ContactState]:
        h = self.config.dt / self.config.substeps
        out = []
        for p, (jn, _) in zip(points, impulses):
            # geometric contact; the force is the last substep's impulse rate
            touching = bool(p[1] - self.config.ground_height <= CONTACT_TOLERANCE)
            out.append(ContactState(
                in_contact=touching,
                contact_point=p.copy(),
                normal_force=float(jn / h) if touching else 0.0,
                friction_coefficient=self.config.friction,
            ))
        return out


class SpringLegWorld(World):
    """Translating bodies joined by massless spring legs with actuated hips.

    Body rotation is locked, so a hip torque ``tau`` on a leg of length ``L``
    reduces to a force ``tau / L`` on the foot, perpendicular to the leg, and
    the opposite force on the hip body. Bodies listed in ``anchored`` have
    infinite mass.
    """

    def __init__(self, config: WorldConfig, bodies: Sequence[RigidBodyState],
                 legs: Sequence[LegSpec] = (),
                 contact_points: Sequence[tuple[int, float, float]] = (),
                 anchored: Sequence[int] = ()):
        self.config = config
        self.masses = np.array([b.mass for b in bodies], dtype=float)
        self.inertias = np.array([b.inertia for b in bodies], dtype=float)
        self.massless = np.array([b.massless_limit for b in bodies], dtype=bool)
        self.pos = np.array([b.position for b in bodies], dtype=float).reshape(-1, 2)
        self.vel = np.array([b.linear_velocity for b in bodies], dtype=float).reshape(-1, 2)
        self.angles = np.array([b.angle for b in bodies], dtype=float)
        self.anchored = np.zeros(len(bodies), dtype=bool)
        self.anchored[list(anchored)] = True
        self.inv_mass = np.where(self.anchored, 0.0, 1.0 / self.masses)
        self.leg_specs = list(legs)
        self.leg_idx = np.array([[l.hip_body, l.foot_body] for l in legs], dtype=np.int64).reshape(-1, 2)
        self.leg_par = np.array(
            [[l.rest_length, l.stiffness, l.damping, l.hip_torque_limit, l.hip_range[0], l.hip_range[1],
              l.limit_stiffness, l.limit_damping] for l in legs], dtype=float
        ).reshape(-1, 8)
        self.cp_body = np.array([c[0] for c in contact_points], dtype=np.int64)
        self.cp_off = np.array([[c[1], c[2]] for c in contact_points], dtype=float).reshape(-1, 2)
        self.impulses = np.zeros((len(contact_points), 2))
        self.applied_torques = np.zeros(len(legs))
        self.time = 0.0
        for spec in self.leg_specs:
            d = self.pos[spec.foot_body] - self.pos[spec.hip_body]
            if np.hypot(*d) < MIN_LENGTH_FRACTION * spec.rest_length:
                raise DegenerateLeg("initial leg length below clamp")

    @property
    def n_actuators(self) -> int:
        return len(self.leg_specs)

    def step(self, applied_torques) -> None:
        tau = self._check_torques(applied_torques)
        tau = np.clip(tau, -self.leg_par[:, 3], self.leg_par[:, 3])
        cfg = self.config
        status = _spring_leg_substeps(
            self.pos, self.vel, self.inv_mass, self.leg_idx, self.leg_par, tau,
            self.cp_body, self.cp_off, np.asarray(cfg.gravity, dtype=float),
            cfg.dt / cfg.substeps, int(cfg.substeps), cfg.ground_height,
            cfg.friction, cfg.baumgarte, int(cfg.solver_iterations), self.impulses,
        )
        if status == _DEGENERATE:
            raise DegenerateLeg("spring leg compressed below minimum length")
        if status == _NONFINITE:
            raise NonFiniteState("non-finite state after integration")
        self.applied_torques = tau
        self.time += cfg.dt

    @property
    def bodies(self) -> list[RigidBodyState]:
        return [
            RigidBodyState(self.pos[i].copy(), float(self.angles[i]), self.vel[i].copy(), 0.0,
                           float(self.masses[i]), float(self.inertias[i]), bool(self.massless[i]))
            for i in range(len(self.masses))
        ]

    def leg(self, j: int) -> SpringLeg:
        spec = self.leg_specs[j]
        d = self.pos[spec.foot_body] - self.pos[spec.hip_body]
        dv = self.vel[spec.foot_body] - self.vel[spec.hip_body]
        length2 = float(d @ d)
        length = math.sqrt(length2)
        return SpringLeg(
            rest_length=spec.rest_length,
            stiffness=spec.stiffness,
            damping=spec.damping,
            current_length=length,
            length_rate=float(d @ dv) / length,
            hip_angle=math.atan2(d[0], -d[1]),
            hip_angular_velocity=float(-d[1] * dv[0] + d[0] * dv[1]) / length2,
            hip_torque_limit=spec.hip_torque_limit,
        )

    @property
    def legs(self) -> list[SpringLeg]:
        return [self.leg(j) for j in range(self.n_actuators)]

    def contact_positions(self) -> np.ndarray:
        return self.pos[self.cp_body] + self.cp_off

    @property
    def contacts(self) -> list[ContactState]:
        return self._contact_states(self.contact_positions(), self.impulses)

    def mechanical_energy(self) -> float:
        g = np.asarray(self.config.gravity, dtype=float)
        free = ~self.anchored
        kinetic = 0.5 * np.sum(self.masses[free] * np.sum(self.vel[free] ** 2, axis=1))
        height = self.pos.copy()
        height[:, 1] -= self.config.ground_height
        potential = -np.sum(self.masses[free] * (height[free] @ g))
        elastic = 0.0
        for leg in self.legs:
            elastic += 0.5 * leg.stiffness * (leg.rest_length - leg.current_length) ** 2
        return float(kinetic + potential + elastic)


# --------------------------------------------------------------------------
# articulated kernel


@dataclass(frozen=True)
class LinkSpec:
    """One link of a planar tree. Link 0 is the floating base.

    ``joint_in_parent`` locates this link's revolute joint in the parent
    frame; the link frame origin sits on that joint (for the base, on its
    centre of mass). ``com`` and ``contacts`` are in the link frame.
    """

    name: str
    parent: int
    joint_in_parent: tuple[float, float]
    com: tuple[float, float]
    mass: float
    inertia: float
    torque_limit: float = 0.0
    joint_range: tuple[float, float] = (-np.inf, np.inf)
    contacts: tuple[tuple[float, float], ...] = field(default_factory=tuple)


@nb.njit(cache=True)
def _kinematics(q, parent, joint_in_parent, com_local, theta, origin, com):
    nl = parent.shape[0]
    theta[0] = q[2]
    origin[0, 0] = q[0]
    origin[0, 1] = q[1]
    for l in range(1, nl):
        p = parent[l]
        c = math.cos(theta[p])
        s = math.sin(theta[p])
        origin[l, 0] = origin[p, 0] + c * joint_in_parent[l, 0] - s * joint_in_parent[l, 1]
        origin[l, 1] = origin[p, 1] + s * joint_in_parent[l, 0] + c * joint_in_parent[l, 1]
        theta[l] = theta[p] + q[2 + l]
    for l in range(nl):
        c = math.cos(theta[l])
        s = math.sin(theta[l])
        com[l, 0] = origin[l, 0] + c * com_local[l, 0] - s * com_local[l, 1]
        com[l, 1] = origin[l, 1] + s * com_local[l, 0] + c * com_local[l, 1]


@nb.njit(cache=True)
def _point_jacobian(link, px, py, parent, origin, jac):
    """Fill jac (2 x ndof) with d(point)/dq for a point fixed to ``link``."""
    jac[:, :] = 0.0
    jac[0, 0] = 1.0
    jac[1, 1] = 1.0
    k = link
    while k >= 0:
        dof = 2 if k == 0 else 2 + k
        jac[0, dof] = -(py - origin[k, 1])
        jac[1, dof] = px - origin[k, 0]
        k = parent[k]


@nb.njit(cache=True)
def _mass_matrix_and_bias(q, qd, parent, joint_in_parent, com_local, mass, inertia,
                          gravity, theta, origin, com, M, h):
    nl = parent.shape[0]
    ndof = nl + 2
    _kinematics(q, parent, joint_in_parent, com_local, theta, origin, com)
    omega = np.empty(nl)
    a_org = np.zeros((nl, 2))
    omega[0] = qd[2]
    for l in range(1, nl):
        p = parent[l]
        omega[l] = omega[p] + qd[2 + l]
        w2 = omega[p] * omega[p]
        a_org[l, 0] = a_org[p, 0] - w2 * (origin[l, 0] - origin[p, 0])
        a_org[l, 1] = a_org[p, 1] - w2 * (origin[l, 1] - origin[p, 1])
    M[:, :] = 0.0
    h[:] = 0.0
    jac = np.zeros((2, ndof))
    jw = np.zeros(ndof)
    for l in range(nl):
        _point_jacobian(l, com[l, 0], com[l, 1], parent, origin, jac)
        jw[:] = 0.0
        k = l
        while k >= 0:
            jw[2 if k == 0 else 2 + k] = 1.0
            k = parent[k]
        w2 = omega[l] * omega[l]
        ax = a_org[l, 0] - w2 * (com[l, 0] - origin[l, 0]) - gravity[0]
        ay = a_org[l, 1] - w2 * (com[l, 1] - origin[l, 1]) - gravity[1]
        for i in range(ndof):
            h[i] += mass[l] * (jac[0, i] * ax + jac[1, i] * ay)
            for j in range(ndof):
                M[i, j] += mass[l] * (jac[0, i] * jac[0, j] + jac[1, i] * jac[1, j]) \
                    + inertia[l] * jw[i] * jw[j]


@nb.njit(cache=True)
def _articulated_substeps(q, qd, tau, parent, joint_in_parent, com_local, mass, inertia,
                          joint_lo, joint_hi, joint_damping, cp_link, cp_off, gravity,
                          dt, n_sub, ground, mu, beta, iters, impulses):
    nl = parent.shape[0]
    ndof = nl + 2
    nc = cp_link.shape[0]
    theta = np.empty(nl)
    origin = np.empty((nl, 2))
    com = np.empty((nl, 2))
    M = np.empty((ndof, ndof))
    h = np.empty(ndof)
    jac = np.zeros((2, ndof))
    max_rows = 2 * nc + 2 * (nl - 1)
    J = np.zeros((max_rows, ndof))
    W = np.zeros((max_rows, ndof))
    diag = np.zeros(max_rows)
    target = np.zeros(max_rows)
    lam = np.zeros(max_rows)
    kind = np.zeros(max_rows, dtype=np.int64)  # 0 unilateral, 1 friction (paired with row-1)
    cp_row = np.full(nc, -1)
    for _ in range(n_sub):
        _mass_matrix_and_bias(q, qd, parent, joint_in_parent, com_local, mass, inertia,
                              gravity, theta, origin, com, M, h)
        rhs = -h
        for l in range(1, nl):
            rhs[2 + l] += tau[l - 1] - joint_damping * qd[2 + l]
        Minv = np.linalg.inv(M)
        qd += dt * (Minv @ rhs)

        nrows = 0
        for c in range(nc):
            cp_row[c] = -1
            l = cp_link[c]
            cth = math.cos(theta[l])
            sth = math.sin(theta[l])
            px = origin[l, 0] + cth * cp_off[c, 0] - sth * cp_off[c, 1]
            py = origin[l, 1] + sth * cp_off[c, 0] + cth * cp_off[c, 1]
            gap = py - ground
            if gap > 0.05:
                continue
            _point_jacobian(l, px, py, parent, origin, jac)
            cp_row[c] = nrows
            J[nrows, :] = jac[1, :]
            target[nrows] = -gap / dt if gap > 0.0 else -beta * gap / dt
            kind[nrows] = 0
            J[nrows + 1, :] = jac[0, :]
            target[nrows + 1] = 0.0
            kind[nrows + 1] = 1
            nrows += 2
        for l in range(1, nl):
            dof = 2 + l
            lo_gap = q[dof] - joint_lo[l]
            if lo_gap < 0.05:
                J[nrows, :] = 0.0
                J[nrows, dof] = 1.0
                target[nrows] = -lo_gap / dt if lo_gap > 0.0 else -beta * lo_gap / dt
                kind[nrows] = 0
                nrows += 1
            hi_gap = joint_hi[l] - q[dof]
            if hi_gap < 0.05:
                J[nrows, :] = 0.0
                J[nrows, dof] = -1.0
                target[nrows] = -hi_gap / dt if hi_gap > 0.0 else -beta * hi_gap / dt
                kind[nrows] = 0
                nrows += 1
        for r in range(nrows):
            W[r, :] = Minv @ J[r, :]
            diag[r] = J[r, :] @ W[r, :]
            lam[r] = 0.0
        for _it in range(iters):
            for r in range(nrows):
                vr = J[r, :] @ qd
                old = lam[r]
                new = old + (target[r] - vr) / diag[r]
                if kind[r] == 0:
                    new = max(new, 0.0)
                else:
                    bound = mu * lam[r - 1]
                    new = min(max(new, -bound), bound)
                lam[r] = new
                qd += (new - old) * W[r, :]
        for i in range(ndof):
            q[i] += dt * qd[i]
            if not (math.isfinite(q[i]) and math.isfinite(qd[i])):
                return _NONFINITE
        # contact points travel on arcs, so the velocity solve alone can leave
        # penetration; project positions back out (velocities untouched)
        for _it in range(iters):
            _kinematics(q, parent, joint_in_parent, com_local, theta, origin, com)
            worst = 0.0
            for c in range(nc):
                l = cp_link[c]
                cth = math.cos(theta[l])
                sth = math.sin(theta[l])
                px = origin[l, 0] + cth * cp_off[c, 0] - sth * cp_off[c, 1]
                py = origin[l, 1] + sth * cp_off[c, 0] + cth * cp_off[c, 1]
                gap = py - ground
                if gap >= 0.0:
                    continue
                worst = min(worst, gap)
                _point_jacobian(l, px, py, parent, origin, jac)
                wn = Minv @ jac[1, :]
                q += (-gap / (jac[1, :] @ wn)) * wn
            if worst > -0.1 * CONTACT_TOLERANCE:
                break
        for c in range(nc):
            r = cp_row[c]
            if r >= 0:
                impulses[c, 0] = lam[r]
                impulses[c, 1] = lam[r + 1]
            else:
                impulses[c, 0] = 0.0
                impulses[c, 1] = 0.0
    return _OK


class ArticulatedWorld(World):
    """Floating-base planar tree of rigid links with torque-driven revolute joints.

    Generalized coordinates are ``[x, y, theta]`` of the base followed by one
    relative angle per joint (link order). Joint angles are measured relative
    to the parent; zero means aligned with the parent frame.
    """

    def __init__(self, config: WorldConfig, links: Sequence[LinkSpec],
                 q0=None, qd0=None, joint_damping: float = 0.0):
        if links[0].parent != -1:
            raise ValueError("link 0 must be the floating base")
        for i, link in enumerate(links[1:], start=1):
            if not 0 <= link.parent < i:
                raise ValueError(f"link {link.name} must come after its parent")
        self.config = config
        self.links = list(links)
        self.parent = np.array([l.parent for l in links], dtype=np.int64)
        self.joint_in_parent = np.array([l.joint_in_parent for l in links], dtype=float)
        self.com_local = np.array([l.com for l in links], dtype=float)
        self.masses = np.array([l.mass for l in links], dtype=float)
        self.inertias = np.array([l.inertia for l in links], dtype=float)
        if np.any(self.masses <= 0) or np.any(self.inertias <= 0):
            raise ValueError("link masses and inertias must be positive")
        self.torque_limits = np.array([l.torque_limit for l in links[1:]], dtype=float)
        self.joint_lo = np.array([l.joint_range[0] for l in links], dtype=float)
        self.joint_hi = np.array([l.joint_range[1] for l in links], dtype=float)
        self.joint_damping = float(joint_damping)
        cps = [(i, c) for i, link in enumerate(links) for c in link.contacts]
        self.cp_link = np.array([i for i, _ in cps], dtype=np.int64)
        self.cp_off = np.array([c for _, c in cps], dtype=float).reshape(-1, 2)
        self.impulses = np.zeros((len(cps), 2))
        ndof = len(links) + 2
        self.q = np.zeros(ndof) if q0 is None else np.array(q0, dtype=float)
        self.qd = np.zeros(ndof) if qd0 is None else np.array(qd0, dtype=float)
        if self.q.shape != (ndof,) or self.qd.shape != (ndof,):
            raise ValueError(f"generalized state must have {ndof} components")
        self.applied_torques = np.zeros(len(links) - 1)
        self.time = 0.0

    @property
    def n_actuators(self) -> int:
        return len(self.links) - 1

    @property
    def ndof(self) -> int:
        return len(self.links) + 2

    def step(self, applied_torques) -> None:
        tau = self._check_torques(applied_torques)
        tau = np.clip(tau, -self.torque_limits, self.torque_limits)
        cfg = self.config
        status = _articulated_substeps(
            self.q, self.qd, tau, self.parent, self.joint_in_parent, self.com_local,
            self.masses, self.inertias, self.joint_lo, self.joint_hi, self.joint_damping,
            self.cp_link, self.cp_off, np.asarray(cfg.gravity, dtype=float),
            cfg.dt / cfg.substeps, int(cfg.substeps), cfg.ground_height, cfg.friction,
            cfg.baumgarte, int(cfg.solver_iterations), self.impulses,
        )
        if status == _NONFINITE:
            raise NonFiniteState("non-finite state after integration")
        self.applied_torques = tau
        self.time += cfg.dt

    def kinematics(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Absolute link angles, joint origins and centres of mass."""
        nl = len(self.links)
        theta, origin, com = np.empty(nl), np.empty((nl, 2)), np.empty((nl, 2))
        _kinematics(self.q, self.parent, self.joint_in_parent, self.com_local, theta, origin, com)
        return theta, origin, com

    def point(self, link: int, local) -> np.ndarray:
        theta, origin, _ = self.kinematics()
        c, s = math.cos(theta[link]), math.sin(theta[link])
        lx, ly = local
        return origin[link] + np.array([c * lx - s * ly, s * lx + c * ly])

    def point_velocity(self, link: int, local) -> np.ndarray:
        theta, origin, _ = self.kinematics()
        p = self.point(link, local)
        jac = np.zeros((2, self.ndof))
        _point_jacobian(link, p[0], p[1], self.parent, origin, jac)
        return jac @ self.qd

    def mass_matrix(self) -> np.ndarray:
        nl, ndof = len(self.links), self.ndof
        M, h = np.empty((ndof, ndof)), np.empty(ndof)
        _mass_matrix_and_bias(self.q, self.qd, self.parent, self.joint_in_parent, self.com_local,
                              self.masses, self.inertias, np.asarray(self.config.gravity, dtype=float),
                              np.empty(nl), np.empty((nl, 2)), np.empty((nl, 2)), M, h)
        return M

    @property
    def bodies(self) -> list[RigidBodyState]:
        theta, origin, com = self.kinematics()
        omega = np.empty(len(self.links))
        out = []
        for l, link in enumerate(self.links):
            omega[l] = self.qd[2] if l == 0 else omega[link.parent] + self.qd[2 + l]
            out.append(RigidBodyState(
                com[l].copy(), float(theta[l]), self.point_velocity(l, link.com), float(omega[l]),
                link.mass, link.inertia,
            ))
        return out

    def contact_positions(self) -> np.ndarray:
        return np.array([self.point(l, off) for l, off in zip(self.cp_link, self.cp_off)]).reshape(-1, 2)

    @property
    def contacts(self) -> list[ContactState]:
        return self._contact_states(self.contact_positions(), self.impulses)

    def mechanical_energy(self) -> float:
        M = self.mass_matrix()
        _, _, com = self.kinematics()
        g = np.asarray(self.config.gravity, dtype=float)
        height = com.copy()
        height[:, 1] -= self.config.ground_height
        kinetic = 0.5 * self.qd @ M @ self.qd
        potential = -np.sum(self.masses * (height @ g))
        return float(kinetic + potential)


def step_world(world: World, applied_torques) -> World:
    """Return a copy of ``world`` advanced by one control step."""
    nxt = world.copy()
    nxt.step(applied_torques)
    return nxt


def mechanical_energy(world: World) -> float:
    """Kinetic + gravitational (ground datum) + spring potential energy."""
    return world.mechanical_energy()
