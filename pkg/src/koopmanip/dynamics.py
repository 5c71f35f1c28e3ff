"""Rigid-body dynamics of open serial chains with revolute joints.

Mass matrix via the composite-rigid-body algorithm, bias forces via
recursive Newton-Euler, both formulated in world coordinates and
vectorized over a leading batch axis so that many trajectories can be
integrated simultaneously.  State is exposed both explicitly (q, qdot)
and implicitly as (q, p) with generalized momentum p = M(q) qdot.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

_EX = np.array([1.0, 0.0, 0.0])
DIVERGENCE_LIMIT = 1e6


class ModelDefinitionError(ValueError):
    """The manipulator description is inconsistent (e.g. M(q) not SPD)."""


class DivergenceError(RuntimeError):
    """A simulated state left the sane numeric range."""


def _cross(u, v):
    """Cross product over the last axis; faster than np.cross for small stacks."""
    w = np.empty(np.broadcast_shapes(u.shape, v.shape))
    u0, u1, u2 = u[..., 0], u[..., 1], u[..., 2]
    v0, v1, v2 = v[..., 0], v[..., 1], v[..., 2]
    w[..., 0] = u1 * v2 - u2 * v1
    w[..., 1] = u2 * v0 - u0 * v2
    w[..., 2] = u0 * v1 - u1 * v0
    return w


def _axis_rotation(axis, angle):
    """Rodrigues rotation matrices about a fixed unit axis, batched over angle."""
    c = np.cos(angle)
    s = np.sin(angle)
    ax, ay, az = axis
    one_c = 1.0 - c
    R = np.empty(angle.shape + (3, 3))
    R[..., 0, 0] = c + ax * ax * one_c
    R[..., 0, 1] = ax * ay * one_c - az * s
    R[..., 0, 2] = ax * az * one_c + ay * s
    R[..., 1, 0] = ay * ax * one_c + az * s
    R[..., 1, 1] = c + ay * ay * one_c
    R[..., 1, 2] = ay * az * one_c - ax * s
    R[..., 2, 0] = az * ax * one_c - ay * s
    R[..., 2, 1] = az * ay * one_c + ax * s
    R[..., 2, 2] = c + az * az * one_c
    return R


def spd_solve(M, b):
    """Solve M x = b for symmetric positive definite M by Cholesky.

    Supports batched M of shape (..., n, n) with b of shape (..., n).
    Raises ModelDefinitionError when the factorization fails.
    """
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise ModelDefinitionError(f"mass matrix is not positive definite: {exc}") from exc
    n = M.shape[-1]
    y = np.empty_like(b)
    for i in range(n):
        acc = b[..., i]
        for j in range(i):
            acc = acc - L[..., i, j] * y[..., j]
        y[..., i] = acc / L[..., i, i]
    x = np.empty_like(b)
    for i in range(n - 1, -1, -1):
        acc = y[..., i]
        for j in range(i + 1, n):
            acc = acc - L[..., j, i] * x[..., j]
        x[..., i] = acc / L[..., i, i]
    return x


@dataclass(frozen=True)
class ManipulatorModel:
    """Kinematic and inertial description of an n-link revolute serial chain.

    Links extend along their local x axis.  ``topology`` selects the joint
    axis layout: 'planar' puts every axis along world z (chain moves in the
    x-y plane), 'spatial' puts joint 1 about the vertical z axis (yaw) and
    all later joints about the local y axis (pitch).  The spatial layout is
    a modeling assumption; it is recorded in saved model files.
    """

    masses: np.ndarray
    lengths: np.ndarray
    inertias: np.ndarray          # (n, 3, 3) about each link COM, link frame
    coms: np.ndarray              # distance of COM along the link axis
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    friction: np.ndarray | None = None
    topology: str = "spatial"

    def __post_init__(self):
        masses = np.asarray(self.masses, dtype=float)
        lengths = np.asarray(self.lengths, dtype=float)
        n = masses.shape[0]
        if n < 1:
            raise ModelDefinitionError("need at least one link")
        if lengths.shape != (n,):
            raise ModelDefinitionError("masses and lengths must have equal length")
        if np.any(masses <= 0) or np.any(lengths <= 0):
            raise ModelDefinitionError("masses and lengths must be strictly positive")
        inertias = np.asarray(self.inertias, dtype=float)
        if inertias.shape != (n, 3, 3):
            raise ModelDefinitionError("inertias must have shape (n, 3, 3)")
        coms = np.asarray(self.coms, dtype=float)
        friction = np.zeros(n) if self.friction is None else np.asarray(self.friction, dtype=float)
        if self.topology not in ("planar", "spatial"):
            raise ModelDefinitionError(f"unknown topology {self.topology!r}")
        axes = np.zeros((n, 3))
        if self.topology == "planar":
            axes[:, 2] = 1.0
        else:
            axes[0, 2] = 1.0
            axes[1:, 1] = 1.0
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "inertias", inertias)
        object.__setattr__(self, "coms", coms)
        object.__setattr__(self, "gravity", np.asarray(self.gravity, dtype=float))
        object.__setattr__(self, "friction", friction)
        object.__setattr__(self, "_axes", axes)

    @property
    def n(self) -> int:
        return self.masses.shape[0]

    @property
    def reach(self) -> float:
        return float(np.sum(self.lengths))

    @classmethod
    def chain(cls, n=None, mass=1.0, length=1.0, com=None, inertia_diag=None,
              gravity=(0.0, 0.0, -9.81), friction=None, topology="spatial"):
        """Build a chain from per-link scalars or arrays.

        Defaults model uniform thin rods: COM at mid-link, inertia
        diag[0, m l^2/12, m l^2/12] about the COM.  Pass ``com=length`` and
        ``inertia_diag=0`` for point masses at the link tips.
        """
        masses = np.broadcast_to(np.asarray(mass, dtype=float), (n,)).copy()
        lengths = np.broadcast_to(np.asarray(length, dtype=float), (n,)).copy()
        if com is None:
            coms = lengths / 2.0
        else:
            coms = np.broadcast_to(np.asarray(com, dtype=float), (n,)).copy()
        if inertia_diag is None:
            rod = masses * lengths**2 / 12.0
            diag = np.stack([np.zeros(n), rod, rod], axis=1)
        else:
            diag = np.broadcast_to(np.asarray(inertia_diag, dtype=float), (n, 3)).copy()
        inertias = np.zeros((n, 3, 3))
        inertias[:, 0, 0] = diag[:, 0]
        inertias[:, 1, 1] = diag[:, 1]
        inertias[:, 2, 2] = diag[:, 2]
        return cls(masses=masses, lengths=lengths, inertias=inertias, coms=coms,
                   gravity=np.asarray(gravity, dtype=float), friction=friction,
                   topology=topology)

    def to_dict(self) -> dict:
        links = []
        for i in range(self.n):
            links.append({
                "mass": float(self.masses[i]),
                "length": float(self.lengths[i]),
                "inertia_diag": [float(self.inertias[i, k, k]) for k in range(3)],
                "com": float(self.coms[i]),
            })
        return {
            "n": self.n,
            "links": links,
            "gravity": [float(g) for g in self.gravity],
            "friction": [float(b) for b in self.friction],
            "topology": self.topology,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ManipulatorModel":
        links = doc["links"]
        n = int(doc.get("n", len(links)))
        if n != len(links):
            raise ModelDefinitionError(f"n={n} but {len(links)} links given")
        masses = np.array([lk["mass"] for lk in links], dtype=float)
        lengths = np.array([lk["length"] for lk in links], dtype=float)
        coms = np.array([lk.get("com", lk["length"] / 2.0) for lk in links], dtype=float)
        inertias = np.zeros((n, 3, 3))
        for i, lk in enumerate(links):
            d = lk.get("inertia_diag")
            if d is None:
                rod = masses[i] * lengths[i] ** 2 / 12.0
                d = [0.0, rod, rod]
            inertias[i] = np.diag(np.asarray(d, dtype=float))
        return cls(masses=masses, lengths=lengths, inertias=inertias, coms=coms,
                   gravity=np.asarray(doc.get("gravity", [0.0, 0.0, -9.81]), dtype=float),
                   friction=np.asarray(doc["friction"], dtype=float) if "friction" in doc else None,
                   topology=doc.get("topology", "spatial"))

    @classmethod
    def from_json(cls, path) -> "ManipulatorModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass
class MomentumState:
    """Implicit manipulator state: positions q and generalized momentum p."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        if self.q.shape != self.p.shape:
            raise ValueError("q and p must have equal shapes")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.p])

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "MomentumState":
        x = np.asarray(x, dtype=float)
        n = x.shape[0] // 2
        return cls(q=x[:n], p=x[n:])


@dataclass(frozen=True)
class DisturbanceSpec:
    """External joint-torque disturbance acting inside [t_on, t_off).

    kind 'actuator_fault' scales the commanded torque (tau_d = gain * u),
    'constant_torque' adds a fixed joint torque vector, 'ee_load' maps a
    constant tip force through the transposed Jacobian.
    """

    kind: str = "none"
    gain: float = 0.0
    torque: np.ndarray | None = None
    force: np.ndarray | None = None
    t_on: float = 0.0
    t_off: float = math.inf

    def __post_init__(self):
        if self.kind not in ("none", "actuator_fault", "constant_torque", "ee_load"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        if self.kind == "constant_torque" and self.torque is None:
            raise ValueError("constant_torque needs a torque vector")
        if self.kind == "ee_load" and self.force is None:
            raise ValueError("ee_load needs a force vector")
        if self.torque is not None:
            object.__setattr__(self, "torque", np.asarray(self.torque, dtype=float))
        if self.force is not None:
            object.__setattr__(self, "force", np.asarray(self.force, dtype=float))

    def active(self, t: float) -> bool:
        return self.kind != "none" and self.t_on <= t < self.t_off

    def joint_torque(self, model: ManipulatorModel, q, u, t: float):
        """Disturbance torque tau_d at time t, batched like q."""
        q = np.asarray(q, dtype=float)
        if not self.active(t):
            return np.zeros(q.shape)
        if self.kind == "actuator_fault":
            return self.gain * np.asarray(u, dtype=float)
        if self.kind == "constant_torque":
            return np.broadcast_to(self.torque, q.shape).copy()
        J = ee_jacobian(model, q)
        return np.einsum("...ji,j->...i", J, self.force)

    def to_dict(self) -> dict:
        doc = {"kind": self.kind, "t_on": self.t_on,
               "t_off": None if math.isinf(self.t_off) else self.t_off}
        if self.kind == "actuator_fault":
            doc["gain"] = self.gain
        if self.torque is not None:
            doc["torque"] = [float(v) for v in self.torque]
        if self.force is not None:
            doc["force"] = [float(v) for v in self.force]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "DisturbanceSpec":
        t_off = doc.get("t_off")
        return cls(kind=doc.get("kind", "none"), gain=doc.get("gain", 0.0),
                   torque=doc.get("torque"), force=doc.get("force"),
                   t_on=doc.get("t_on", 0.0),
                   t_off=math.inf if t_off is None else float(t_off))


def _check_q(model, q, name="q"):
    q = np.asarray(q, dtype=float)
    if q.shape[-1] != model.n:
        raise ValueError(f"{name} has dimension {q.shape[-1]}, expected {model.n}")
    if not np.all(np.isfinite(q)):
        raise ValueError(f"{name} contains non-finite entries")
    return q


def _fk_arrays(model: ManipulatorModel, q):
    """World-frame link rotations, joint origins, COM offsets and joint axes.

    q has shape (..., n).  Returns lists of per-link arrays, each shaped
    like q's batch with a trailing (3,) or (3, 3).
    """
    n = model.n
    batch = q.shape[:-1]
    R_prev = np.broadcast_to(np.eye(3), batch + (3, 3))
    origin = np.zeros(batch + (3,))
    Rs, origins, axes_w, dvecs, rvecs = [], [], [], [], []
    for i in range(n):
        a = model._axes[i]
        s = R_prev @ a                      # world joint axis
        R = R_prev @ _axis_rotation(a, q[..., i])
        d = R @ (_EX * model.lengths[i])    # joint i -> joint i+1
        r = R @ (_EX * model.coms[i])       # joint i -> link COM
        Rs.append(R)
        origins.append(origin)
        axes_w.append(s)
        dvecs.append(d)
        rvecs.append(r)
        origin = origin + d
        R_prev = R
    return Rs, origins, axes_w, dvecs, rvecs, origin


def ee_position(model: ManipulatorModel, q) -> np.ndarray:
    """World position of the chain tip, shape (..., 3)."""
    q = _check_q(model, q)
    return _fk_arrays(model, q)[5]


def link_com_positions(model: ManipulatorModel, q) -> np.ndarray:
    """World positions of every link COM, shape (..., n, 3)."""
    q = _check_q(model, q)
    Rs, origins, _, _, rvecs, _ = _fk_arrays(model, q)
    return np.stack([origins[i] + rvecs[i] for i in range(model.n)], axis=-2)


def link_rotations(model: ManipulatorModel, q) -> np.ndarray:
    """World rotation matrices of every link frame, shape (..., n, 3, 3)."""
    q = _check_q(model, q)
    Rs = _fk_arrays(model, q)[0]
    return np.stack(Rs, axis=-3)


def ee_jacobian(model: ManipulatorModel, q) -> np.ndarray:
    """Position Jacobian of the tip, shape (..., 3, n)."""
    q = _check_q(model, q)
    _, origins, axes_w, _, _, tip = _fk_arrays(model, q)
    cols = [_cross(axes_w[i], tip - origins[i]) for i in range(model.n)]
    return np.stack(cols, axis=-1)


def mass_matrix(model: ManipulatorModel, q) -> np.ndarray:
    """Joint-space mass matrix M(q) by the composite-rigid-body algorithm."""
    q = _check_q(model, q)
    n = model.n
    batch = q.shape[:-1]
    Rs, origins, axes_w, dvecs, rvecs, _ = _fk_arrays(model, q)
    Iw = [Rs[i] @ model.inertias[i] @ np.swapaxes(Rs[i], -1, -2) for i in range(n)]
    coms = [origins[i] + rvecs[i] for i in range(n)]

    def shift(I_com, m, d):
        dd = np.einsum("...i,...i->...", d, d)
        outer = d[..., :, None] * d[..., None, :]
        return I_com + m * (dd[..., None, None] * np.eye(3) - outer)

    M = np.zeros(batch + (n, n))
    mc = model.masses[n - 1]
    comc = coms[n - 1]
    Ic = Iw[n - 1]
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            m_new = model.masses[i] + mc
            com_new = (model.masses[i] * coms[i] + mc * comc) / m_new
            Ic = (shift(Iw[i], model.masses[i], coms[i] - com_new)
                  + shift(Ic, mc, comc - com_new))
            mc, comc = m_new, com_new
        s = axes_w[i]
        a_com = _cross(s, comc - origins[i])
        F = mc * a_com
        N = np.einsum("...ij,...j->...i", Ic, s)
        for j in range(i + 1):
            mom = N + _cross(comc - origins[j], F)
            Mij = np.einsum("...i,...i->...", axes_w[j], mom)
            M[..., j, i] = Mij
            M[..., i, j] = Mij
    return M


def rnea(model: ManipulatorModel, q, qd, qdd, with_gravity=True) -> np.ndarray:
    """Inverse dynamics: joint torques for the motion (q, qd, qdd).

    Gravity is folded in as a fictitious base acceleration, so the result
    is M(q) qdd + C(q, qd) qd + G(q) without friction.
    """
    q = _check_q(model, q)
    qd = np.asarray(qd, dtype=float)
    qdd = np.asarray(qdd, dtype=float)
    n = model.n
    batch = q.shape[:-1]
    Rs, origins, axes_w, dvecs, rvecs, _ = _fk_arrays(model, q)

    omega = np.zeros(batch + (3,))
    alpha = np.zeros(batch + (3,))
    a_o = np.broadcast_to(-model.gravity if with_gravity else np.zeros(3),
                          batch + (3,)).copy()
    F, N, omegas, alphas = [], [], [], []
    for i in range(n):
        s = axes_w[i]
        qdi = qd[..., i, None]
        omega_new = omega + s * qdi
        alpha = alpha + s * qdd[..., i, None] + _cross(omega, s) * qdi
        omega = omega_new
        r, d = rvecs[i], dvecs[i]
        a_c = a_o + _cross(alpha, r) + _cross(omega, _cross(omega, r))
        a_o = a_o + _cross(alpha, d) + _cross(omega, _cross(omega, d))
        Iw = Rs[i] @ model.inertias[i] @ np.swapaxes(Rs[i], -1, -2)
        Iww = np.einsum("...ij,...j->...i", Iw, omega)
        F.append(model.masses[i] * a_c)
        N.append(np.einsum("...ij,...j->...i", Iw, alpha) + _cross(omega, Iww))

    tau = np.zeros(batch + (n,))
    f_child = np.zeros(batch + (3,))
    n_child = np.zeros(batch + (3,))
    for i in range(n - 1, -1, -1):
        mom = N[i] + _cross(rvecs[i], F[i]) + n_child + _cross(dvecs[i], f_child)
        f_child = F[i] + f_child
        n_child = mom
        tau[..., i] = np.einsum("...i,...i->...", axes_w[i], mom)
    return tau


def dynamics_terms(model: ManipulatorModel, q, qd):
    """Return (M, C qd, G) of the manipulator equation at (q, qd).

    M is validated symmetric positive definite by Cholesky.
    """
    q = _check_q(model, q)
    qd = _check_q(model, qd, "qd")
    M = mass_matrix(model, q)
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise ModelDefinitionError(f"M(q) not positive definite: {exc}") from exc
    G = rnea(model, q, np.zeros_like(qd), np.zeros_like(qd), with_gravity=True)
    bias = rnea(model, q, qd, np.zeros_like(qd), with_gravity=True)
    return M, bias - G, G


def gravity_torque(model: ManipulatorModel, q) -> np.ndarray:
    """G(q): joint torques that statically balance gravity."""
    q = _check_q(model, q)
    z = np.zeros_like(q)
    return rnea(model, q, z, z, with_gravity=True)


def forward_dynamics(model: ManipulatorModel, q, qd, tau,
                     dist: DisturbanceSpec | None = None, t: float = 0.0) -> np.ndarray:
    """Joint accelerations under commanded torque tau and disturbance.

    qdd = M(q)^-1 (tau + tau_d - C qd - G - friction), Cholesky solve.
    """
    q = _check_q(model, q)
    qd = np.asarray(qd, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if tau.shape[-1] != model.n:
        raise ValueError(f"tau has dimension {tau.shape[-1]}, expected {model.n}")
    M = mass_matrix(model, q)
    bias = rnea(model, q, qd, np.zeros_like(qd), with_gravity=True)
    rhs = tau - bias - model.friction * qd
    if dist is not None and dist.active(t):
        rhs = rhs + dist.joint_torque(model, q, tau, t)
    return spd_solve(M, rhs)


def kinetic_energy(model: ManipulatorModel, q, qd) -> np.ndarray:
    """Total kinetic energy from link COM velocities and angular rates."""
    q = _check_q(model, q)
    qd = np.asarray(qd, dtype=float)
    n = model.n
    batch = q.shape[:-1]
    Rs, origins, axes_w, dvecs, rvecs, _ = _fk_arrays(model, q)
    omega = np.zeros(batch + (3,))
    v_o = np.zeros(batch + (3,))
    T = np.zeros(batch)
    for i in range(n):
        omega = omega + axes_w[i] * qd[..., i, None]
        v_c = v_o + _cross(omega, rvecs[i])
        v_o = v_o + _cross(omega, dvecs[i])
        Iw = Rs[i] @ model.inertias[i] @ np.swapaxes(Rs[i], -1, -2)
        T = T + 0.5 * model.masses[i] * np.einsum("...i,...i->...", v_c, v_c)
        T = T + 0.5 * np.einsum("...i,...ij,...j->...", omega, Iw, omega)
    return T


def potential_energy(model: ManipulatorModel, q) -> np.ndarray:
    """Gravitational potential energy, zero at the base."""
    coms = link_com_positions(model, q)
    return -np.einsum("...ni,i,n->...", coms, model.gravity, model.masses)


def momentum_state(model: ManipulatorModel, q, qd) -> MomentumState:
    """Implicit state (q, p) with p = M(q) qd."""
    q = _check_q(model, q)
    qd = _check_q(model, qd, "qd")
    p = np.einsum("...ij,...j->...i", mass_matrix(model, q), qd)
    return MomentumState(q=q, p=p)


def velocity_from_momentum(model: ManipulatorModel, state: MomentumState) -> np.ndarray:
    """Recover qd from (q, p) by a Cholesky solve with M(q)."""
    return spd_solve(mass_matrix(model, state.q), state.p)


def momentum_from_velocity(model: ManipulatorModel, q, qd) -> np.ndarray:
    return np.einsum("...ij,...j->...i", mass_matrix(model, q), qd)


def rk4_step(model: ManipulatorModel, q, qd, tau, dt: float,
             dist: DisturbanceSpec | None = None, t: float = 0.0):
    """One classical Runge-Kutta step on (q, qd) with zero-order-hold tau."""

    def f(ti, qi, qdi):
        return qdi, forward_dynamics(model, qi, qdi, tau, dist, ti)

    k1q, k1v = f(t, q, qd)
    k2q, k2v = f(t + dt / 2, q + dt / 2 * k1q, qd + dt / 2 * k1v)
    k3q, k3v = f(t + dt / 2, q + dt / 2 * k2q, qd + dt / 2 * k2v)
    k4q, k4v = f(t + dt, q + dt * k3q, qd + dt * k3v)
    q_new = q + dt / 6 * (k1q + 2 * k2q + 2 * k3q + k4q)
    qd_new = qd + dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return q_new, qd_new


def step(model: ManipulatorModel, state: MomentumState, tau,
         dist: DisturbanceSpec | None = None, dt: float = 0.01,
         t: float = 0.0) -> MomentumState:
    """Advance the implicit state one RK4 step of size dt.

    Integrates on (q, qd) and re-derives the momentum at the new
    configuration.  Deterministic; raises DivergenceError when the state
    leaves the sane range.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    qd = velocity_from_momentum(model, state)
    q_new, qd_new = rk4_step(model, state.q, qd, np.asarray(tau, dtype=float),
                             dt, dist, t)
    if (not np.all(np.isfinite(q_new)) or not np.all(np.isfinite(qd_new))
            or np.any(np.abs(q_new) > DIVERGENCE_LIMIT)
            or np.any(np.abs(qd_new) > DIVERGENCE_LIMIT)):
        raise DivergenceError(f"state diverged at t={t:.6g}")
    return momentum_state(model, q_new, qd_new)
