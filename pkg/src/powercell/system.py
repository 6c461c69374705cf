"""Flat DOF state over sites and boundary parameters.

The state vector is ``y = (active site components, boundary parameters)``.
Site components are ordered site by site as (x, y, weight, area target);
only components flagged active in the site's DOF mask enter ``y``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .boundary import BoundaryModel
from .diagram import SITE_STRIDE, build_restricted_diagram
from .energy import EnergyModel, ThetaEvaluation

COMPONENTS = ("x", "y", "w", "area_target")


@dataclass
class Site:
    """A weighted generator with optional area-target DOF."""

    position: tuple
    weight: float = 0.0
    area_target: float = np.nan
    dof_mask: tuple = (True, True, False, False)
    mass: tuple = (0.0, 0.0, 0.0, 0.0)
    viscosity: tuple = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if not np.all(np.isfinite(self.position)) or not np.isfinite(self.weight):
            raise ValueError("site position and weight must be finite")


@dataclass
class Evaluation:
    value: float
    grad: np.ndarray | None
    hess: sp.csr_matrix | None
    theta: ThetaEvaluation | None = None


class SystemState:
    """Sites, boundary and energy with a cached evaluation at the current y.

    Args:
        params: (n, 4) array of site (x, y, weight, area target).
        dof_mask: (n, 4) boolean activity flags.
        boundary: boundary parameterization.
        energy: energy model.
        mass, viscosity: (n, 4) per-component coefficients.
        ids: persistent site identifiers (kept across topology events).
    """

    def __init__(self, params, dof_mask, boundary: BoundaryModel, energy: EnergyModel,
                 mass=None, viscosity=None, ids=None, p=None, brute_force=False):
        self.params = np.array(params, dtype=float).reshape(-1, SITE_STRIDE)
        n = len(self.params)
        self.dof_mask = np.broadcast_to(np.asarray(dof_mask, bool), (n, SITE_STRIDE)).copy()
        self.mass = np.zeros((n, SITE_STRIDE)) if mass is None else np.broadcast_to(mass, (n, SITE_STRIDE)).astype(float)
        self.viscosity = (
            np.zeros((n, SITE_STRIDE)) if viscosity is None else np.broadcast_to(viscosity, (n, SITE_STRIDE)).astype(float)
        )
        self.ids = np.arange(n) if ids is None else np.asarray(ids, dtype=int)
        self.boundary = boundary
        self.energy = energy
        self.p = boundary.initial() if p is None else np.asarray(p, dtype=float).copy()
        self.brute_force = brute_force
        self._cache = {}
        self._diagrams = {}

    @classmethod
    def from_sites(cls, sites, boundary, energy, **kw) -> "SystemState":
        params = [[s.position[0], s.position[1], s.weight, s.area_target] for s in sites]
        return cls(
            params,
            [s.dof_mask for s in sites],
            boundary,
            energy,
            mass=np.array([s.mass for s in sites], dtype=float).reshape(-1, SITE_STRIDE),
            viscosity=np.array([s.viscosity for s in sites], dtype=float).reshape(-1, SITE_STRIDE),
            **kw,
        )

    def copy(self) -> "SystemState":
        out = SystemState(self.params, self.dof_mask, self.boundary, self.energy, self.mass.copy(),
                          self.viscosity.copy(), self.ids.copy(), self.p, self.brute_force)
        return out

    # layout

    @property
    def n_sites(self) -> int:
        return len(self.params)

    @property
    def site_dofs(self) -> np.ndarray:
        """Flat indices into ``params.ravel()`` of the active site DOFs."""
        return np.flatnonzero(self.dof_mask.ravel())

    @property
    def n_dofs(self) -> int:
        return len(self.site_dofs) + self.boundary.n_p

    def layout(self) -> list:
        """(owner, component) for each entry of y; owner is a site id or 'boundary'."""
        out = [(int(self.ids[k // SITE_STRIDE]), COMPONENTS[k % SITE_STRIDE]) for k in self.site_dofs]
        out += [("boundary", j) for j in range(self.boundary.n_p)]
        return out

    @property
    def y(self) -> np.ndarray:
        return np.concatenate([self.params.ravel()[self.site_dofs], self.p])

    def set_y(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape != (self.n_dofs,):
            raise ValueError(f"expected {self.n_dofs} DOFs, got {y.shape}")
        flat = self.params.ravel()
        ns = len(self.site_dofs)
        flat[self.site_dofs] = y[:ns]
        self.params = flat.reshape(-1, SITE_STRIDE)
        self.p = y[ns:].copy()
        self._cache.clear()

    def mass_vector(self) -> np.ndarray:
        return np.concatenate([self.mass.ravel()[self.site_dofs], self.boundary.mass()])

    def viscosity_vector(self) -> np.ndarray:
        return np.concatenate([self.viscosity.ravel()[self.site_dofs], self.boundary.viscosity()])

    def params_at(self, y):
        flat = self.params.ravel().copy()
        ns = len(self.site_dofs)
        flat[self.site_dofs] = y[:ns]
        return flat.reshape(-1, SITE_STRIDE), np.asarray(y[ns:], dtype=float)

    # evaluation

    def diagram_at(self, y=None):
        params, p = (self.params, self.p) if y is None else self.params_at(y)
        key = (params.tobytes(), p.tobytes(), self.boundary.rest.tobytes())
        hit = self._diagrams.get(key)
        if hit is None:
            domain = self.boundary.domain_at(p)
            hit = build_restricted_diagram(params[:, :2], params[:, 2], domain, brute_force=self.brute_force)
            if len(self._diagrams) > 4:
                self._diagrams.clear()
            self._diagrams[key] = hit
        return hit, params, p

    def evaluate(self, y=None, order: int = 2) -> Evaluation:
        """Total energy E(y) = F(theta(y)) + F_B(p) and its derivatives in y."""
        y = self.y if y is None else np.asarray(y, dtype=float)
        key = (self.params.tobytes(), y.tobytes(), self.boundary.rest.tobytes(), order)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        diagram, params, p = self.diagram_at(y)
        theta = np.concatenate([params.ravel(), diagram.domain.vertices.ravel()])
        te = self.energy.evaluate(diagram, theta, order)
        fb, gb, hb = self.boundary.energy(p, order)
        value = te.value + fb
        grad = hess = None
        if order >= 1 and np.isfinite(value):
            T = self.theta_map(p)
            grad = T.T @ te.grad
            grad[len(self.site_dofs):] += gb
            if order >= 2:
                hess = (T.T @ te.hess @ T).tocsr()
                if self.boundary.n_p:
                    ns = len(self.site_dofs)
                    extra = self.boundary.curvature(p, te.grad[SITE_STRIDE * self.n_sites:]) + hb
                    pad = sp.block_diag([sp.csr_matrix((ns, ns)), sp.csr_matrix(extra)]).tocsr()
                    hess = (hess + pad).tocsr()
        ev = Evaluation(value, grad, hess, te)
        if len(self._cache) > 8:
            self._cache.clear()
        self._cache[key] = ev
        return ev

    def theta_map(self, p) -> sp.csr_matrix:
        """d theta / d y: DOF selection for sites, dv/dp for the boundary."""
        n_site_theta = SITE_STRIDE * self.n_sites
        sd = self.site_dofs
        sel = sp.csr_matrix((np.ones(len(sd)), (sd, np.arange(len(sd)))), shape=(n_site_theta, len(sd)))
        jv = self.boundary.jacobian(p)
        return sp.block_diag([sel, jv]).tocsr() if self.boundary.n_p else sp.vstack(
            [sel, sp.csr_matrix((jv.shape[0], len(sd)))]
        ).tocsr()

    # topology edits

    def replace_sites(self, keep, new_params=None, new_mask=None, new_mass=None, new_visc=None, new_ids=None):
        """Keep rows ``keep`` and append new sites; clears the cache."""
        keep = np.asarray(keep, dtype=int)
        parts = [self.params[keep]], [self.dof_mask[keep]], [self.mass[keep]], [self.viscosity[keep]], [self.ids[keep]]
        if new_params is not None and len(new_params):
            k = len(new_params)
            parts[0].append(np.asarray(new_params, float).reshape(k, SITE_STRIDE))
            parts[1].append(np.broadcast_to(new_mask, (k, SITE_STRIDE)))
            parts[2].append(np.broadcast_to(new_mass, (k, SITE_STRIDE)))
            parts[3].append(np.broadcast_to(new_visc, (k, SITE_STRIDE)))
            parts[4].append(np.asarray(new_ids, dtype=int))
        self.params = np.concatenate(parts[0]).astype(float)
        self.dof_mask = np.concatenate(parts[1]).astype(bool)
        self.mass = np.concatenate(parts[2]).astype(float)
        self.viscosity = np.concatenate(parts[3]).astype(float)
        self.ids = np.concatenate(parts[4]).astype(int)
        self._cache.clear()


def total_energy(state: SystemState) -> float:
    return state.evaluate(order=0).value


def gradient(state: SystemState) -> np.ndarray:
    return state.evaluate(order=1).grad


def hessian(state: SystemState) -> sp.csr_matrix:
    return state.evaluate(order=2).hess
