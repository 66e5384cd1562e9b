"""Exact computations on finite-support distributions.

Atoms are rows of a 2-D array: 2-D points, or square images flattened
row-major. Two atoms coincide when their L-infinity distance is at most
``ATOM_TOL``. The transform prior is uniform, ``p(T_k) = 1/K``.

Sign conventions: every ``phi_*`` value is a log-likelihood (<= 0, larger
is better for the generator); losses elsewhere are their negatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError
from .transforms import K, rotate_batch

ATOM_TOL = 1e-9
PROB_TOL = 1e-12


def _as_atoms(atoms) -> np.ndarray:
    atoms = np.asarray(atoms, dtype=np.float64)
    if atoms.ndim == 1:
        atoms = atoms[None, :]
    if atoms.ndim != 2:
        raise ContractError(f"atoms must be a 2-D array, got shape {atoms.shape}")
    return atoms


def match_atoms(query: np.ndarray, support: np.ndarray, tol: float = ATOM_TOL) -> np.ndarray:
    """Index into ``support`` of each query atom, or -1 when absent."""
    query, support = _as_atoms(query), _as_atoms(support)
    out = np.full(len(query), -1, dtype=np.int64)
    if len(support) == 0 or len(query) == 0:
        return out
    for start in range(0, len(query), 512):
        block = query[start:start + 512]
        dist = np.abs(block[:, None, :] - support[None, :, :]).max(axis=2)
        hit = dist <= tol
        found = hit.any(axis=1)
        out[start:start + 512][found] = hit[found].argmax(axis=1)
    return out


def merge_atoms(atoms, weights=None, tol: float = ATOM_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Collapse coincident atoms, summing their weights. First occurrence wins."""
    atoms = _as_atoms(atoms)
    weights = np.ones(len(atoms)) if weights is None else np.asarray(weights, dtype=np.float64)
    kept: list[int] = []
    totals: list[float] = []
    for i in range(len(atoms)):
        j = match_atoms(atoms[i:i + 1], atoms[kept], tol)[0] if kept else -1
        if j < 0:
            kept.append(i)
            totals.append(float(weights[i]))
        else:
            totals[j] += float(weights[i])
    return atoms[kept].copy(), np.array(totals)


@dataclass(frozen=True)
class FiniteDistribution:
    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        support = _as_atoms(self.support)
        probs = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        if len(support) != len(probs):
            raise ContractError("support and probs differ in length")
        if np.any(probs < 0):
            raise ContractError("probabilities must be non-negative")
        if abs(probs.sum() - 1.0) > PROB_TOL:
            raise ContractError(f"probabilities sum to {probs.sum()!r}, not 1")
        if len(merge_atoms(support)[0]) != len(support):
            raise ContractError("support atoms must be unique")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def from_atoms(cls, atoms, probs=None) -> "FiniteDistribution":
        """Build from possibly repeated atoms; repeats add their mass. Uniform when ``probs`` is None."""
        atoms = _as_atoms(atoms)
        w = np.ones(len(atoms)) if probs is None else np.asarray(probs, dtype=np.float64)
        merged, mass = merge_atoms(atoms, w)
        keep = mass > 0
        return cls(merged[keep], mass[keep] / mass[keep].sum())

    @classmethod
    def point_mass(cls, atom) -> "FiniteDistribution":
        return cls(_as_atoms(atom), np.ones(1))

    def __len__(self) -> int:
        return len(self.probs)

    def prob(self, atoms) -> np.ndarray:
        idx = match_atoms(atoms, self.support)
        return np.where(idx >= 0, self.probs[np.maximum(idx, 0)], 0.0)

    def same_as(self, other: "FiniteDistribution", tol: float = 1e-12) -> bool:
        if len(self) != len(other):
            return False
        return bool(np.all(np.abs(other.prob(self.support) - self.probs) <= tol))


@dataclass
class ClassifierTable:
    """Per-atom class probabilities: K rotation classes, optionally a fake class last."""

    atoms: np.ndarray
    table: np.ndarray

    def __post_init__(self):
        self.atoms = _as_atoms(self.atoms)
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.shape[0] != len(self.atoms):
            raise ContractError("one row per atom required")
        if np.any(self.table < 0) or np.any(np.abs(self.table.sum(axis=1) - 1) > 1e-12):
            raise ContractError("rows must be probability vectors")

    @property
    def n_classes(self) -> int:
        return self.table.shape[1]

    def rows(self, atoms) -> tuple[np.ndarray, np.ndarray]:
        """Rows for ``atoms`` plus a mask of which atoms the table covers."""
        idx = match_atoms(atoms, self.atoms)
        rows = np.where((idx >= 0)[:, None], self.table[np.maximum(idx, 0)], np.nan)
        return rows, idx >= 0

    def row(self, atom) -> np.ndarray:
        rows, ok = self.rows(atom)
        if not ok[0]:
            raise KeyError("atom not covered by the table")
        return rows[0]

    def renormalized(self) -> "ClassifierTable":
        """Drop the fake column and rescale the rotation columns to sum to 1."""
        head = self.table[:, :K]
        s = head.sum(axis=1, keepdims=True)
        keep = s[:, 0] > 0
        return ClassifierTable(self.atoms[keep], head[keep] / s[keep])


# ---------------------------------------------------------------------------
# pushforwards


def transformed_marginal(P: FiniteDistribution, k: int) -> FiniteDistribution:
    return FiniteDistribution(rotate_batch(P.support, k), P.probs.copy())


def mixture_over_transforms(P: FiniteDistribution) -> FiniteDistribution:
    atoms = np.concatenate([rotate_batch(P.support, k) for k in range(1, K + 1)])
    return FiniteDistribution.from_atoms(atoms, np.tile(P.probs, K) / K)


def orbit_support(*dists: FiniteDistribution) -> np.ndarray:
    """Union of the supports of all K pushforwards of every distribution."""
    atoms = np.concatenate([rotate_batch(P.support, k) for P in dists for k in range(1, K + 1)])
    return merge_atoms(atoms)[0]


def rotation_profile(P: FiniteDistribution, atoms) -> np.ndarray:
    """``out[i, k-1] = p^{T_k}(atoms[i])`` (probability of the atom under the k-th pushforward)."""
    atoms = _as_atoms(atoms)
    return np.stack([transformed_marginal(P, k).prob(atoms) for k in range(1, K + 1)], axis=1)


# ---------------------------------------------------------------------------
# optimal classifiers


def optimal_classifier_ss(P_d: FiniteDistribution) -> ClassifierTable:
    """Rotation posterior of the data: ``C*_k(x) = p_d^{T_k}(x) / sum_j p_d^{T_j}(x)``."""
    atoms = orbit_support(P_d)
    prof = rotation_profile(P_d, atoms)
    s = prof.sum(axis=1)
    keep = s > 0
    return ClassifierTable(atoms[keep], prof[keep] / s[keep, None])


def optimal_classifier_ms(P_d: FiniteDistribution, P_g: FiniteDistribution) -> ClassifierTable:
    """Optimal (K+1)-way classifier for the minimax task with generator ``P_g`` fixed.

    Solving the ratio relations with row normalization gives
    ``C*_k = p_d^{T_k} / (S_d + S_g)`` and ``C*_{K+1} = S_g / (S_d + S_g)``
    where ``S = sum_k p^{T_k}`` (K times the mixture density).
    """
    atoms = orbit_support(P_d, P_g)
    prof_d = rotation_profile(P_d, atoms)
    s_g = rotation_profile(P_g, atoms).sum(axis=1)
    total = prof_d.sum(axis=1) + s_g
    keep = total > 0
    table = np.concatenate([prof_d[keep], s_g[keep, None]], axis=1) / total[keep, None]
    return ClassifierTable(atoms[keep], table)


# ---------------------------------------------------------------------------
# value functions


@dataclass
class PhiValue:
    value: float
    uncovered: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))

    def __float__(self) -> float:
        return self.value


def _pushforward_terms(P_g: FiniteDistribution):
    for k in range(1, K + 1):
        yield k, rotate_batch(P_g.support, k), P_g.probs


def phi_ss_value(P_g: FiniteDistribution, C: ClassifierTable) -> PhiValue:
    """``(1/K) sum_k E_{x ~ P_g^{T_k}} log C_k(x)`` by exact summation.

    Atoms the table does not cover, or where ``C_k(x) = 0`` under positive
    mass, make the value ``-inf``; they are listed in ``uncovered``.
    """
    total = 0.0
    bad = []
    for k, atoms, p in _pushforward_terms(P_g):
        rows, ok = C.rows(atoms)
        live = p > 0
        ck = np.where(ok, rows[:, k - 1], 0.0)
        zero = live & (ck <= 0)
        if zero.any():
            bad.append(atoms[zero])
            continue
        total += float(np.sum(p[live] * np.log(ck[live])))
    if bad:
        return PhiValue(-math.inf, merge_atoms(np.concatenate(bad))[0])
    return PhiValue(total / K, np.empty((0, P_g.support.shape[1])))


def phi_ms_direct(P_g: FiniteDistribution, C: ClassifierTable) -> float:
    """Generator minimax value for an explicit (K+1)-way table.

    ``(1/K) sum_k E_{x ~ P_g^{T_k}} [log C_k(x) - log C_{K+1}(x)]``; the
    fake-class log enters with a minus sign, so a vanishing fake column
    gives ``+inf`` and a vanishing rotation column ``-inf``.
    """
    if C.n_classes != K + 1:
        raise ContractError("phi_ms_direct needs a K+1 column table")
    total = 0.0
    with np.errstate(divide="ignore"):
        for k, atoms, p in _pushforward_terms(P_g):
            rows, ok = C.rows(atoms)
            live = p > 0
            if np.any(live & ~ok):
                return -math.inf
            diff = np.log(rows[live, k - 1]) - np.log(rows[live, K])
            total += float(np.sum(p[live] * diff))
    return total / K


def kl_divergence(P: FiniteDistribution, Q: FiniteDistribution) -> float:
    """KL(P || Q) in nats, ``+inf`` when P has mass outside supp(Q)."""
    q = Q.prob(P.support)
    live = P.probs > 0
    if np.any(live & (q <= 0)):
        return math.inf
    return float(np.sum(P.probs[live] * np.log(P.probs[live] / q[live])))


@dataclass
class MSDecomposition:
    total: float
    kl_term: float
    residual_term: float
    kl_per_k: tuple[float, ...]


def phi_ms_value(P_g: FiniteDistribution, P_d: FiniteDistribution) -> MSDecomposition:
    """Closed-form generator value of the minimax task at the optimal classifier.

    ``total = -kl_term + residual_term`` with ``kl_term`` the rotation-averaged
    KL(P_g^{T_k} || P_d^{T_k}) and ``residual_term`` the SS value of P_g under
    the data's rotation posterior.

    This is the rotation-averaged form. It coincides with
    :func:`phi_ms_direct` evaluated at :func:`optimal_classifier_ms` when the
    generator's rotation posterior matches the data's on supp(P_g); otherwise
    it lower-bounds it (mixture KL <= averaged KL).
    """
    kls = tuple(kl_divergence(transformed_marginal(P_g, k), transformed_marginal(P_d, k))
                for k in range(1, K + 1))
    kl_term = sum(kls) / K
    residual = phi_ss_value(P_g, optimal_classifier_ss(P_d)).value
    if math.isinf(kl_term):
        return MSDecomposition(-math.inf, math.inf, residual, kls)
    return MSDecomposition(residual - kl_term, kl_term, residual, kls)


def mixture_kl(P_g: FiniteDistribution, P_d: FiniteDistribution) -> float:
    """KL(P_g^T || P_d^T) between the rotation mixtures."""
    return kl_divergence(mixture_over_transforms(P_g), mixture_over_transforms(P_d))


# ---------------------------------------------------------------------------
# the loophole


def disjoint_orbit_atoms(P_d: FiniteDistribution) -> np.ndarray:
    """Indices of support atoms none of whose nontrivial rotations lie in the support."""
    hits = np.zeros(len(P_d), dtype=bool)
    for k in range(2, K + 1):
        hits |= match_atoms(rotate_batch(P_d.support, k), P_d.support) >= 0
    return np.flatnonzero(~hits)


@dataclass
class LoopholeCertificate:
    found: bool
    atom: np.ndarray | None = None
    phi_collapsed: float = math.nan
    phi_data: float = math.nan
    kl: float = math.nan
    degenerate: bool = False
    ms_collapsed: float = math.nan
    ms_data: float = math.nan

    @property
    def holds(self) -> bool:
        """Collapsed generator wins the SS game while being a worse fit."""
        return (self.found and not self.degenerate and self.phi_collapsed >= self.phi_data
                and self.kl > 0)


def loophole_construct(P_d: FiniteDistribution) -> tuple[FiniteDistribution | None, LoopholeCertificate]:
    """Point-mass generator exploiting a rotation-disjoint atom, with its certificate.

    Picks the heaviest qualifying atom (first on ties).
    """
    cand = disjoint_orbit_atoms(P_d)
    if len(cand) == 0:
        return None, LoopholeCertificate(found=False)
    best = cand[np.argmax(P_d.probs[cand])]
    atom = P_d.support[best]
    collapsed = FiniteDistribution.point_mass(atom)
    c_star = optimal_classifier_ss(P_d)
    phi_c = phi_ss_value(collapsed, c_star).value
    phi_d = phi_ss_value(P_d, c_star).value
    kl = kl_divergence(collapsed, P_d)
    cert = LoopholeCertificate(
        found=True, atom=atom.copy(), phi_collapsed=phi_c, phi_data=phi_d, kl=kl,
        degenerate=kl == 0.0,
        ms_collapsed=phi_ms_value(collapsed, P_d).total,
        ms_data=phi_ms_value(P_d, P_d).total,
    )
    return collapsed, cert


# ---------------------------------------------------------------------------
# objective tables for the numerical oracle


def ss_weights(P_d: FiniteDistribution) -> tuple[np.ndarray, np.ndarray]:
    """Atoms and weights ``w[x, k] = p_d^{T_k}(x) / K`` so the SS discriminator value is
    ``sum w log C``."""
    atoms = orbit_support(P_d)
    return atoms, rotation_profile(P_d, atoms) / K


def ms_weights(P_d: FiniteDistribution, P_g: FiniteDistribution) -> tuple[np.ndarray, np.ndarray]:
    """As :func:`ss_weights` with a fake column ``p_g^T(x)`` appended."""
    atoms = orbit_support(P_d, P_g)
    w_d = rotation_profile(P_d, atoms) / K
    w_g = rotation_profile(P_g, atoms).sum(axis=1, keepdims=True) / K
    return atoms, np.concatenate([w_d, w_g], axis=1)


def table_value(weights: np.ndarray, table: np.ndarray) -> float:
    """``sum w log C`` with ``0 log 0 = 0``."""
    live = weights > 0
    with np.errstate(divide="ignore"):
        return float(np.sum(weights[live] * np.log(table[live])))


def total_variation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(a) - np.asarray(b)).sum(axis=-1)
