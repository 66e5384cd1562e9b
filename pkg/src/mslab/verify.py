"""Self-check suites: closed forms against the numerical oracle, and gradients against finite differences."""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable
from dataclasses import dataclass

import numpy as np

from . import analytic as an
from . import autodiff as ad
from . import gan
from .autodiff import ParamSet, Tensor
from .oracle import maximize_log_table
from .transforms import K, rotate_batch


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


# ---------------------------------------------------------------------------
# random finite distributions


def random_distribution(rng: np.random.Generator, max_atoms: int = 12, lattice: int = 3,
                        support=None) -> an.FiniteDistribution:
    """Random probabilities on distinct integer lattice points.

    Small lattices make rotated supports overlap often, which is where the
    closed forms are least trivial.
    """
    if support is None:
        n = int(rng.integers(1, max_atoms + 1))
        grid = np.array([(x, y) for x in range(-lattice, lattice + 1) for y in range(-lattice, lattice + 1)
                         if (x, y) != (0, 0)], dtype=np.float64)
        support = grid[rng.choice(len(grid), size=min(n, len(grid)), replace=False)]
    p = rng.dirichlet(np.ones(len(support)))
    return an.FiniteDistribution(support, p / p.sum())


def random_pair(rng: np.random.Generator, max_atoms: int = 12) -> tuple[an.FiniteDistribution, an.FiniteDistribution]:
    """``(P_g, P_d)`` with ``supp(P_g)`` inside ``supp(P_d)`` so the KL is finite."""
    P_d = random_distribution(rng, max_atoms)
    m = int(rng.integers(1, len(P_d) + 1))
    sub = P_d.support[rng.choice(len(P_d), size=m, replace=False)]
    return random_distribution(rng, support=sub), P_d


def builtin_distributions() -> dict[str, an.FiniteDistribution]:
    ring = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    return {
        "two_points": an.FiniteDistribution(np.array([[1.0, 0.0], [2.0, 0.0]]), np.array([0.5, 0.5])),
        "rotation_closed": an.FiniteDistribution(ring, np.full(4, 0.25)),
        "half_orbit": an.FiniteDistribution(ring[:2], np.array([0.5, 0.5])),
        "mixed": an.FiniteDistribution(
            np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 1.0], [-1.0, 2.0], [1.0, 1.0], [3.0, -1.0]]),
            np.array([0.25, 0.10, 0.20, 0.15, 0.18, 0.12])),
    }


def read_distribution(path) -> an.FiniteDistribution:
    """CSV of ``x,y,p`` lines (a header line is optional)."""
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or line[0].isalpha():
                continue
            rows.append([float(v) for v in line.split(",")])
    arr = np.array(rows)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{path}: expected x,y,p rows")
    return an.FiniteDistribution.from_atoms(arr[:, :2], arr[:, 2])


# ---------------------------------------------------------------------------
# closed forms vs oracle


def prop1_tv(P_d: an.FiniteDistribution) -> float:
    atoms, w = an.ss_weights(P_d)
    star = an.optimal_classifier_ss(P_d)
    rows, ok = star.rows(atoms)
    assert ok.all()
    return float(an.total_variation(maximize_log_table(w).table, rows).max())


def prop2_tv(P_d: an.FiniteDistribution, P_g: an.FiniteDistribution) -> float:
    atoms, w = an.ms_weights(P_d, P_g)
    star = an.optimal_classifier_ms(P_d, P_g)
    rows, ok = star.rows(atoms)
    assert ok.all()
    return float(an.total_variation(maximize_log_table(w).table, rows).max())


def brute_phi_ss(P_g: an.FiniteDistribution, P_d: an.FiniteDistribution) -> float:
    """Enumerate every (atom, rotation) pair and evaluate the data rotation posterior directly."""
    total = 0.0
    for x, p in zip(P_g.support, P_g.probs):
        for k in range(1, K + 1):
            y = rotate_batch(x[None, :], k)[0]
            # p_d^{T_j}(y) = P_d(T_j^{-1} y)
            mass = [sum(q for a, q in zip(P_d.support, P_d.probs)
                        if np.max(np.abs(rotate_batch(a[None, :], j)[0] - y)) <= an.ATOM_TOL)
                    for j in range(1, K + 1)]
            if mass[k - 1] == 0:
                return -math.inf
            total += p * math.log(mass[k - 1] / sum(mass))
    return total / K


def theorem2_identities(P_g: an.FiniteDistribution, P_d: an.FiniteDistribution) -> dict[str, float]:
    """Residuals of the minimax-value identities; all are zero up to round-off."""
    dec = an.phi_ms_value(P_g, P_d)
    kl = an.kl_divergence(P_g, P_d)
    c_ms = an.optimal_classifier_ms(P_d, P_g)
    direct = an.phi_ms_direct(P_g, c_ms)
    renorm = an.phi_ss_value(P_g, c_ms.renormalized()).value
    # E log(sum_k C_k / C_{K+1}) over the rotated generator
    ratio = 0.0
    for k in range(1, K + 1):
        rows, _ = c_ms.rows(rotate_batch(P_g.support, k))
        ratio += float(np.sum(P_g.probs * np.log(rows[:, :K].sum(axis=1) / rows[:, K])))
    ratio /= K
    return {
        "decomposition": abs(dec.total - (-dec.kl_term + dec.residual_term)),
        "per_k_kl": max(abs(v - kl) for v in dec.kl_per_k),
        "expansion": abs(direct - (renorm + ratio)),
        "mixture_form": abs(direct - (-an.mixture_kl(P_g, P_d) + dec.residual_term)),
        "bound_gap": max(0.0, dec.total - direct),
    }


def analyze_suite(extra: Iterable[an.FiniteDistribution] = (), n_random: int = 20, seed: int = 0,
                  tv_tol: float = 1e-3) -> list[Check]:
    rng = np.random.default_rng(seed)
    dists = list(builtin_distributions().values()) + list(extra)
    randoms = [random_distribution(rng) for _ in range(n_random)]
    checks = []

    tv1 = max(prop1_tv(P) for P in dists + randoms)
    checks.append(Check("prop1_closed_form_vs_oracle", tv1 <= tv_tol, f"max row TV {tv1:.2e}"))

    pairs = [(P, P) for P in dists] + [(an.FiniteDistribution.point_mass(P.support[0]), P) for P in dists]
    pairs += [random_pair(rng) for _ in range(n_random)]
    tv2 = max(prop2_tv(P_d, P_g) for P_g, P_d in pairs)
    checks.append(Check("prop2_closed_form_vs_oracle", tv2 <= tv_tol, f"max row TV {tv2:.2e}"))

    t1 = max(abs(an.phi_ss_value(P_g, an.optimal_classifier_ss(P_d)).value - brute_phi_ss(P_g, P_d))
             for P_g, P_d in pairs)
    upper = all(an.phi_ss_value(P_g, an.optimal_classifier_ss(P_d)).value <= 0 for P_g, P_d in pairs)
    checks.append(Check("theorem1_value", t1 <= 1e-12 and upper, f"max |closed - brute| {t1:.2e}"))

    worst = {}
    for P_g, P_d in pairs:
        for key, v in theorem2_identities(P_g, P_d).items():
            worst[key] = max(worst.get(key, 0.0), v)
    ok = all(v <= 1e-10 for v in worst.values())
    checks.append(Check("theorem2_decomposition", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items())))

    kl_gap = 0.0
    for P_g, P_d in pairs:
        base = an.kl_divergence(P_g, P_d)
        for k in range(1, K + 1):
            kl_gap = max(kl_gap, abs(an.kl_divergence(an.transformed_marginal(P_g, k),
                                                      an.transformed_marginal(P_d, k)) - base))
    checks.append(Check("kl_rotation_invariance", kl_gap == 0.0, f"max gap {kl_gap!r}"))

    lines = []
    ok = True
    for name, P in builtin_distributions().items():
        collapsed, cert = an.loophole_construct(P)
        if cert.found and not cert.degenerate:
            ok &= cert.holds and cert.ms_data > cert.ms_collapsed
            lines.append(f"{name}: ss {cert.phi_collapsed:.3g} vs {cert.phi_data:.3g}, kl {cert.kl:.3g}")
    checks.append(Check("loophole_certificate", ok, "; ".join(lines)))
    return checks


# ---------------------------------------------------------------------------
# gradient checks


GradCase = Callable[[np.random.Generator], tuple[ParamSet, Callable[[], Tensor]]]


def _leaf(rng, shape, low=0.2, high=1.0, signed=True) -> Tensor:
    # magnitudes bounded away from zero keep kinks (relu, abs) out of the FD stencil
    mag = rng.uniform(low, high, size=shape)
    if signed:
        mag *= rng.choice([-1.0, 1.0], size=shape)
    return Tensor(mag, requires_grad=True)


def _params(**tensors) -> ParamSet:
    return ParamSet(tensors)


def _unary(fn, signed=True, low=0.2, high=1.0):
    def case(rng):
        p = _params(x=_leaf(rng, (3, 4), low, high, signed))
        w = rng.standard_normal(fn(p["x"]).shape)
        return p, lambda: ad.sum_(ad.mul(fn(p["x"]), w))
    return case


def _binary(fn, shape_a=(3, 4), shape_b=(3, 4)):
    def case(rng):
        p = _params(a=_leaf(rng, shape_a), b=_leaf(rng, shape_b))
        out_shape = fn(p["a"], p["b"]).shape
        w = rng.standard_normal(out_shape)
        return p, lambda: ad.sum_(ad.mul(fn(p["a"], p["b"]), w))
    return case


def _index_case(fn):
    def case(rng):
        p = _params(x=_leaf(rng, (5, 4)))
        idx = rng.integers(0, 4, size=5)
        rows = rng.integers(0, 5, size=7)
        out_shape = fn(p["x"], idx, rows).shape
        w = rng.standard_normal(out_shape)
        return p, lambda: ad.sum_(ad.mul(fn(p["x"], idx, rows), w))
    return case


def _rotate_case(image: bool):
    def case(rng):
        shape = (4, 9) if image else (4, 2)
        p = _params(x=_leaf(rng, shape))
        ks = rng.integers(1, K + 1, size=4)
        w = rng.standard_normal(shape)
        return p, lambda: ad.sum_(ad.mul(gan.rotate_tensor(p["x"], ks, (3, 3) if image else None), w))
    return case


PRIMITIVE_CASES: dict[str, GradCase] = {
    "add": _binary(ad.add, (3, 4), (4,)),
    "sub": _binary(ad.sub, (3, 4), (3, 1)),
    "mul": _binary(ad.mul),
    "matmul": _binary(ad.matmul, (3, 4), (4, 2)),
    "linear": lambda rng: _linear_case(rng),
    "relu": _unary(ad.relu),
    "lrelu": _unary(ad.lrelu),
    "tanh": _unary(ad.tanh),
    "sigmoid": _unary(ad.sigmoid, high=3.0),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, signed=False, low=0.1, high=2.0),
    "abs": _unary(ad.abs_),
    "softmax": _unary(ad.softmax, high=2.0),
    "log_softmax": _unary(ad.log_softmax, high=2.0),
    "log_sigmoid": _unary(ad.log_sigmoid, high=3.0),
    "sum_axis": _unary(lambda x: ad.sum_(x, axis=1)),
    "mean": _unary(lambda x: ad.mean(x, axis=0)),
    "pick": _index_case(lambda x, idx, rows: ad.pick(x, idx)),
    "column": _index_case(lambda x, idx, rows: ad.column(x, 2)),
    "rows": _index_case(lambda x, idx, rows: ad.rows(x, 1, 4)),
    "concat": _binary(lambda a, b: ad.concat([a, b]), (2, 4), (3, 4)),
    "reshape": _unary(lambda x: ad.reshape(x, (4, 3))),
    "gather_rows": _index_case(lambda x, idx, rows: ad.gather_rows(x, rows)),
    "rotate_points": _rotate_case(False),
    "rotate_images": _rotate_case(True),
}


def _linear_case(rng):
    p = _params(x=_leaf(rng, (3, 4)), w=_leaf(rng, (4, 2)), b=_leaf(rng, (2,)))
    c = rng.standard_normal((3, 2))
    return p, lambda: ad.sum_(ad.mul(ad.linear(p["x"], p["w"], p["b"]), c))


def _kink_margin(G, D, z, real, ks, shape) -> float:
    """Smallest |preactivation| of any hidden unit over every input the losses see."""
    h = z @ G["W0"].data + G["b0"].data
    fake = gan.generate(G, z).data
    x = np.concatenate([real, fake, rotate_batch(real, ks, shape), rotate_batch(fake, ks, shape)])
    pre = x @ D["trunk.W0"].data + D["trunk.b0"].data
    return float(min(np.abs(h).min(), np.abs(pre).min()))


def _tiny_nets(rng, n_classes: int, image: bool = False, margin: float = 1e-3):
    """One-hidden-layer G and D whose units all sit at least ``margin`` away from the kink."""
    dim = 9 if image else 2
    shape = (3, 3) if image else None
    while True:
        seed = int(rng.integers(0, 2**31))
        G = gan.build_generator(3, 5, 1, dim, seed, "sigmoid" if image else "linear")
        D = gan.build_discriminator(dim, 5, 1, n_classes, seed + 1)
        # zero biases would park preactivations on the kink for all-zero inputs
        for name, t in list(G.items()) + list(D.items()):
            if ".b" in name or name.startswith("b"):
                t.data = rng.uniform(0.1, 0.5, size=t.shape) * rng.choice([-1.0, 1.0], size=t.shape)
        z = rng.uniform(0, 1, size=(6, 3))
        real = rng.uniform(0, 1, size=(6, dim)) + (0 if image else 1.0)
        ks = rng.integers(1, K + 1, size=6)
        if _kink_margin(G, D, z, real, ks, shape) > margin:
            return G, D, z, real, ks, shape


def _merged(*sets: ParamSet) -> ParamSet:
    out = ParamSet()
    for i, s in enumerate(sets):
        for k, t in s.items():
            out[f"{i}.{k}"] = t
    return out


def _loss_case(kind: str):
    def case(rng):
        n_classes = {"gan_d": 0, "gan_g": 0, "ss_psi": K, "ss_phi": K}.get(kind, K + 1)
        G, D, z, real, ks, shape = _tiny_nets(rng, n_classes, image=kind == "ss_phi")

        def fake():
            return gan.generate(G, z)

        def loss():
            if kind == "gan_d":
                out_r = gan.discriminate(D, real, "rf").rf_logit
                out_f = gan.discriminate(D, fake().data, "rf").rf_logit
                return gan.discriminator_gan_loss(out_r, out_f)
            if kind == "gan_g":
                return gan.generator_gan_loss(gan.discriminate(D, fake(), "rf").rf_logit)
            if kind == "ss_psi":
                return gan.ss_psi_loss(gan.discriminate(D, rotate_batch(real, ks, shape), "cls").class_logits, ks)
            if kind == "ss_phi":
                rot = gan.rotate_tensor(fake(), ks, shape)
                return gan.ss_phi_loss(gan.discriminate(D, rot, "cls").class_logits, ks)
            if kind == "ms_psi":
                cr = gan.discriminate(D, rotate_batch(real, ks, shape), "cls").class_logits
                cf = gan.discriminate(D, rotate_batch(fake().data, ks, shape), "cls").class_logits
                return gan.ms_psi_loss(cr, ks, cf)
            rot = gan.rotate_tensor(fake(), ks, shape)
            cf = gan.discriminate(D, rot, "cls").class_logits
            if kind == "ms_phi":
                return gan.ms_phi_loss(cf, ks)
            cr = gan.discriminate(D, rotate_batch(real, ks, shape), "cls").class_logits
            return gan.ms_matching_loss(gan.ms_stats(cf, ks), gan.ms_stats(cr, ks))

        # D-side losses differentiate D (G's output enters as data); G-side losses differentiate both
        return (D if kind in ("gan_d", "ss_psi", "ms_psi") else _merged(G, D)), loss
    return case


LOSS_CASES: dict[str, GradCase] = {
    "gan_value_d": _loss_case("gan_d"),
    "gan_value_g": _loss_case("gan_g"),
    "ss_psi": _loss_case("ss_psi"),
    "ss_phi": _loss_case("ss_phi"),
    "ms_psi": _loss_case("ms_psi"),
    "ms_phi": _loss_case("ms_phi"),
    "ms_matching": _loss_case("ms_matching"),
}


def gradcheck_suite(seeds: Iterable[int] = range(50), tolerance: float = 1e-4,
                    cases: dict[str, GradCase] | None = None) -> list[Check]:
    """One check per case: the worst relative error over all seeds."""
    cases = cases if cases is not None else {**PRIMITIVE_CASES, **LOSS_CASES}
    seeds = list(seeds)
    out = []
    for name, make in cases.items():
        worst, where = 0.0, None
        for s in seeds:
            params, loss_fn = make(np.random.default_rng([s, len(name)]))
            rep = ad.finite_difference_check(params, loss_fn, tolerance)
            if rep.max_rel_error >= worst:
                worst, where = rep.max_rel_error, s
        out.append(Check(name, worst < tolerance, f"max rel err {worst:.2e} (seed {where})"))
    return out
