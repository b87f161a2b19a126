"""Transferability bound diagnostics.

The machinery audits how far target-ensemble risk at an adversarial
example can exceed its surrogate risk.  Risk is always the bounded loss
(1 - probability of the attacked class), so every quantity lives in
[0, 1] and the variational estimators below are well defined.

The discrepancy between surrogate and target is measured only over a
candidate set of perturbed inputs whose surrogate risk stays below a
threshold r (the localized low-loss region the attack actually explores);
growing r can only grow the estimate.  Three divergences are supported:

  tv    sup over candidates of |target mean - surrogate mean|
  kl    sup over candidates and a t-grid of t*E_T - log E_S exp(t*loss)
  chi2  sup over candidates of (mean gap)^2 / Var_S, the closed-form
        optimum of t*gap - t^2/4 * Var_S

The mean-removed generator k_s(t) controls which coefficient pairs
(c1, c2) make the localized bound valid: the condition is
k_s(c1) <= c1 * c2 * E_S[loss].  For kl a data-free sufficient threshold
is (e^{c1} - 1 - c1)/c1; for chi2 it is (c1/4) * Var/E; tv needs only
0 < c1 <= 1.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import models as M
from .forge import SurrogateEnsemble

log = logging.getLogger(__name__)

PHIS = ("tv", "kl", "chi2")

VAR_FLOOR = 1e-12

BOUND_COLUMNS = "phi,r,c1,c2,sharpness,d_hat,k_s,eps_pac,assembled,realized_target_risk"


class InfeasibleError(ValueError):
    """The requested (c1, c2) pair violates the bound's validity condition."""


# ---------------------------------------------------------------------------
# loss profiles
# ---------------------------------------------------------------------------


@dataclass
class LossProfile:
    """Bounded losses of one input across an ensemble (and optional targets)."""

    losses_by_component: list
    target_losses: Optional[np.ndarray] = None

    @property
    def component_means(self) -> np.ndarray:
        return np.array([float(np.mean(c)) for c in self.losses_by_component])

    @property
    def all_losses(self) -> np.ndarray:
        return np.concatenate(self.losses_by_component)

    @property
    def surrogate_risk(self) -> float:
        # equal weight per component
        return float(np.mean(self.component_means))


def profile(x_hat: np.ndarray, ensemble: SurrogateEnsemble, label: int,
            target_models: Optional[Sequence[M.Weights]] = None) -> LossProfile:
    kind = M.bounded_error(label)
    comps = [np.array([M.loss(w, x_hat, kind) for w in comp])
             for comp in ensemble.components]
    target = None
    if target_models is not None:
        target = np.array([M.loss(w, x_hat, kind) for w in target_models])
    return LossProfile(comps, target)


def _loss_matrix(models: Sequence[M.Weights], points: np.ndarray,
                 kind: M.LossKind) -> np.ndarray:
    """(num models, num points) bounded-loss matrix via batched forwards."""
    return np.stack([M.loss_from_logits(M.forward(w, points), kind)
                     for w in models])


# ---------------------------------------------------------------------------
# candidate sets
# ---------------------------------------------------------------------------


@dataclass
class CandidateSetXr:
    """Perturbed inputs with surrogate risk at most r (within the budget)."""

    r: float
    candidates: list

    @classmethod
    def build(cls, pool: Sequence[np.ndarray], ensemble: SurrogateEnsemble,
              label: int, r: float, x: Optional[np.ndarray] = None,
              gamma: Optional[float] = None) -> "CandidateSetXr":
        kind = M.bounded_error(label)
        members = list(ensemble.all_members())
        kept = []
        for cand in pool:
            if x is not None and gamma is not None:
                if np.max(np.abs(cand - x)) > gamma + 1e-12:
                    continue
            risk = float(np.mean([M.loss(w, cand, kind) for w in members]))
            if risk <= r:
                kept.append(np.asarray(cand, dtype=np.float64))
        return cls(r=r, candidates=kept)


def candidate_losses(candidates: Sequence[np.ndarray],
                     ensemble: SurrogateEnsemble,
                     target_models: Sequence[M.Weights],
                     label: int):
    """Per-candidate surrogate and target bounded-loss vectors."""
    if len(target_models) == 0:
        raise ValueError("target model set must be nonempty")
    kind = M.bounded_error(label)
    if len(candidates) == 0:
        return [], []
    pts = np.stack(candidates)
    s_mat = _loss_matrix(list(ensemble.all_members()), pts, kind)
    t_mat = _loss_matrix(list(target_models), pts, kind)
    return [s_mat[:, c] for c in range(pts.shape[0])], \
           [t_mat[:, c] for c in range(pts.shape[0])]


# ---------------------------------------------------------------------------
# divergence estimators
# ---------------------------------------------------------------------------


def default_t_grid(lo: float = 1e-3, hi: float = 50.0,
                   points_per_sign: int = 1000) -> np.ndarray:
    """Symmetric log-spaced grid through zero (2 * points_per_sign + 1)."""
    mags = np.logspace(math.log10(lo), math.log10(hi), points_per_sign)
    return np.concatenate([-mags[::-1], [0.0], mags])


def _check_grid(t_grid: np.ndarray) -> np.ndarray:
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.ndim != 1 or t_grid.size == 0:
        raise ValueError("t grid must be a nonempty vector")
    if not np.any(t_grid == 0.0):
        raise ValueError("t grid must contain 0")
    return t_grid


def _smean(values: np.ndarray) -> float:
    """Mean over sorted samples: invariant under permutation of the input,
    so profiles that agree as multisets produce exactly equal means."""
    return float(np.mean(np.sort(np.asarray(values, dtype=np.float64))))


def d_tv(s_losses: Sequence[np.ndarray], t_losses: Sequence[np.ndarray]) -> float:
    """Exact total-variation discrepancy: sup of |mean gap| over candidates."""
    _check_pairs(s_losses, t_losses)
    if len(s_losses) == 0:
        return 0.0
    return max(abs(_smean(t) - _smean(s)) for s, t in zip(s_losses, t_losses))


def d_kl(s_losses: Sequence[np.ndarray], t_losses: Sequence[np.ndarray],
         t_grid: Optional[np.ndarray] = None) -> float:
    """Grid supremum of t * E_T[loss] - log E_S[exp(t * loss)].

    Nonnegative because the grid contains t = 0.
    """
    _check_pairs(s_losses, t_losses)
    t_grid = _check_grid(default_t_grid() if t_grid is None else t_grid)
    if len(s_losses) == 0:
        return 0.0
    best = 0.0
    for s, t in zip(s_losses, t_losses):
        gen = np.log(np.mean(np.exp(np.outer(t_grid, s)), axis=1))
        vals = t_grid * _smean(t) - gen
        best = max(best, float(vals.max()))
    return best


def d_chi2(s_losses: Sequence[np.ndarray], t_losses: Sequence[np.ndarray]) -> float:
    """Closed-form chi-square discrepancy: sup of gap^2 / Var_S.

    Degenerate surrogate spread (variance below 1e-12) with a nonzero mean
    gap yields +inf; with a zero gap the candidate contributes 0.
    """
    _check_pairs(s_losses, t_losses)
    best = 0.0
    for s, t in zip(s_losses, t_losses):
        delta = _smean(t) - _smean(s)
        var = float(np.var(s))
        if var < VAR_FLOOR:
            if delta != 0.0:
                return math.inf
            continue
        best = max(best, delta * delta / var)
    return best


def d_phi_grid(phi: str, s_losses, t_losses,
               t_grid: Optional[np.ndarray] = None) -> float:
    """Generic grid evaluation of the variational objective (cross-check
    path for the closed-form estimators)."""
    if phi not in PHIS:
        raise ValueError(f"unknown phi {phi!r}")
    _check_pairs(s_losses, t_losses)
    if phi == "kl":
        return d_kl(s_losses, t_losses, t_grid)
    t_grid = _check_grid(default_t_grid() if t_grid is None else t_grid)
    if phi == "tv":
        t_grid = t_grid[(t_grid >= -1.0) & (t_grid <= 1.0)]
    best = 0.0
    for s, t in zip(s_losses, t_losses):
        delta = _smean(t) - _smean(s)
        if phi == "tv":
            vals = t_grid * delta
        else:
            vals = t_grid * delta - (t_grid ** 2 / 4.0) * float(np.var(s))
        best = max(best, float(vals.max()))
    return best


def _check_pairs(s_losses, t_losses):
    if len(s_losses) != len(t_losses):
        raise ValueError("surrogate and target candidate lists differ in length")
    for s, t in zip(s_losses, t_losses):
        if len(s) == 0 or len(t) == 0:
            raise ValueError("loss samples must be nonempty for every candidate")


# ---------------------------------------------------------------------------
# generator, feasibility, auxiliary identities
# ---------------------------------------------------------------------------


def k_s(t: float, losses: np.ndarray, phi: str) -> float:
    """Mean-removed generator of the surrogate loss distribution.

    kl:   log E[exp(t*loss)] - t*E[loss]   (the centered cgf)
    chi2: t^2/4 * Var(loss)
    tv:   identically 0 under the |t| <= 1 restriction
    """
    if phi not in PHIS:
        raise ValueError(f"unknown phi {phi!r}")
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("loss sample must be nonempty")
    if phi == "tv":
        return 0.0
    if phi == "kl":
        return float(np.log(np.mean(np.exp(t * losses))) - t * np.mean(losses))
    return float(t * t / 4.0 * np.var(losses))


@dataclass
class FeasibilityCheck:
    feasible: bool
    margin: float
    threshold: float
    condition: str


def feasibility(c1: float, c2: float, losses: np.ndarray,
                phi: str) -> FeasibilityCheck:
    """Is (c1, c2) admissible for the localized bound with this phi?

    Returns the data threshold that c2 must clear and the margin
    c2 - threshold (negative margin means infeasible).
    """
    if phi not in PHIS:
        raise ValueError(f"unknown phi {phi!r}")
    if c1 <= 0:
        raise ValueError("c1 must be > 0")
    losses = np.asarray(losses, dtype=np.float64)
    if phi == "tv":
        threshold = 0.0
        ok = c1 <= 1.0 and c2 >= 0.0
        return FeasibilityCheck(ok, c2 - threshold, threshold,
                                "tv needs 0 < c1 <= 1 and c2 >= 0")
    if phi == "kl":
        threshold = (math.exp(c1) - 1.0 - c1) / c1
        return FeasibilityCheck(c2 >= threshold, c2 - threshold, threshold,
                                "kl needs c2 >= (e^c1 - 1 - c1)/c1")
    mean = float(np.mean(losses)) if losses.size else 0.0
    var = float(np.var(losses)) if losses.size else 0.0
    if mean < VAR_FLOOR:
        threshold = 0.0 if var < VAR_FLOOR else math.inf
    else:
        threshold = (c1 / 4.0) * var / mean
    margin = c2 - threshold if math.isfinite(threshold) else -math.inf
    return FeasibilityCheck(c2 >= threshold, margin, threshold,
                            "chi2 needs c2 >= (c1/4) * Var/E of surrogate loss")


def bernoulli_undercoverage(p: float, q: float) -> float:
    """KL(Bernoulli(p) || Bernoulli(q)): the floor any kl discrepancy
    estimate must respect when the target puts mass p on a region the
    surrogate covers with mass q."""
    if not 0.0 <= p <= 1.0 or not 0.0 <= q <= 1.0:
        raise ValueError("p and q must be probabilities")
    if q in (0.0, 1.0):
        return 0.0 if p == q else math.inf
    out = 0.0
    if p > 0.0:
        out += p * math.log(p / q)
    if p < 1.0:
        out += (1.0 - p) * math.log((1.0 - p) / (1.0 - q))
    return out


@dataclass
class VarianceSplit:
    between: float
    within: float
    total: float


def variance_decomposition(prof: LossProfile) -> VarianceSplit:
    """Split the equal-weight mixture variance into between-component and
    mean within-component parts; total is computed independently so the
    mixture identity between + within = total stays a real check."""
    comps = [np.asarray(c, dtype=np.float64) for c in prof.losses_by_component]
    if not comps:
        raise ValueError("profile has no components")
    means = np.array([c.mean() for c in comps])
    grand = float(means.mean())
    between = float(np.var(means))
    within = float(np.mean([c.var() for c in comps]))
    total = float(np.mean([np.mean(c * c) for c in comps]) - grand * grand)
    return VarianceSplit(between, within, total)


def eps_pac(d: int, K: int, gamma: float, rho: float, delta: float,
            r: float) -> float:
    """Statistical slack of the K-snapshot posterior certificate.

    Decreases in K and in rho (for gamma > 0); the gamma = 0 case drops
    the geometry term entirely.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    if K < 2:
        raise ValueError("K must be >= 2")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must be in (0, 1)")
    if rho <= 0:
        raise ValueError("rho must be > 0")
    if gamma < 0 or r < 0:
        raise ValueError("gamma and r must be >= 0")
    logK = math.log(K)
    geometry = (d / 2.0) * math.log1p(
        (gamma * gamma / (rho * rho)) * (1.0 + math.sqrt(logK / d)) ** 2)
    residual = 0.5 + 2.0 * math.log(
        2.0 + 3.0 * d + 6.0 * r * r * K
        + 4.0 * d * math.log(math.sqrt(d) + math.sqrt(logK)))
    return math.sqrt((geometry + math.log(K / delta) + residual)
                     / (2.0 * (K - 1)))


# ---------------------------------------------------------------------------
# sharpness
# ---------------------------------------------------------------------------


def sharpness(x_hat: np.ndarray, ensemble: SurrogateEnsemble, label: int,
              rho: float, steps: int = 20, restarts: int = 3,
              seed: int = 0) -> float:
    """max over ||eps||_2 <= rho of R(x_hat + eps) - R(x_hat), estimated by
    projected gradient ascent with random restarts.

    The zero perturbation is always a candidate, so the result is >= 0.
    Each ascent step consumes one gradient call per ensemble member.
    """
    if rho < 0:
        raise ValueError("rho must be >= 0")
    if rho == 0:
        return 0.0
    kind = M.bounded_error(label)
    members = list(ensemble.all_members())
    rng = np.random.default_rng(seed)
    d = x_hat.size

    def risk(z):
        return float(np.mean([M.loss(w, z, kind) for w in members]))

    base = risk(x_hat)
    best = base
    step = 2.0 * rho / steps
    for restart in range(restarts):
        if restart == 0:
            eps = np.zeros_like(x_hat)
        else:
            u = rng.normal(size=d)
            u /= np.linalg.norm(u)
            eps = u * rho * rng.uniform() ** (1.0 / d)
            best = max(best, risk(x_hat + eps))
        for _ in range(steps):
            g = np.mean([M.input_gradient(w, x_hat + eps, kind)
                         for w in members], axis=0)
            norm = float(np.linalg.norm(g))
            if norm < 1e-15:
                break
            eps = eps + step * g / norm
            scale = float(np.linalg.norm(eps))
            if scale > rho:
                eps = eps * (rho / scale)
            best = max(best, risk(x_hat + eps))
    return best - base


# ---------------------------------------------------------------------------
# bound assembly
# ---------------------------------------------------------------------------


@dataclass
class BoundConfig:
    phi: str = "chi2"
    c1: float = 1.0
    c2: float = 0.25
    rho: float = 0.05
    delta: float = 0.05
    t_grid: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.phi not in PHIS:
            raise ValueError(f"unknown phi {self.phi!r}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must be in (0, 1)")
        if self.rho <= 0:
            raise ValueError("rho must be > 0")


@dataclass
class BoundReport:
    phi: str
    r: float
    c1: float
    c2: float
    empirical_risk: float
    sharpness: float
    d_hat: float
    k_s_at_c1: float
    eps_pac: float
    assembled: float
    realized_target_risk: float
    feasible_margin: float
    num_candidates: int
    in_localized_space: bool

    def csv_row(self) -> str:
        def fmt(v):
            return "inf" if math.isinf(v) else f"{v:.17g}"
        return ",".join([
            self.phi, fmt(self.r), fmt(self.c1), fmt(self.c2),
            fmt(self.sharpness), fmt(self.d_hat), fmt(self.k_s_at_c1),
            fmt(self.eps_pac), fmt(self.assembled),
            fmt(self.realized_target_risk),
        ])


def assemble_bound(x_hat: np.ndarray, x: np.ndarray, gamma: float,
                   ensemble: SurrogateEnsemble,
                   target_models: Sequence[M.Weights], label: int,
                   cfg: BoundConfig, r: float,
                   candidates: Optional[CandidateSetXr] = None,
                   n_candidates: int = 64, seed: int = 0,
                   sharpness_steps: int = 20,
                   sharpness_restarts: int = 3) -> BoundReport:
    """Evaluate every term of the transfer bound at one adversarial example.

    assembled = (risk + sharpness) + d_hat / c1 + c2 * r + eps_pac

    Raises InfeasibleError when (c1, c2) violates the validity condition
    for the chosen phi.  The realized target risk is recorded alongside
    and soft-checked against the assembled value (a warning, not an
    error: the certificate holds with probability 1 - delta).
    """
    if len(target_models) == 0:
        raise ValueError("target model set must be nonempty")
    prof = profile(x_hat, ensemble, label, target_models)
    losses_here = prof.all_losses
    feas = feasibility(cfg.c1, cfg.c2, losses_here, cfg.phi)
    if not feas.feasible:
        raise InfeasibleError(
            f"(c1={cfg.c1:g}, c2={cfg.c2:g}) is infeasible: {feas.condition} "
            f"(threshold {feas.threshold:g})")

    if candidates is None:
        rng = np.random.default_rng(seed)
        pool = [x_hat]
        for _ in range(n_candidates):
            z = x + rng.uniform(-gamma, gamma, size=x.size)
            pool.append(np.clip(z, 0.0, 1.0))
        candidates = CandidateSetXr.build(pool, ensemble, label, r,
                                          x=x, gamma=gamma)

    s_losses, t_losses = candidate_losses(candidates.candidates, ensemble,
                                          target_models, label)
    grid = cfg.t_grid if cfg.t_grid is not None else default_t_grid()
    grid = np.unique(np.concatenate([np.asarray(grid, dtype=np.float64),
                                     [0.0, cfg.c1, -cfg.c1]]))
    if cfg.phi == "tv":
        d_hat = d_tv(s_losses, t_losses)
    elif cfg.phi == "kl":
        d_hat = d_kl(s_losses, t_losses, grid)
    else:
        d_hat = d_chi2(s_losses, t_losses)

    sharp = sharpness(x_hat, ensemble, label, cfg.rho, steps=sharpness_steps,
                      restarts=sharpness_restarts, seed=seed)
    risk = prof.surrogate_risk
    slack = eps_pac(d=x_hat.size, K=ensemble.size, gamma=gamma, rho=cfg.rho,
                    delta=cfg.delta, r=r)
    assembled = (risk + sharp) + d_hat / cfg.c1 + cfg.c2 * r + slack
    realized = float(np.mean(prof.target_losses))
    in_space = risk <= r + 1e-12
    if not in_space:
        log.warning("surrogate risk %.4f exceeds the localization threshold "
                    "r=%.4f; the bound's precondition fails here", risk, r)
    if realized > assembled + 1e-9:
        log.warning("realized target risk %.4f exceeds the assembled bound "
                    "%.4f", realized, assembled)
    return BoundReport(
        phi=cfg.phi, r=r, c1=cfg.c1, c2=cfg.c2,
        empirical_risk=risk, sharpness=sharp, d_hat=d_hat,
        k_s_at_c1=k_s(cfg.c1, losses_here, cfg.phi),
        eps_pac=slack, assembled=assembled,
        realized_target_risk=realized,
        feasible_margin=feas.margin,
        num_candidates=len(candidates.candidates),
        in_localized_space=in_space,
    )
