"""Transfer attack runners over snapshot ensembles.

All methods share the minimization framing: the attack objective is the
negative cross-entropy of the true class (untargeted) or the cross-entropy
of the target class (targeted), and every outer update descends it inside
the L-infinity budget intersected with the unit box.  The reverse
("inner") perturbations ascend the same objective, probing how bad the
loss can get near the current iterate before the outer step commits.

Query accounting: one unit is one input-gradient computation on one model.
Every runner predicts its own total from the cost model up front and
verifies the realized count against it.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import models as M
from .forge import SurrogateEnsemble

METHODS = ("ifgsm", "mifgsm", "rap", "flat_rap", "flat_cwa", "drap")

MOMENTUM_NORM_FLOOR = 1e-12

TRACE_COLUMNS = "iter,component,snapshot,loss_pre,loss_post,grad_calls"


class NumericError(RuntimeError):
    """An attack run produced non-finite numbers or broke its accounting."""


@dataclass
class AttackConfig:
    """Shared knobs for every attack method.

    beta_eps is the inner (reverse) step size; for flat_cwa it is the
    radius of the single reverse step (the usual choice is gamma / 15) and
    micro_step is the per-model update scale (the usual choice is 50).
    The implied reverse-perturbation radius in the infinity norm is
    inner_T * beta_eps.
    """

    gamma: float = 4 / 255
    beta_x: float = 2 / 255
    beta_eps: float = 0.1 / 255
    inner_T: int = 5
    n_ls: int = 5
    mu: float = 1.0
    targeted: bool = False
    method: str = "drap"
    n_iter: Optional[int] = None
    seed: int = 0
    schedule_mode: str = "trajectory"
    micro_step: float = 50.0
    transform_hook: Optional[Callable[[np.ndarray], np.ndarray]] = None
    record_trace: bool = True
    keep_iterates: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.beta_x <= 0:
            raise ValueError("beta_x must be > 0")
        if self.beta_eps < 0:
            raise ValueError("beta_eps must be >= 0")
        if self.inner_T < 0:
            raise ValueError("inner_T must be >= 0")
        if self.n_ls < 0:
            raise ValueError("n_ls must be >= 0")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.schedule_mode not in ("trajectory", "random"):
            raise ValueError(f"unknown schedule mode {self.schedule_mode!r}")

    @property
    def rho_inf(self) -> float:
        return self.inner_T * self.beta_eps


@dataclass
class TraceRow:
    iter: int
    component: int
    snapshot: int
    loss_pre: float
    loss_post: float
    grad_calls: int


@dataclass
class AttackState:
    x: np.ndarray
    label: int
    targeted: bool
    method: str
    x_hat: np.ndarray = None
    m: np.ndarray = None
    grad_calls: int = 0
    predicted_grad_calls: int = 0
    trace: Optional[list] = None
    iterates: Optional[list] = None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def project(x_hat: np.ndarray, x: np.ndarray, gamma: float) -> np.ndarray:
    """Clamp into the gamma-infinity ball around x intersected with [0,1]^d."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    lo = np.maximum(x - gamma, 0.0)
    hi = np.minimum(x + gamma, 1.0)
    return np.clip(x_hat, lo, hi)


def momentum_step(m: np.ndarray, g: np.ndarray, mu: float) -> np.ndarray:
    """m' = mu * m + g / ||g||_1, with the normalized term zeroed for
    vanishing gradients."""
    l1 = float(np.abs(g).sum())
    if l1 < MOMENTUM_NORM_FLOOR:
        return mu * m
    return mu * m + g / l1


def attack_loss_kind(targeted: bool, label: int) -> M.LossKind:
    if targeted:
        return M.targeted_cross_entropy(label)
    return M.neg_cross_entropy(label)


def _hooked(cfg: AttackConfig, z: np.ndarray) -> np.ndarray:
    # the gradient is taken at the transformed point (straight-through)
    return z if cfg.transform_hook is None else cfg.transform_hook(z)


def _grad(cfg, w, z, kind, where):
    g = M.input_gradient(w, _hooked(cfg, z), kind)
    if not np.all(np.isfinite(g)):
        raise NumericError(f"non-finite gradient at {where}")
    return g


def fused_loss_and_grad(models: Sequence[M.Weights], x: np.ndarray,
                        kind: M.LossKind, cfg: AttackConfig):
    """Loss of the averaged logits and its input gradient.

    Consumes one gradient call per model: each per-model chain contribution
    is a separate backward pass.
    """
    if len(models) == 0:
        raise ValueError("empty model batch")
    z = _hooked(cfg, x)
    logits = np.stack([M.forward(w, z) for w in models])
    zbar = logits.mean(axis=0)
    value = float(M.loss_from_logits(zbar, kind))
    dl = M.dloss_dlogits(zbar, kind) / len(models)
    g = np.zeros_like(x)
    for w in models:
        g = g + M.vjp_input(w, z, dl)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite fused gradient")
    return value, g


def loss_average_grad(models: Sequence[M.Weights], x: np.ndarray,
                      kind: M.LossKind, cfg: AttackConfig) -> np.ndarray:
    """Gradient of the per-model loss average (one call per model)."""
    if len(models) == 0:
        raise ValueError("empty model batch")
    g = np.zeros_like(x)
    for w in models:
        g = g + _grad(cfg, w, x, kind, "loss-average gradient")
    return g / len(models)


def inner_max_per_model(x_hat: np.ndarray, w: M.Weights, kind: M.LossKind,
                        cfg: AttackConfig) -> np.ndarray:
    """T sign-ascent steps on one model; consumes exactly T gradient calls.

    No projection is applied: ||eps||_inf <= inner_T * beta_eps holds by
    construction.
    """
    eps = np.zeros_like(x_hat)
    for t in range(cfg.inner_T):
        g = _grad(cfg, w, x_hat + eps, kind, f"inner step {t}")
        eps = eps + cfg.beta_eps * np.sign(g)
    return eps


def inner_max_global(x_hat: np.ndarray, batch: Sequence[M.Weights],
                     kind: M.LossKind, cfg: AttackConfig) -> np.ndarray:
    """T sign-ascent steps on the fused (logit-averaged) objective;
    consumes inner_T * len(batch) gradient calls."""
    if len(batch) == 0:
        raise ValueError("empty model batch")
    eps = np.zeros_like(x_hat)
    for _ in range(cfg.inner_T):
        _, g = fused_loss_and_grad(batch, x_hat + eps, kind, cfg)
        eps = eps + cfg.beta_eps * np.sign(g)
    return eps


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------


def predict_ngrad(method: str, n_iter: int, num_components: int,
                  T: Optional[int] = None,
                  late_start: Optional[int] = None) -> int:
    """Exact gradient-call count for one attack run.

    ``late_start=None`` applies the standard schedule: RAP-family methods
    switch their inner loop on after iteration 50 (never, for runs of at
    most 50 iterations); the per-model method keeps n_ls = 5 component
    epochs unless the run is so short (n_iter / I <= 5) that the inner
    loop never starts.
    """
    method = method.lower()
    if n_iter < 0 or num_components < 1:
        raise ValueError("need n_iter >= 0 and num_components >= 1")
    I = num_components
    if method in ("ifgsm", "mifgsm", "mi", "pi"):
        return n_iter * I
    if method in ("flat_cwa", "cwa"):
        return n_iter * 2 * I
    if method in ("rap", "flat_rap"):
        T = 10 if T is None else T
        ls = late_start if late_start is not None else (0 if n_iter <= 50 else 50)
        return min(n_iter, ls) * I + max(0, n_iter - ls) * (T + 1) * I
    if method == "drap":
        T = 5 if T is None else T
        ls = late_start if late_start is not None else (0 if n_iter / I <= 5 else 5)
        threshold = ls * I
        if n_iter < threshold:
            return n_iter
        return threshold + (n_iter - threshold) * (T + 1)
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# run scaffolding
# ---------------------------------------------------------------------------


def _start(x, label, targeted, method, cfg) -> AttackState:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("attacks operate on single examples")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("benign input must lie in [0,1]^d")
    state = AttackState(x=x, label=int(label), targeted=targeted, method=method)
    state.x_hat = project(x.copy(), x, cfg.gamma)
    state.m = np.zeros_like(x)
    state.trace = [] if cfg.record_trace else None
    state.iterates = [] if cfg.keep_iterates else None
    return state


def _note(state, cfg, step, comp, snap, loss_pre, loss_post, tally):
    if state.iterates is not None:
        state.iterates.append(state.x_hat.copy())
    if state.trace is not None:
        state.trace.append(TraceRow(step, comp, snap, loss_pre, loss_post,
                                    tally.count))


def _finish(state, cfg, tally, predicted):
    state.grad_calls = tally.count
    state.predicted_grad_calls = predicted
    if state.grad_calls != predicted:
        raise NumericError(
            f"gradient-call accounting drifted: observed {state.grad_calls}, "
            f"cost model predicts {predicted}")
    if not np.all(np.isfinite(state.x_hat)):
        raise NumericError("non-finite adversarial example")
    return state


def _resolve_batch_iters(cfg) -> int:
    if cfg.n_iter is None:
        raise ValueError("this method needs an explicit n_iter")
    if cfg.n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    return cfg.n_iter


def _component_batch(ens, j, cfg, rng):
    n = ens.snapshots_per_component
    out = []
    for i in range(ens.num_components):
        if cfg.schedule_mode == "random":
            out.append(ens.schedule(j % n, i, mode="random", rng=rng))
        else:
            out.append(ens.schedule(j % n, i))
    return out


# ---------------------------------------------------------------------------
# runners
# ---------------------------------------------------------------------------


def run_drap(x, label, ensemble: SurrogateEnsemble, cfg: AttackConfig) -> AttackState:
    """Per-model reverse perturbations over the snapshot schedule.

    Sweeps the whole ensemble once: n component epochs, one model per
    (epoch, component) step, K = I * n outer updates total.  From epoch
    n_ls on, each step first ascends the sampled model's loss for inner_T
    sign steps and takes the outer gradient at the shifted point; momentum
    accumulates across every step and never resets.
    """
    I, n = ensemble.num_components, ensemble.snapshots_per_component
    K = ensemble.size
    if cfg.n_iter is not None and cfg.n_iter != K:
        raise ValueError(
            f"this attack consumes the ensemble exactly once: n_iter must be "
            f"{K} (= I * n), got {cfg.n_iter}")
    if cfg.n_ls > n:
        raise ValueError(f"n_ls {cfg.n_ls} exceeds snapshots per component {n}")
    kind = attack_loss_kind(cfg.targeted, label)
    rng = np.random.default_rng(cfg.seed)
    predicted = predict_ngrad("drap", K, I, T=cfg.inner_T, late_start=cfg.n_ls)
    state = _start(x, label, cfg.targeted, "drap", cfg)
    with M.GRAD_CALLS.scope() as tally:
        step = 0
        for j in range(n):
            for i in range(I):
                w = ensemble.schedule(j, i, mode=cfg.schedule_mode, rng=rng)
                if j >= cfg.n_ls and cfg.inner_T > 0:
                    eps = inner_max_per_model(state.x_hat, w, kind, cfg)
                    z = state.x_hat + eps
                else:
                    z = state.x_hat
                loss_pre = M.loss(w, _hooked(cfg, state.x_hat), kind)
                g = _grad(cfg, w, z, kind, f"outer step {step}")
                state.m = momentum_step(state.m, g, cfg.mu)
                state.x_hat = project(state.x_hat - cfg.beta_x * np.sign(state.m),
                                      state.x, cfg.gamma)
                loss_post = M.loss(w, _hooked(cfg, state.x_hat), kind)
                _note(state, cfg, step, i, j, loss_pre, loss_post, tally)
                step += 1
    return _finish(state, cfg, tally, predicted)


def _run_ensemble_sweep(x, label, ensemble, cfg, method, with_momentum):
    """Longitudinal baseline: one scheduled model per step, no inner loop."""
    I, n = ensemble.num_components, ensemble.snapshots_per_component
    K = ensemble.size
    if cfg.n_iter is not None and cfg.n_iter != K:
        raise ValueError(
            f"an ensemble sweep visits every snapshot once: n_iter must be "
            f"{K}, got {cfg.n_iter}")
    kind = attack_loss_kind(cfg.targeted, label)
    rng = np.random.default_rng(cfg.seed)
    predicted = K
    state = _start(x, label, cfg.targeted, method, cfg)
    with M.GRAD_CALLS.scope() as tally:
        step = 0
        for j in range(n):
            for i in range(I):
                w = ensemble.schedule(j, i, mode=cfg.schedule_mode, rng=rng)
                loss_pre = M.loss(w, _hooked(cfg, state.x_hat), kind)
                g = _grad(cfg, w, state.x_hat, kind, f"outer step {step}")
                if with_momentum:
                    state.m = momentum_step(state.m, g, cfg.mu)
                    direction = np.sign(state.m)
                else:
                    direction = np.sign(g)
                state.x_hat = project(state.x_hat - cfg.beta_x * direction,
                                      state.x, cfg.gamma)
                loss_post = M.loss(w, _hooked(cfg, state.x_hat), kind)
                _note(state, cfg, step, i, j, loss_pre, loss_post, tally)
                step += 1
    return _finish(state, cfg, tally, predicted)


def _run_batch_fgsm(x, label, models, cfg, method, with_momentum):
    """Classic multi-model baseline: per-iteration loss-average gradient."""
    if len(models) == 0:
        raise ValueError("empty model batch")
    n_iter = _resolve_batch_iters(cfg)
    I = len(models)
    kind = attack_loss_kind(cfg.targeted, label)
    predicted = predict_ngrad(method, n_iter, I)
    state = _start(x, label, cfg.targeted, method, cfg)
    with M.GRAD_CALLS.scope() as tally:
        for it in range(n_iter):
            loss_pre = float(np.mean(
                [M.loss(w, _hooked(cfg, state.x_hat), kind) for w in models]))
            g = loss_average_grad(models, state.x_hat, kind, cfg)
            if with_momentum:
                state.m = momentum_step(state.m, g, cfg.mu)
                direction = np.sign(state.m)
            else:
                direction = np.sign(g)
            state.x_hat = project(state.x_hat - cfg.beta_x * direction,
                                  state.x, cfg.gamma)
            loss_post = float(np.mean(
                [M.loss(w, _hooked(cfg, state.x_hat), kind) for w in models]))
            _note(state, cfg, it, -1, -1, loss_pre, loss_post, tally)
    return _finish(state, cfg, tally, predicted)


def run_ifgsm(x, label, models_or_ensemble, cfg: AttackConfig) -> AttackState:
    """Iterative sign descent of the model-averaged loss (no momentum).

    Given a snapshot ensemble it sweeps the schedule one model per step;
    given a plain model list it uses the loss-average gradient of the whole
    batch each iteration.
    """
    if isinstance(models_or_ensemble, SurrogateEnsemble):
        return _run_ensemble_sweep(x, label, models_or_ensemble, cfg,
                                   "ifgsm", with_momentum=False)
    return _run_batch_fgsm(x, label, models_or_ensemble, cfg,
                           "ifgsm", with_momentum=False)


def run_mifgsm(x, label, models_or_ensemble, cfg: AttackConfig) -> AttackState:
    """run_ifgsm plus L1-normalized momentum accumulation."""
    if isinstance(models_or_ensemble, SurrogateEnsemble):
        return _run_ensemble_sweep(x, label, models_or_ensemble, cfg,
                                   "mifgsm", with_momentum=True)
    return _run_batch_fgsm(x, label, models_or_ensemble, cfg,
                           "mifgsm", with_momentum=True)


def run_rap(x, label, models: Sequence[M.Weights], cfg: AttackConfig) -> AttackState:
    """Reverse perturbation on the loss average of a fixed model batch.

    After the late-start iteration the inner loop ascends the averaged
    loss for inner_T steps (building one shared eps), then the outer step
    descends at the shifted point.  No momentum.
    """
    if len(models) == 0:
        raise ValueError("empty model batch")
    n_iter = _resolve_batch_iters(cfg)
    I = len(models)
    kind = attack_loss_kind(cfg.targeted, label)
    predicted = predict_ngrad("rap", n_iter, I, T=cfg.inner_T,
                              late_start=cfg.n_ls)
    state = _start(x, label, cfg.targeted, "rap", cfg)
    with M.GRAD_CALLS.scope() as tally:
        for it in range(n_iter):
            if it >= cfg.n_ls and cfg.inner_T > 0:
                eps = np.zeros_like(state.x_hat)
                for _ in range(cfg.inner_T):
                    ag = loss_average_grad(models, state.x_hat + eps, kind, cfg)
                    eps = eps + cfg.beta_eps * np.sign(ag)
                z = state.x_hat + eps
            else:
                z = state.x_hat
            loss_pre = float(np.mean(
                [M.loss(w, _hooked(cfg, state.x_hat), kind) for w in models]))
            g = loss_average_grad(models, z, kind, cfg)
            state.x_hat = project(state.x_hat - cfg.beta_x * np.sign(g),
                                  state.x, cfg.gamma)
            loss_post = float(np.mean(
                [M.loss(w, _hooked(cfg, state.x_hat), kind) for w in models]))
            _note(state, cfg, it, -1, -1, loss_pre, loss_post, tally)
    return _finish(state, cfg, tally, predicted)


def run_flat_rap(x, label, ensemble: SurrogateEnsemble,
                 cfg: AttackConfig) -> AttackState:
    """Reverse perturbation on fused logits of per-component samples.

    Each iteration draws one snapshot per component, builds a shared eps by
    ascending the loss of the averaged logits (inner_T fused steps), then
    descends the same fused objective at the shifted point with momentum.
    """
    I = ensemble.num_components
    n_iter = cfg.n_iter if cfg.n_iter is not None else ensemble.size
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    kind = attack_loss_kind(cfg.targeted, label)
    rng = np.random.default_rng(cfg.seed)
    predicted = predict_ngrad("flat_rap", n_iter, I, T=cfg.inner_T,
                              late_start=cfg.n_ls)
    state = _start(x, label, cfg.targeted, "flat_rap", cfg)
    with M.GRAD_CALLS.scope() as tally:
        for it in range(n_iter):
            batch = _component_batch(ensemble, it, cfg, rng)
            if it >= cfg.n_ls and cfg.inner_T > 0:
                eps = inner_max_global(state.x_hat, batch, kind, cfg)
                z = state.x_hat + eps
            else:
                z = state.x_hat
            loss_pre, g = fused_loss_and_grad(batch, z, kind, cfg)
            state.m = momentum_step(state.m, g, cfg.mu)
            state.x_hat = project(state.x_hat - cfg.beta_x * np.sign(state.m),
                                  state.x, cfg.gamma)
            loss_post = float(M.loss_from_logits(
                np.mean([M.forward(w, _hooked(cfg, state.x_hat)) for w in batch],
                        axis=0), kind))
            _note(state, cfg, it, -1, it % ensemble.snapshots_per_component,
                  loss_pre, loss_post, tally)
    return _finish(state, cfg, tally, predicted)


def run_flat_cwa(x, label, ensemble: SurrogateEnsemble,
                 cfg: AttackConfig) -> AttackState:
    """Reverse step followed by per-model micro-updates.

    Each iteration: take one fused-gradient ascent step of radius beta_eps
    from the current iterate, then walk through the component batch
    accumulating L2-normalized momentum with non-sign micro-updates of
    scale micro_step, and finally move the iterate by a sign step along
    the net displacement.  No late start; momentum persists across
    iterations.
    """
    I = ensemble.num_components
    n_iter = cfg.n_iter if cfg.n_iter is not None else ensemble.size
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    kind = attack_loss_kind(cfg.targeted, label)
    rng = np.random.default_rng(cfg.seed)
    predicted = predict_ngrad("flat_cwa", n_iter, I)
    state = _start(x, label, cfg.targeted, "flat_cwa", cfg)
    with M.GRAD_CALLS.scope() as tally:
        for it in range(n_iter):
            batch = _component_batch(ensemble, it, cfg, rng)
            loss_pre, g = fused_loss_and_grad(batch, state.x_hat, kind, cfg)
            cur = project(state.x_hat + cfg.beta_eps * np.sign(g),
                          state.x, cfg.gamma)
            for w in batch:
                g = _grad(cfg, w, cur, kind, f"micro step at iteration {it}")
                l2 = float(np.linalg.norm(g))
                if l2 < MOMENTUM_NORM_FLOOR:
                    state.m = cfg.mu * state.m
                else:
                    state.m = cfg.mu * state.m + g / l2
                cur = project(cur - cfg.micro_step * state.m, state.x, cfg.gamma)
                if state.iterates is not None:
                    state.iterates.append(cur.copy())
            net = cur - state.x_hat
            state.x_hat = project(state.x_hat + cfg.beta_x * np.sign(net),
                                  state.x, cfg.gamma)
            loss_post = float(M.loss_from_logits(
                np.mean([M.forward(w, _hooked(cfg, state.x_hat)) for w in batch],
                        axis=0), kind))
            _note(state, cfg, it, -1, it % ensemble.snapshots_per_component,
                  loss_pre, loss_post, tally)
    return _finish(state, cfg, tally, predicted)


def run_attack(x, label, ensemble, cfg: AttackConfig,
               models: Optional[Sequence[M.Weights]] = None) -> AttackState:
    """Dispatch on cfg.method.  RAP runs on the prototype batch; methods
    that take either form prefer the explicit model list when given."""
    method = cfg.method
    if method == "drap":
        return run_drap(x, label, ensemble, cfg)
    if method == "flat_rap":
        return run_flat_rap(x, label, ensemble, cfg)
    if method == "flat_cwa":
        return run_flat_cwa(x, label, ensemble, cfg)
    if method == "rap":
        batch = models if models is not None else ensemble.pretrained
        if not batch:
            raise ValueError("rap needs a model batch (or ensemble prototypes)")
        return run_rap(x, label, batch, cfg)
    runner = run_ifgsm if method == "ifgsm" else run_mifgsm
    if models is not None:
        return runner(x, label, models, cfg)
    return runner(x, label, ensemble, cfg)


# ---------------------------------------------------------------------------
# trace serialization
# ---------------------------------------------------------------------------


def trace_to_csv(state: AttackState, cfg: AttackConfig) -> str:
    if state.trace is None:
        raise ValueError("run was configured without a trace")
    buf = io.StringIO()
    buf.write(
        f"# method={state.method} targeted={state.targeted} "
        f"gamma={cfg.gamma:.17g} beta_x={cfg.beta_x:.17g} "
        f"beta_eps={cfg.beta_eps:.17g} inner_T={cfg.inner_T} n_ls={cfg.n_ls} "
        f"mu={cfg.mu:.17g} micro_step={cfg.micro_step:.17g} seed={cfg.seed}\n")
    buf.write(TRACE_COLUMNS + "\n")
    for row in state.trace:
        buf.write(f"{row.iter},{row.component},{row.snapshot},"
                  f"{row.loss_pre:.17g},{row.loss_post:.17g},{row.grad_calls}\n")
    return buf.getvalue()


def write_trace(state: AttackState, cfg: AttackConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(trace_to_csv(state, cfg))
