"""Invertible conditional flow proposals.

A proposal draws z0 ~ N(0, I), pushes it through N steps of two affine-coupling
substeps (each conditioned on the current state x, a masked half of z, and the
target gradient evaluated at a learned point x + R), and proposes
x' = x + eps * z. The flow is tractably invertible, so both q(x'|x) and the
reverse density q(x|x') are exact, enabling Metropolis-Hastings with an
asymmetric learned proposal.

Everything here is written over tape Vars: with constant Vars this is the
sampling path, with tape leaves the identical code becomes differentiable for
training. Modes: "full" (gradient-informed flow), "no-grad" (gradient term
zeroed, a state-conditioned coupling flow), "langevin" (no-grad flow noise
plus an elementwise affine-transformed gradient drift).
"""

import numpy as np

from . import tape as tp
from .nets import ConditionerNet

LOG_2PI = float(np.log(2.0 * np.pi))

MODES = ("full", "no-grad", "langevin")


class ProposalModel:
    """Flow proposal: masks, scale, conditioner nets, flat parameter dict."""

    def __init__(self, dim, n_steps, width, eps, mode, masks, params,
                 hidden_depth=2, squash_lambda=6.0):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.dim = dim
        self.n_steps = n_steps
        self.width = width
        self.eps = float(eps)
        self.mode = mode
        self.masks = np.asarray(masks, dtype=float)
        if self.masks.shape != (n_steps, dim):
            raise ValueError("masks must have shape (n_steps, dim)")
        self.params = params
        self.hidden_depth = hidden_depth
        self.squash_lambda = float(squash_lambda)
        self.sqt = ConditionerNet("sqt", 3 * dim, 3 * dim, width, n_steps,
                                  hidden_depth)
        self.rnet = ConditionerNet("r", 2 * dim, dim, width, n_steps,
                                   hidden_depth)
        self.lvnet = ConditionerNet("lv", dim, 2 * dim, width, 1,
                                    hidden_depth) if mode == "langevin" else None

    @property
    def eps_prime(self):
        # exact by construction: eps_prime * 2N == eps
        return self.eps / (2.0 * self.n_steps)

    @property
    def uses_flow_grad(self):
        return self.mode == "full"

    @property
    def grad_evals_per_proposal(self):
        if self.mode == "full":
            return 4 * self.n_steps
        if self.mode == "langevin":
            return 2
        return 0

    def const_params(self):
        return {k: tp.Var(v) for k, v in self.params.items()}


def make_model(dim, n_steps, width, eps, mode="full", rng=None,
               hidden_depth=2, squash_lambda=6.0):
    """Build a model with random per-step masks (floor(d/2) ones each) and
    zero-initialized output layers."""
    if rng is None:
        rng = np.random.default_rng(0)
    n_ones = dim // 2
    masks = np.zeros((n_steps, dim))
    for n in range(n_steps):
        idx = rng.permutation(dim)[:n_ones]
        masks[n, idx] = 1.0
    model = ProposalModel(dim, n_steps, width, eps, mode, masks, params={},
                          hidden_depth=hidden_depth,
                          squash_lambda=squash_lambda)
    params = model.sqt.init_params(rng)
    params.update(model.rnet.init_params(rng))
    if model.lvnet is not None:
        params.update(model.lvnet.init_params(rng))
    model.params = params
    return model


class FlowResult:
    """One directed pass of the flow over a batch."""

    def __init__(self, z_out, log_det, log_det_core, grad_evals):
        self.z_out = z_out
        self.log_det = log_det
        self.log_det_core = log_det_core
        self.grad_evals = grad_evals


class ProposalOutcome:
    """A batch of proposals with both densities and the accept bound."""

    def __init__(self, x_prime, z0, z, log_q_fwd, log_q_rev, log_det_fwd,
                 log_accept, energy, energy_prime, valid, grad_evals):
        self.x_prime = x_prime
        self.z0 = z0
        self.z = z
        self.log_q_fwd = log_q_fwd
        self.log_q_rev = log_q_rev
        self.log_det_fwd = log_det_fwd
        self.log_accept = log_accept
        self.energy = energy
        self.energy_prime = energy_prime
        self.valid = valid
        self.grad_evals = grad_evals


def _squash(v, lam):
    # lam * tanh(. / lam): identity near zero, output bounded by +-lam
    return lam * tp.tanh(v * (1.0 / lam))


def _substep(model, pvars, target, x, z, step, side, invert):
    """One coupling substep (side 0 keeps the step mask, side 1 its
    complement); returns (z_new, mask-dependent log-det increment)."""
    d = model.dim
    keep = model.masks[step] if side == 0 else 1.0 - model.masks[step]
    upd = 1.0 - keep
    mz = z * keep
    if model.uses_flow_grad:
        zeta = tp.concat_last([x, mz])
        r = model.rnet.apply(pvars, step, side, zeta)
        grad = tp.target_grad(target, x + r)
    else:
        grad = tp.Var(np.zeros_like(z.value))
    xi = tp.concat_last([x, mz, grad])
    out = model.sqt.apply(pvars, step, side, xi)
    s = _squash(tp.narrow(out, 0, d), model.squash_lambda)
    t_shift = tp.narrow(out, 2 * d, d)
    if model.uses_flow_grad:
        q = _squash(tp.narrow(out, d, d), model.squash_lambda)
        drift = grad * tp.exp(q) + t_shift
    else:
        drift = t_shift
    if invert:
        new_half = (z + model.eps_prime * drift) * tp.exp(-s)
    else:
        new_half = z * tp.exp(s) - model.eps_prime * drift
    z_new = mz + upd * new_half
    return z_new, tp.sum_last(upd * s)


def flow_pass(model, pvars, target, x, z, invert=False):
    """Full forward (z0 -> z) or inverse (z -> z0) flow over Vars; returns
    (z_out, mask-dependent log-det sum of the *forward* map along the path)."""
    log_det = tp.Var(np.zeros(np.asarray(z.value).shape[0]))
    schedule = [(n, side) for n in range(model.n_steps) for side in (0, 1)]
    if invert:
        schedule.reverse()
    for step, side in schedule:
        z, inc = _substep(model, pvars, target, x, z, step, side, invert)
        log_det = log_det + inc
    return z, log_det


def _as_batch(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[-1] != dim:
        raise ValueError(f"expected dimension {dim}, got {x.shape}")
    return x, single


def forward_flow(model, target, x, z0):
    """z0 -> z with Eq.-style log-determinant (mask sums plus d log eps)."""
    x, single = _as_batch(x, model.dim)
    z0, _ = _as_batch(z0, model.dim)
    before = target.grad_eval_count
    with np.errstate(over="ignore", invalid="ignore"):
        z, core = flow_pass(model, model.const_params(), target,
                            tp.Var(x), tp.Var(z0))
    const = model.dim * np.log(model.eps)
    z_out, core_v = z.value, core.value
    evals = target.grad_eval_count - before
    if single:
        return FlowResult(z_out[0], float(core_v[0] + const),
                          float(core_v[0]), evals)
    return FlowResult(z_out, core_v + const, core_v, evals)


def inverse_flow(model, target, x, z):
    """Exact algebraic inverse; log_det is of the forward map at this point."""
    x, single = _as_batch(x, model.dim)
    z, _ = _as_batch(z, model.dim)
    with np.errstate(over="ignore", invalid="ignore"):
        z0, core = flow_pass(model, model.const_params(), target,
                             tp.Var(x), tp.Var(z), invert=True)
    const = model.dim * np.log(model.eps)
    if single:
        return z0.value[0], float(core.value[0] + const)
    return z0.value, core.value + const


def gauss_log_density(z):
    """log N(z; 0, I) over the last axis, as a Var."""
    d = np.asarray(z.value).shape[-1]
    return -0.5 * tp.sum_last(tp.square(z)) - 0.5 * d * LOG_2PI


def propose_vars(model, pvars, target, x, z0):
    """The whole proposal pipeline over Vars (shared by sampling and
    training). x and z0 are (B, d) Vars; returns a dict of Vars."""
    d = model.dim
    log_eps = d * np.log(model.eps)
    if model.mode == "langevin":
        z, ld_fwd = flow_pass(model, pvars, target, x, z0)
        scale, shift = _langevin_drift(model, pvars, x)
        grad_x = tp.target_grad(target, x)
        half_eps2 = 0.5 * model.eps * model.eps
        x_prime = x + model.eps * z - half_eps2 * (grad_x * scale) + shift
        grad_xp = tp.target_grad(target, x_prime)
        scale_p, shift_p = _langevin_drift(model, pvars, x_prime)
        z_rev = (x - x_prime + half_eps2 * (grad_xp * scale_p) - shift_p) \
            * (1.0 / model.eps)
        z0_rev, ld_rev = flow_pass(model, pvars, target, x_prime, z_rev,
                                   invert=True)
    else:
        z, ld_fwd = flow_pass(model, pvars, target, x, z0)
        x_prime = x + model.eps * z
        z0_rev, ld_rev = flow_pass(model, pvars, target, x_prime, -z,
                                   invert=True)
    log_q_fwd = gauss_log_density(z0) - ld_fwd - log_eps
    log_q_rev = gauss_log_density(z0_rev) - ld_rev - log_eps
    energy = tp.target_energy(target, x)
    energy_prime = tp.target_energy(target, x_prime)
    delta = (energy - energy_prime) + (log_q_rev - log_q_fwd)
    return {
        "z": z,
        "x_prime": x_prime,
        "z0_rev": z0_rev,
        "log_det_fwd_core": ld_fwd,
        "log_det_rev_core": ld_rev,
        "log_q_fwd": log_q_fwd,
        "log_q_rev": log_q_rev,
        "energy": energy,
        "energy_prime": energy_prime,
        "delta": delta,
    }


def _langevin_drift(model, pvars, x):
    out = model.lvnet.apply(pvars, 0, 0, x)
    scale = tp.exp(_squash(tp.narrow(out, 0, model.dim), model.squash_lambda))
    shift = tp.narrow(out, model.dim, model.dim)
    return scale, shift


def propose(model, target, x, rng=None, z0=None):
    """Draw (or take) z0 and produce a batch ProposalOutcome.

    Invalid (non-finite) proposals get log_accept = -inf and are rejected by
    the Metropolis-Hastings step, which preserves invariance.
    """
    x, single = _as_batch(x, model.dim)
    if z0 is None:
        if rng is None:
            raise ValueError("need rng or an explicit z0")
        z0 = rng.standard_normal(x.shape)
    else:
        z0, _ = _as_batch(z0, model.dim)
    before = target.grad_eval_count
    with np.errstate(over="ignore", invalid="ignore"):
        pieces = propose_vars(model, model.const_params(), target,
                              tp.Var(x), tp.Var(z0))
    evals = target.grad_eval_count - before
    x_prime = pieces["x_prime"].value
    lqf = pieces["log_q_fwd"].value
    lqr = pieces["log_q_rev"].value
    delta = pieces["delta"].value
    with np.errstate(invalid="ignore"):
        log_accept = np.minimum(delta, 0.0)
    log_accept = np.where(np.isnan(log_accept), -np.inf, log_accept)
    valid = (np.isfinite(x_prime).all(axis=1)
             & np.isfinite(lqf) & ~np.isnan(lqr))
    log_accept = np.where(valid, log_accept, -np.inf)
    const = model.dim * np.log(model.eps)
    out = ProposalOutcome(
        x_prime=x_prime,
        z0=z0,
        z=pieces["z"].value,
        log_q_fwd=lqf,
        log_q_rev=lqr,
        log_det_fwd=pieces["log_det_fwd_core"].value + const,
        log_accept=log_accept,
        energy=pieces["energy"].value,
        energy_prime=pieces["energy_prime"].value,
        valid=valid,
        grad_evals=evals,
    )
    if single:
        for name in ("x_prime", "z0", "z"):
            setattr(out, name, getattr(out, name)[0])
        for name in ("log_q_fwd", "log_q_rev", "log_det_fwd", "log_accept",
                     "energy", "energy_prime"):
            setattr(out, name, float(getattr(out, name)[0]))
        out.valid = bool(out.valid[0])
    return out


def log_q(model, target, x_from, x_to):
    """log q(x_to | x_from): density of the displacement under the flow
    conditioned on x_from (includes the -d log eps scale term)."""
    x_from, single = _as_batch(x_from, model.dim)
    x_to, _ = _as_batch(x_to, model.dim)
    if model.mode == "langevin":
        grad = target.gradient(x_from)
        pv = model.const_params()
        with np.errstate(over="ignore", invalid="ignore"):
            scale, shift = _langevin_drift(model, pv, tp.Var(x_from))
            half_eps2 = 0.5 * model.eps * model.eps
            disp = (x_to - x_from + half_eps2 * grad * scale.value
                    - shift.value) / model.eps
            z0, core = flow_pass(model, pv, target, tp.Var(x_from),
                                 tp.Var(disp), invert=True)
    else:
        disp = (x_to - x_from) / model.eps
        pv = model.const_params()
        with np.errstate(over="ignore", invalid="ignore"):
            z0, core = flow_pass(model, pv, target, tp.Var(x_from),
                                 tp.Var(disp), invert=True)
    d = model.dim
    val = (-0.5 * np.sum(z0.value ** 2, axis=1) - 0.5 * d * LOG_2PI
           - core.value - d * np.log(model.eps))
    val = np.where(np.isfinite(val), val, -np.inf)
    return float(val[0]) if single else val
