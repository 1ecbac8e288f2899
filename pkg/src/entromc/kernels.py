"""Metropolis-Hastings machinery and classical baseline kernels.

All kernels share one stream discipline: each chain consumes exactly d
standard normals (proposal noise / momentum) and then one uniform (the accept
draw) per step, from its own spawned Generator. Two kernels run from the same
seed therefore see identical randomness, which is what makes the
MALA-equivalence check on the zero-initialized flow exact.
"""

import numpy as np

from . import flow as flow_mod

LOG_2PI = float(np.log(2.0 * np.pi))


class ChainState:
    """Single-chain state: position and its (cached) energy."""

    __slots__ = ("x", "energy")

    def __init__(self, x, energy):
        self.x = np.asarray(x, dtype=float)
        self.energy = float(energy)


class KernelOutcome:
    """One batched proposal from any kernel."""

    def __init__(self, x_prime, log_accept, energy, energy_prime, extras=None):
        self.x_prime = x_prime
        self.log_accept = log_accept
        self.energy = energy
        self.energy_prime = energy_prime
        self.extras = extras or {}


def _finish_outcome(x_prime, delta, energy, energy_prime, extras=None):
    with np.errstate(invalid="ignore"):
        log_accept = np.minimum(delta, 0.0)
    log_accept = np.where(np.isnan(log_accept), -np.inf, log_accept)
    bad = ~np.isfinite(x_prime).all(axis=1)
    log_accept = np.where(bad, -np.inf, log_accept)
    return KernelOutcome(x_prime, log_accept, energy, energy_prime, extras)


class NeuralProposer:
    """Flow proposal wrapped as an MH kernel."""

    name = "neural"

    def __init__(self, model):
        self.model = model

    @property
    def grads_per_step(self):
        return self.model.grad_evals_per_proposal

    def propose_batch(self, target, x, z0):
        out = flow_mod.propose(self.model, target, x, z0=z0)
        return KernelOutcome(out.x_prime, out.log_accept, out.energy,
                             out.energy_prime,
                             {"log_q_fwd": out.log_q_fwd,
                              "log_q_rev": out.log_q_rev})


class RWMProposer:
    """Isotropic Gaussian random walk; symmetric, no gradients."""

    name = "rwm"
    grads_per_step = 0

    def __init__(self, step_size):
        self.step_size = float(step_size)

    def propose_batch(self, target, x, z0):
        x_prime = x + self.step_size * z0
        energy = target.energy(x)
        energy_prime = target.energy(x_prime)
        return _finish_outcome(x_prime, energy - energy_prime,
                               energy, energy_prime)


class MALAProposer:
    """Langevin proposal x' = x + eps z - (eps^2/2) grad U(x) with the exact
    asymmetric correction; two gradient evaluations per step."""

    name = "mala"
    grads_per_step = 2

    def __init__(self, step_size):
        self.step_size = float(step_size)

    def propose_batch(self, target, x, z0):
        eps = self.step_size
        d = x.shape[1]
        g = target.gradient(x)
        x_prime = x + eps * z0 - 0.5 * eps * eps * g
        log_q_fwd = -0.5 * np.sum(z0 * z0, axis=1) - 0.5 * d * LOG_2PI \
            - d * np.log(eps)
        with np.errstate(invalid="ignore", over="ignore"):
            z0_rev = -(x_prime - x) / eps \
                + 0.5 * eps * target.gradient(x_prime)
            log_q_rev = -0.5 * np.sum(z0_rev * z0_rev, axis=1) \
                - 0.5 * d * LOG_2PI - d * np.log(eps)
            energy = target.energy(x)
            energy_prime = target.energy(x_prime)
            delta = (energy - energy_prime) + (log_q_rev - log_q_fwd)
        return _finish_outcome(x_prime, delta, energy, energy_prime,
                               {"log_q_fwd": log_q_fwd,
                                "log_q_rev": log_q_rev})


class HMCProposer:
    """Leapfrog Hamiltonian kernel; z0 is the momentum draw. Boundary
    gradients are shared between leapfrog iterations, so each proposal costs
    n_leapfrog + 1 gradient evaluations. step_size may be a scalar or a
    per-chain array (used by the funnel neck tuner)."""

    name = "hmc"

    def __init__(self, step_size, n_leapfrog):
        if n_leapfrog < 1:
            raise ValueError("n_leapfrog must be >= 1")
        self.step_size = step_size
        self.n_leapfrog = int(n_leapfrog)

    @property
    def grads_per_step(self):
        return self.n_leapfrog + 1

    def _eps_column(self, n_rows):
        eps = np.asarray(self.step_size, dtype=float)
        if eps.ndim == 0:
            return float(eps)
        if eps.shape != (n_rows,):
            raise ValueError("per-chain step_size must have one entry "
                             "per chain")
        return eps[:, None]

    def propose_batch(self, target, x, z0):
        eps = self._eps_column(x.shape[0])
        v = z0.copy()
        xc = x.copy()
        with np.errstate(invalid="ignore", over="ignore"):
            g = target.gradient(xc)
            for _ in range(self.n_leapfrog):
                v = v - 0.5 * eps * g
                xc = xc + eps * v
                g = target.gradient(xc)
                v = v - 0.5 * eps * g
            energy = target.energy(x)
            energy_prime = target.energy(xc)
            kin0 = 0.5 * np.sum(z0 * z0, axis=1)
            kin1 = 0.5 * np.sum(v * v, axis=1)
            delta = (energy + kin0) - (energy_prime + kin1)
        return _finish_outcome(xc, delta, energy, energy_prime,
                               {"v_final": v})


def mh_step(proposer, target, state, rng):
    """One accept/reject step of a single chain. Consumes d normals then one
    uniform from rng. Returns (new_state, info dict)."""
    d = state.x.shape[0]
    z0 = rng.standard_normal(d)
    u = rng.uniform()
    out = proposer.propose_batch(target, state.x[None, :], z0[None, :])
    la = float(out.log_accept[0])
    with np.errstate(divide="ignore"):
        log_u = np.log(u)  # u == 0 gives -inf: accept anything finite
    accepted = bool(log_u < la)
    if accepted:
        new_state = ChainState(out.x_prime[0], out.energy_prime[0])
    else:
        new_state = ChainState(state.x, state.energy)
    info = {
        "accepted": accepted,
        "log_accept": la,
        "accept_prob": float(np.exp(la)),
        "x_prime": out.x_prime[0],
    }
    return new_state, info


def adapt_step_size(step_size, accept_mean, target_accept, rate=0.05,
                    lo=1e-8, hi=1e3):
    """Multiplicative step-size controller used during warmup."""
    new = step_size * np.exp(rate * (accept_mean - target_accept))
    return float(np.clip(new, lo, hi))


def init_chains(target, n_chains, rng):
    """Starting positions: exact draws when the target has a sampler, else
    N(0, 4 I)."""
    if target.has_exact_sampler:
        return target.exact_sample(rng, n_chains)
    return 2.0 * rng.standard_normal((n_chains, target.dim))


class ChainResult:
    """Batched run output. trace has shape (n_chains, kept, len(record_dims))
    and only covers post-warmup, thinned steps."""

    def __init__(self, x_final, energy_final, trace, accept_trace,
                 energy_trace, accept_rate, accept_fraction, grad_evals,
                 n_steps, warmup, thin, record_dims, step_size_final):
        self.x_final = x_final
        self.energy_final = energy_final
        self.trace = trace
        self.accept_trace = accept_trace
        self.energy_trace = energy_trace
        self.accept_rate = accept_rate
        self.accept_fraction = accept_fraction
        self.grad_evals = grad_evals
        self.n_steps = n_steps
        self.warmup = warmup
        self.thin = thin
        self.record_dims = record_dims
        self.step_size_final = step_size_final


def run_chains(proposer, target, x0, n_steps, seed, *, warmup=0,
               adapt_target=None, record=True, record_dims=None, thin=1,
               stream="per-chain", progress_every=0):
    """Run n_chains lockstep chains for warmup + n_steps MH steps.

    seed: int or SeedSequence; per-chain Generators are spawned from it so
    chain streams are independent of the batch size. stream="pooled" draws
    from a single Generator instead (faster, no cross-kernel equivalence).
    During warmup, if adapt_target is set and the proposer has a scalar
    step_size, it is adapted each step toward that accept rate and then
    frozen.
    """
    x = np.array(x0, dtype=float)
    if x.ndim != 2:
        raise ValueError("x0 must be (n_chains, dim)")
    n_chains, d = x.shape
    if isinstance(seed, (list, tuple)):
        # pre-spawned per-chain seed sequences (lets a caller split chains
        # into groups without changing any chain's stream)
        if stream != "per-chain":
            raise ValueError("per-chain seed list needs stream='per-chain'")
        if len(seed) != n_chains:
            raise ValueError("need one seed sequence per chain")
        rngs = [np.random.default_rng(s) for s in seed]
        pooled = None
    else:
        if not isinstance(seed, np.random.SeedSequence):
            seed = np.random.SeedSequence(seed)
        if stream == "per-chain":
            rngs = [np.random.default_rng(s) for s in seed.spawn(n_chains)]
            pooled = None
        elif stream == "pooled":
            rngs = None
            pooled = np.random.default_rng(seed)
        else:
            raise ValueError("stream must be 'per-chain' or 'pooled'")

    if adapt_target is not None and np.ndim(
            getattr(proposer, "step_size", None)) != 0:
        raise ValueError("adaptation needs a scalar step_size")

    dims = list(range(d)) if record_dims is None else list(record_dims)
    total = warmup + n_steps
    kept = (n_steps + thin - 1) // thin if record else 0
    trace = np.empty((n_chains, kept, len(dims))) if record else None
    accept_trace = np.empty((n_chains, kept)) if record else None
    energy_trace = np.empty((n_chains, kept)) if record else None

    grad_before = target.grad_eval_count
    energy = target.energy(x)
    prob_sum = np.zeros(n_chains)
    acc_sum = np.zeros(n_chains)
    k = 0
    for step in range(total):
        if rngs is not None:
            z0 = np.stack([r.standard_normal(d) for r in rngs])
            u = np.array([r.uniform() for r in rngs])
        else:
            z0 = pooled.standard_normal((n_chains, d))
            u = pooled.uniform(size=n_chains)
        out = proposer.propose_batch(target, x, z0)
        with np.errstate(divide="ignore"):
            log_u = np.log(u)
        acc = log_u < out.log_accept
        x = np.where(acc[:, None], out.x_prime, x)
        energy = np.where(acc, out.energy_prime, out.energy)
        prob = np.exp(out.log_accept)
        in_warmup = step < warmup
        if in_warmup and adapt_target is not None:
            proposer.step_size = adapt_step_size(
                proposer.step_size, float(prob.mean()), adapt_target)
        if not in_warmup:
            prob_sum += prob
            acc_sum += acc
            pos = step - warmup
            if record and pos % thin == 0:
                trace[:, k, :] = x[:, dims]
                accept_trace[:, k] = prob
                energy_trace[:, k] = energy
                k += 1
        if progress_every and (step + 1) % progress_every == 0:
            print(f"  step {step + 1}/{total}", flush=True)
    grad_evals = target.grad_eval_count - grad_before
    return ChainResult(
        x_final=x,
        energy_final=energy,
        trace=trace,
        accept_trace=accept_trace,
        energy_trace=energy_trace,
        accept_rate=float(prob_sum.mean() / max(n_steps, 1)),
        accept_fraction=float(acc_sum.mean() / max(n_steps, 1)),
        grad_evals=grad_evals,
        n_steps=n_steps,
        warmup=warmup,
        thin=thin,
        record_dims=dims,
        step_size_final=np.copy(getattr(proposer, "step_size", np.nan)),
    )


def tune_hmc_neck(target, sigma, n_leapfrog, seed, *, eps_hi=1.0,
                  n_candidates=12, n_chains=16, n_steps=50_000,
                  check_every=1000):
    """Pick the largest HMC step size on a sqrt(2)-spaced grid (descending
    from eps_hi) whose chains demonstrably travel deep along the funnel axis
    within the step budget.

    A candidate passes if, at some checkpoint, the pooled x0 5th percentile
    of its trace so far is below -2 sigma. The equilibrium 5th percentile of
    N(0, sigma^2) is -1.645 sigma, so a fully mixed chain only crosses that
    line through early-run quantile wander; as a same-threshold fallback a
    candidate also passes if its pooled x0 minimum went below -2 sigma (the
    plain "reached the deep region" reading). Chains start at the origin so a
    frozen (unstable, always-rejecting) step size cannot pass by inheriting
    spread from its initialization. All candidates run as one batch with
    per-row step sizes.
    """
    grid = eps_hi / np.sqrt(2.0) ** np.arange(n_candidates)
    rows = np.repeat(grid, n_chains)
    prop = HMCProposer(rows, n_leapfrog)
    x = np.zeros((len(rows), target.dim))
    passed_q = np.zeros(len(grid), dtype=bool)
    passed_min = np.zeros(len(grid), dtype=bool)
    x0_hist = []
    for start in range(0, n_steps, check_every):
        res = run_chains(prop, target, x, check_every,
                         np.random.SeedSequence((seed, start)),
                         record_dims=[0], stream="pooled")
        x = res.x_final
        x0_hist.append(res.trace[:, :, 0])
        pooled = np.concatenate([h.reshape(len(grid), -1) for h in x0_hist],
                                axis=1)
        q5 = np.percentile(pooled, 5.0, axis=1)
        passed_q |= q5 < -2.0 * sigma
        passed_min |= pooled.min(axis=1) < -2.0 * sigma
        if passed_q[0]:
            # grid is descending: once the largest candidate passes the
            # strict test no later checkpoint can change the answer
            break
    for passed in (passed_q, passed_min):
        if passed.any():
            return float(grid[np.argmax(passed)]), grid, passed
    return float(grid[-1]), grid, passed_min
