"""Training loop for the flow proposal.

The objective per batch point x (one z0 draw each) is
    L(x) = min(0, log accept ratio) + beta * (mask-dependent log-det sum),
maximized by minimizing -mean L. The first term pushes proposals the chain
would accept, the second is the parameter-dependent part of the proposal
entropy; beta is adapted so the running accept estimate tracks a target.
Training points come from the target's exact sampler when it has one,
otherwise from a bootstrap buffer advanced by the sampler being trained.
"""

import numpy as np

from . import flow as flow_mod
from . import tape as tp
from .nets import OptimizerState, adam_step

BETA_MIN = 1e-4
BETA_MAX = 1e4
DELTA_FLOOR = -100.0  # exp(-100) ~ 4e-44: below this a proposal is a certain reject


class TrainConfig:
    """Hyperparameters; defaults are the paper-scale training row."""

    def __init__(self, n_steps=1, width=256, eps=0.1, batch_size=8192,
                 iterations=5000, lr_max=1e-3, lr_min=1e-5,
                 target_accept=0.9, mode="full", stop_grad=False,
                 buffer_size=None, seed=0, beta0=0.1, ema_decay=0.95,
                 kappa_beta=0.1, hidden_depth=2, squash_lambda=6.0,
                 clip_norm=10.0, adam_betas=(0.9, 0.999),
                 train_on_exact=True, checkpoint_every=0,
                 delta_floor=DELTA_FLOOR):
        if not 0.0 < target_accept < 1.0:
            raise ValueError("target_accept must be in (0,1)")
        for name, v in [("n_steps", n_steps), ("width", width), ("eps", eps),
                        ("batch_size", batch_size),
                        ("lr_max", lr_max), ("lr_min", lr_min),
                        ("beta0", beta0)]:
            if v <= 0:
                raise ValueError(f"{name} must be positive")
        if iterations < 0:
            raise ValueError("iterations must be >= 0")
        self.n_steps = int(n_steps)
        self.width = int(width)
        self.eps = float(eps)
        self.batch_size = int(batch_size)
        self.iterations = int(iterations)
        self.lr_max = float(lr_max)
        self.lr_min = float(lr_min)
        self.target_accept = float(target_accept)
        self.mode = mode
        self.stop_grad = bool(stop_grad)
        self.buffer_size = int(buffer_size or batch_size)
        self.seed = int(seed)
        self.beta0 = float(beta0)
        self.ema_decay = float(ema_decay)
        self.kappa_beta = float(kappa_beta)
        self.hidden_depth = int(hidden_depth)
        self.squash_lambda = float(squash_lambda)
        self.clip_norm = float(clip_norm)
        self.adam_betas = tuple(adam_betas)
        self.train_on_exact = bool(train_on_exact)
        self.checkpoint_every = int(checkpoint_every)
        self.delta_floor = float(delta_floor)

    def to_dict(self):
        return dict(self.__dict__)


class TrainerState:
    """Mutable trainer side-state: beta controller, accept EMA, buffer."""

    def __init__(self, beta, target_accept, ema_decay, kappa_beta,
                 buffer=None):
        self.beta = float(beta)
        self.target_accept = float(target_accept)
        self.ema_decay = float(ema_decay)
        self.kappa_beta = float(kappa_beta)
        self.ema_accept = float(target_accept)  # start the loop on target
        self.buffer = buffer
        self.iteration = 0
        self.skipped = 0


def update_beta(state, batch_accept_estimate):
    """EMA update first, then the multiplicative beta step: accept above
    target pushes beta (the entropy weight) up. The default gains (EMA
    horizon ~20 batches, 1%/iteration beta drift per 0.1 accept gap) and a
    starting beta near typical equilibrium values keep the initial
    transient to a couple hundred iterations, so short runs spend their
    budget training at the target accept rate instead of recovering from a
    beta overshoot."""
    est = float(batch_accept_estimate)
    if not 0.0 <= est <= 1.0:
        raise ValueError("accept estimate must be in [0,1]")
    state.ema_accept = (state.ema_decay * state.ema_accept
                       + (1.0 - state.ema_decay) * est)
    state.beta = float(np.clip(
        state.beta * np.exp(state.kappa_beta
                            * (state.ema_accept - state.target_accept)),
        BETA_MIN, BETA_MAX))
    return state


def loss_batch(model, target, x_batch, rng=None, beta=1.0, z0=None,
               tape_mode="full", delta_floor=DELTA_FLOOR):
    """Monte-Carlo loss over a batch, one z0 per x. Returns
    (loss, GradBundle or None, info).

    Two kinds of batch element never reach the objective. Rows whose flow
    evaluation overflows are rebuilt out of the graph entirely: a single
    inf/nan activation poisons every weight gradient through the batched
    matmuls, so masking them after the fact is not enough. Rows with a
    finite log accept ratio below delta_floor are certain rejections
    (exp(delta) underflows to zero) whose linear min(0, delta) gradient
    carries magnitude but no acceptance signal; on heavy-tailed targets a
    handful of such rows can be ~1e19 and swamp the clipped batch gradient
    with noise. Both kinds still count as rejects in accept_estimate so the
    beta controller sees the chain the model would actually run. A step is
    a skip (grads None, info["skip"]) only when overflowed rows are the
    majority; a mostly-certain-reject batch still trains on its sane rows.
    """
    x_batch = np.asarray(x_batch, dtype=float)
    if z0 is None:
        if rng is None:
            raise ValueError("need rng or an explicit z0")
        z0 = rng.standard_normal(x_batch.shape)
    n_total = len(x_batch)

    def build(x, z):
        tape = tp.Tape(mode=tape_mode)
        leaves = {k: tape.leaf(k, v) for k, v in model.params.items()}
        pieces = flow_mod.propose_vars(model, leaves, target,
                                       tp.Var(x), tp.Var(z))
        return tape, pieces

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        tape, pieces = build(x_batch, z0)
        delta_v = pieces["delta"].value
        core_v = pieces["log_det_fwd_core"].value
        finite = np.isfinite(delta_v) & np.isfinite(core_v)
        n_nonfinite = int((~finite).sum())
        info = {
            "n_nonfinite": n_nonfinite,
            "n_total": n_total,
            "skip": n_nonfinite > n_total // 2,
        }
        if info["skip"]:
            info["n_dropped"] = n_nonfinite
            return float("nan"), None, info
        if n_nonfinite:
            tape, pieces = build(x_batch[finite], z0[finite])
            delta_v = pieces["delta"].value
            core_v = pieces["log_det_fwd_core"].value
        in_range = delta_v >= delta_floor
        info["n_dropped"] = n_nonfinite + int((~in_range).sum())
        if not in_range.any():
            info["skip"] = True
            return float("nan"), None, info
        accept_bound = tp.minzero(pieces["delta"])
        objective = accept_bound + beta * pieces["log_det_fwd_core"]
        loss = -tp.masked_mean(objective, in_range)
        grads = tape.backward(loss)
    d = model.dim
    const = 0.5 * d * np.log(2.0 * np.pi * np.e) + d * np.log(model.eps)
    acc = np.exp(np.minimum(delta_v, 0.0))  # underflows to 0 past the floor
    info["accept_estimate"] = float(acc.sum() / n_total)
    info["entropy_core"] = float(core_v.mean())
    info["entropy_estimate"] = const + info["entropy_core"]
    info["mean_accept_bound"] = float(
        np.minimum(delta_v, 0.0)[in_range].mean())
    return float(loss.value), grads, info


def init_buffer(target, size, rng):
    if target.has_exact_sampler:
        return target.exact_sample(rng, size)
    return 2.0 * rng.standard_normal((size, target.dim))


def buffer_refresh(state, model, target, rng, batch_size):
    """Draw batch_size buffer slots, advance each one MH step with the
    current model, write back, and hand out the pre-update points as the
    training batch."""
    buf = state.buffer
    replace = batch_size > len(buf)
    idx = rng.choice(len(buf), size=batch_size, replace=replace)
    x = buf[idx].copy()
    z0 = rng.standard_normal(x.shape)
    u = rng.uniform(size=len(x))
    out = flow_mod.propose(model, target, x, z0=z0)
    with np.errstate(divide="ignore"):
        acc = np.log(u) < out.log_accept
    buf[idx] = np.where(acc[:, None], out.x_prime, x)
    return x


class TrainingLog:
    COLUMNS = ("iter", "loss", "entropy_estimate", "accept_ema", "beta",
               "lr", "skipped", "entropy_core")

    def __init__(self):
        self.rows = []
        self.unstable = False

    def append(self, **kw):
        self.rows.append(tuple(kw[c] for c in self.COLUMNS))

    def column(self, name):
        j = self.COLUMNS.index(name)
        return np.array([r[j] for r in self.rows])

    @property
    def skipped_total(self):
        return int(self.column("skipped").sum()) if self.rows else 0

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for row in self.rows:
                fh.write(",".join(
                    str(int(v)) if c in ("iter", "skipped") else f"{v:.10g}"
                    for c, v in zip(self.COLUMNS, row)) + "\n")

    def tail_mean(self, name, frac=0.1):
        col = self.column(name)
        k = max(1, int(len(col) * frac))
        return float(np.nanmean(col[-k:]))


def train(config, target, *, on_checkpoint=None, progress_every=0):
    """Full training run; deterministic given config.seed. Returns
    (model, TrainingLog). If more than 10% of iterations were skipped the
    log is marked unstable."""
    root = np.random.SeedSequence(config.seed)
    init_ss, data_ss = root.spawn(2)
    model = flow_mod.make_model(
        target.dim, config.n_steps, config.width, config.eps,
        mode=config.mode, rng=np.random.default_rng(init_ss),
        hidden_depth=config.hidden_depth,
        squash_lambda=config.squash_lambda)
    rng = np.random.default_rng(data_ss)
    opt = OptimizerState(model.params, config.lr_max, config.lr_min,
                         max(config.iterations, 1),
                         betas=config.adam_betas,
                         clip_norm=config.clip_norm)
    use_exact = config.train_on_exact and target.has_exact_sampler
    state = TrainerState(config.beta0, config.target_accept,
                         config.ema_decay, config.kappa_beta)
    if not use_exact:
        state.buffer = init_buffer(target, config.buffer_size, rng)
    log = TrainingLog()
    tape_mode = "stop-grad" if config.stop_grad else "full"
    for it in range(config.iterations):
        if use_exact:
            x = target.exact_sample(rng, config.batch_size)
        else:
            x = buffer_refresh(state, model, target, rng, config.batch_size)
        z0 = rng.standard_normal((config.batch_size, target.dim))
        beta_used = state.beta
        loss, grads, info = loss_batch(model, target, x, beta=beta_used,
                                       z0=z0, tape_mode=tape_mode,
                                       delta_floor=config.delta_floor)
        lr = opt.current_lr()
        skipped = info["skip"]
        if not skipped and not np.isfinite(grads.global_norm):
            skipped = True
        if skipped:
            state.skipped += 1
            log.append(iter=it, loss=float("nan"),
                       entropy_estimate=float("nan"), accept_ema=state.ema_accept,
                       beta=beta_used, lr=lr, skipped=1,
                       entropy_core=float("nan"))
        else:
            adam_step(model.params, grads, opt)
            update_beta(state, info["accept_estimate"])
            log.append(iter=it, loss=loss,
                       entropy_estimate=info["entropy_estimate"],
                       accept_ema=state.ema_accept, beta=beta_used, lr=lr,
                       skipped=0, entropy_core=info["entropy_core"])
        state.iteration = it + 1
        if (on_checkpoint and config.checkpoint_every
                and (it + 1) % config.checkpoint_every == 0):
            on_checkpoint(model, it + 1)
        if progress_every and (it + 1) % progress_every == 0:
            print(f"  iter {it + 1}/{config.iterations} "
                  f"loss {loss:.4f} ema {state.ema_accept:.3f} "
                  f"beta {state.beta:.3g}", flush=True)
    if config.iterations and state.skipped > 0.1 * config.iterations:
        log.unstable = True
    log.trainer_state = state
    return model, log
