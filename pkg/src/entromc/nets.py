"""Conditioning networks and their optimizer.

Each network has input and output layers indexed by (flow step, substep side)
over a hidden trunk shared across steps. Output layers start at exactly zero
so the whole sampler reduces to MALA at initialization. Training uses Adam
with global-norm gradient clipping and a cosine learning-rate schedule.
"""

import numpy as np

from . import tape as tp


class ConditionerNet:
    """MLP with per-(step, side) input/output layers and shared hidden layers.

    Apply expects a mapping of parameter name -> tape Var (constants are fine
    for sampling); parameter names are all prefixed with the net's name, so
    several nets can share one flat parameter dict.
    """

    def __init__(self, name, in_dim, out_dim, width, n_steps, hidden_depth=2):
        if hidden_depth < 1:
            raise ValueError("hidden_depth must be >= 1")
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.width = width
        self.n_steps = n_steps
        self.hidden_depth = hidden_depth

    def param_shapes(self):
        shapes = {}
        for n in range(self.n_steps):
            for s in (0, 1):
                shapes[f"{self.name}.in{n}s{s}.w"] = (self.in_dim, self.width)
                shapes[f"{self.name}.in{n}s{s}.b"] = (self.width,)
                shapes[f"{self.name}.out{n}s{s}.w"] = (self.width, self.out_dim)
                shapes[f"{self.name}.out{n}s{s}.b"] = (self.out_dim,)
        for k in range(self.hidden_depth):
            shapes[f"{self.name}.h{k}.w"] = (self.width, self.width)
            shapes[f"{self.name}.h{k}.b"] = (self.width,)
        return shapes

    def init_params(self, rng):
        """Uniform fan-in init for input/hidden layers, exact zeros for every
        output layer (so outputs are identically zero at start)."""
        params = {}
        for name, shape in self.param_shapes().items():
            if ".out" in name:
                params[name] = np.zeros(shape)
                continue
            if len(shape) == 2:
                fan_in = shape[0]
            else:
                # biases use the fan-in of their layer's weight matrix
                fan_in = self.in_dim if ".in" in name else self.width
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        return params

    def apply(self, params, step, side, x):
        """Forward pass for one (step, side); x is a (B, in_dim) Var."""
        if not 0 <= step < self.n_steps:
            raise ValueError(f"step {step} out of range [0, {self.n_steps})")
        if side not in (0, 1):
            raise ValueError("side must be 0 or 1")
        pre = f"{self.name}.in{step}s{side}"
        h = tp.elu(tp.affine(x, params[f"{pre}.w"], params[f"{pre}.b"]))
        for k in range(self.hidden_depth):
            h = tp.elu(tp.affine(h, params[f"{self.name}.h{k}.w"],
                                 params[f"{self.name}.h{k}.b"]))
        pre = f"{self.name}.out{step}s{side}"
        return tp.affine(h, params[f"{pre}.w"], params[f"{pre}.b"])


class OptimizerState:
    """Adam accumulators plus the clip/schedule constants."""

    def __init__(self, params, lr_max, lr_min, total_steps,
                 betas=(0.9, 0.999), clip_norm=10.0, eps=1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.total_steps = total_steps
        self.betas = betas
        self.clip_norm = clip_norm
        self.eps = eps

    def current_lr(self):
        frac_step = min(self.step, self.total_steps)
        return cosine_lr(frac_step, self.total_steps, self.lr_max, self.lr_min)


def cosine_lr(step, total, lr_max, lr_min):
    """Cosine annealing from lr_max at step 0 to lr_min at step=total."""
    if not 0 <= step <= total:
        raise ValueError("step must lie in [0, total]")
    return lr_min + (lr_max - lr_min) * (1.0 + np.cos(np.pi * step / total)) / 2.0


def clip_by_global_norm(grads, clip_norm):
    """Scale factor in (0, 1] that caps the bundle's global L2 norm."""
    norm = grads.global_norm
    if norm > clip_norm:
        return clip_norm / norm
    return 1.0


def adam_step(params, grads, opt):
    """One Adam update in place: clip by global norm, then bias-corrected
    moments at the current cosine learning rate. Returns params."""
    scale = clip_by_global_norm(grads, opt.clip_norm)
    lr = opt.current_lr()
    opt.step += 1
    b1, b2 = opt.betas
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for k in params:
        g = grads[k] * scale
        m = opt.m[k]
        v = opt.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return params
