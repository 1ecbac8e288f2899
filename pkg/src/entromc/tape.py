"""Reverse-mode differentiation tape over batched numpy arrays.

Just enough autodiff to train the flow: values are float64 arrays of shape
(B, d), (B, k) or (B,) plus python-float scalars, and the primitive set is
fixed (arithmetic, exp/log/tanh/elu, affine maps, concat/narrow, reductions,
min(0, .), and target-gradient evaluation). The target-gradient node's reverse
rule is a Hessian-vector product in "full" mode and zero in "stop-grad" mode;
forward values are identical in both modes.

A Var with tape=None is a constant: the same ops run on it untracked, so a
taped forward pass and a tape-free one produce bit-identical values.
"""

import numpy as np


class Var:
    """A value on (or off) the tape."""

    __slots__ = ("value", "tape", "uid")

    # keep numpy from absorbing Vars into object arrays; with this set,
    # ndarray <op> Var defers to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, value, tape=None, uid=-1):
        self.value = value
        self.tape = tape
        self.uid = uid

    # small amount of sugar so flow code stays readable
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)


class GradBundle:
    """Per-parameter gradient arrays keyed like the parameter dict."""

    def __init__(self, grads):
        self.grads = grads

    def __getitem__(self, name):
        return self.grads[name]

    def keys(self):
        return self.grads.keys()

    def items(self):
        return self.grads.items()

    @property
    def global_norm(self):
        total = 0.0
        for g in self.grads.values():
            total += float(np.sum(np.square(g)))
        return float(np.sqrt(total))


class Tape:
    """Append-only record of primitive applications, replayed in reverse.

    mode is "full" (target-gradient nodes back-propagate through an HVP) or
    "stop-grad" (those nodes contribute nothing upstream).
    """

    def __init__(self, mode="full"):
        if mode not in ("full", "stop-grad"):
            raise ValueError(f"unknown tape mode {mode!r}")
        self.mode = mode
        self.nodes = []
        self.leaves = {}
        self._next_uid = 0
        self.hvp_backward_calls = 0

    def _var(self, value):
        v = Var(value, self, self._next_uid)
        self._next_uid += 1
        return v

    def leaf(self, name, value):
        """Register a parameter leaf; gradients accumulate under this name."""
        if name in self.leaves:
            raise ValueError(f"duplicate leaf {name!r}")
        v = self._var(np.asarray(value, dtype=float))
        self.leaves[name] = v
        return v

    def record(self, out_value, inputs, vjp):
        out = self._var(out_value)
        self.nodes.append((out.uid, inputs, vjp))
        return out

    def backward(self, loss):
        """Gradients of a scalar loss w.r.t. every registered leaf.

        Replaying twice returns identical bundles; each target_grad node
        triggers exactly one HVP call per replay in full mode, zero in
        stop-grad mode.
        """
        if loss.tape is not self:
            raise ValueError("loss does not belong to this tape")
        adjoint = {loss.uid: 1.0}
        for out_uid, inputs, vjp in reversed(self.nodes):
            g = adjoint.pop(out_uid, None)
            if g is None:
                continue
            for var, contrib in zip(inputs, vjp(g)):
                if contrib is None or var.tape is None:
                    continue
                prev = adjoint.get(var.uid)
                adjoint[var.uid] = contrib if prev is None else prev + contrib
        grads = {}
        for name, leaf in self.leaves.items():
            g = adjoint.get(leaf.uid)
            if g is None:
                g = np.zeros_like(leaf.value)
            grads[name] = np.asarray(g, dtype=float)
        return GradBundle(grads)


def _wrap(x):
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=float) if not np.isscalar(x) else float(x))


def _tape_of(*vars_):
    tape = None
    for v in vars_:
        if v.tape is not None:
            if tape is None:
                tape = v.tape
            elif tape is not v.tape:
                raise ValueError("mixing vars from different tapes")
    return tape


def _emit(tape, value, inputs, vjp):
    if tape is None:
        return Var(value)
    return tape.record(value, inputs, vjp)


def _forbid_tracked_broadcast(value, *operands):
    # adjoints are accumulated without reduction, so a tracked operand must
    # already have the output's shape (constants may broadcast freely)
    for v in operands:
        if v.tape is not None and np.shape(v.value) != np.shape(value):
            raise ValueError(
                f"tracked operand of shape {np.shape(v.value)} would "
                f"broadcast to {np.shape(value)}; not supported")


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    tape = _tape_of(a, b)
    value = a.value + b.value
    _forbid_tracked_broadcast(value, a, b)
    return _emit(tape, value, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    tape = _tape_of(a, b)
    value = a.value - b.value
    _forbid_tracked_broadcast(value, a, b)
    return _emit(tape, value, (a, b), lambda g: (g, -g))


def neg(a):
    a = _wrap(a)
    return _emit(a.tape, -a.value, (a,), lambda g: (-g,))


def mul(a, b):
    """Elementwise product; tracked inputs must broadcast without changing
    their own shape (constants may broadcast freely)."""
    a, b = _wrap(a), _wrap(b)
    tape = _tape_of(a, b)
    value = a.value * b.value
    _forbid_tracked_broadcast(value, a, b)
    av, bv = a.value, b.value

    def vjp(g):
        ga = g * bv if a.tape is not None else None
        gb = g * av if b.tape is not None else None
        return (ga, gb)

    return _emit(tape, value, (a, b), vjp)


def exp(a):
    a = _wrap(a)
    value = np.exp(a.value)
    return _emit(a.tape, value, (a,), lambda g: (g * value,))


def log(a):
    a = _wrap(a)
    av = a.value
    return _emit(a.tape, np.log(av), (a,), lambda g: (g / av,))


def tanh(a):
    a = _wrap(a)
    value = np.tanh(a.value)
    return _emit(a.tape, value, (a,), lambda g: (g * (1.0 - value * value),))


def elu(a):
    a = _wrap(a)
    av = a.value
    value = np.where(av > 0.0, av, np.expm1(av))
    slope = np.where(av > 0.0, 1.0, value + 1.0)
    return _emit(a.tape, value, (a,), lambda g: (g * slope,))


def minzero(a):
    """min(0, a) with subgradient 1 on a<0 and 0 on a>=0."""
    a = _wrap(a)
    av = a.value
    slope = (av < 0.0).astype(float)
    return _emit(a.tape, np.minimum(av, 0.0), (a,), lambda g: (g * slope,))


def square(a):
    a = _wrap(a)
    av = a.value
    return _emit(a.tape, av * av, (a,), lambda g: (2.0 * g * av,))


def affine(x, w, b):
    """x @ w + b over the last axis; x is (B, n_in), w (n_in, n_out), b (n_out,)."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    tape = _tape_of(x, w, b)
    xv, wv = x.value, w.value
    value = xv @ wv + b.value

    def vjp(g):
        gx = g @ wv.T if x.tape is not None else None
        gw = xv.T @ g if w.tape is not None else None
        gb = g.sum(axis=0) if b.tape is not None else None
        return (gx, gw, gb)

    return _emit(tape, value, (x, w, b), vjp)


def concat_last(parts):
    """Concatenate along the last axis."""
    parts = [_wrap(p) for p in parts]
    tape = _tape_of(*parts)
    widths = [p.value.shape[-1] for p in parts]
    value = np.concatenate([p.value for p in parts], axis=-1)
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(
            g[..., offsets[i]:offsets[i + 1]] if p.tape is not None else None
            for i, p in enumerate(parts))

    return _emit(tape, value, tuple(parts), vjp)


def narrow(a, start, size):
    """Slice [start, start+size) of the last axis."""
    a = _wrap(a)
    av = a.value
    value = av[..., start:start + size]

    def vjp(g):
        full = np.zeros_like(av)
        full[..., start:start + size] = g
        return (full,)

    return _emit(a.tape, value, (a,), vjp)


def sum_last(a):
    """(B, d) -> (B,) sum over the last axis."""
    a = _wrap(a)
    av = a.value
    value = av.sum(axis=-1)

    def vjp(g):
        return (np.broadcast_to(np.asarray(g)[..., None], av.shape).copy(),)

    return _emit(a.tape, value, (a,), vjp)


def mean_all(a):
    """Full mean to a python-float scalar."""
    a = _wrap(a)
    av = a.value
    n = av.size
    value = float(av.mean())

    def vjp(g):
        return (np.full_like(av, g / n),)

    return _emit(a.tape, value, (a,), vjp)


def masked_mean(a, valid):
    """Mean of a (B,) vector over a constant boolean mask (dropped batch
    elements contribute nothing, forward or backward)."""
    a = _wrap(a)
    av = a.value
    valid = np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("masked_mean over an empty mask")
    sel = valid.astype(float)
    value = float(av[valid].sum() / n)  # indexed, so dropped NaNs cannot leak

    def vjp(g):
        return (g * sel / n,)

    return _emit(a.tape, value, (a,), vjp)


def target_grad(target, x):
    """Evaluate the target's energy gradient at a (possibly tracked) point.

    Forward: target.gradient(x). Reverse (full mode): adjoint g maps to
    hvp(target, x, g), the exact Jacobian-transpose product of this node;
    in stop-grad mode the node is an autodiff constant.
    """
    x = _wrap(x)
    value = target.gradient(x.value)
    tape = x.tape
    if tape is None:
        return Var(value)
    xv = x.value

    def vjp(g):
        if tape.mode == "stop-grad":
            return (None,)
        tape.hvp_backward_calls += 1
        return (target.hvp(xv, g),)

    return tape.record(value, (x,), vjp)


def target_energy(target, x):
    """Evaluate U at a tracked point; reverse rule is the plain gradient
    (first-order chain rule, active in both tape modes)."""
    x = _wrap(x)
    value = target.energy(x.value)
    if x.tape is None:
        return Var(value)
    xv = x.value

    def vjp(g):
        return (np.asarray(g)[..., None] * target.gradient(xv),)

    return x.tape.record(value, (x,), vjp)


def check_gradients(loss_and_grad_fn, params, epsilon=1e-5, max_entries=10 ** 4,
                    seed=0):
    """Max relative error between analytic and central-difference gradients.

    loss_and_grad_fn(params) must be deterministic and return
    (loss: float, grads: GradBundle). Every parameter entry is probed, or a
    seeded random subsample when the total exceeds max_entries. The relative
    error denominator is max(|fd|, |ad|, 1e-6 * (1 + max |ad|)) so near-zero
    entries of an otherwise O(1) gradient do not dominate spuriously.
    """
    _, bundle = loss_and_grad_fn(params)
    entries = []
    for name in sorted(params.keys()):
        for idx in range(params[name].size):
            entries.append((name, idx))
    if len(entries) > max_entries:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[i] for i in pick]
    scale = max(float(np.max(np.abs(g))) for g in bundle.grads.values())
    floor = 1e-6 * (1.0 + scale)
    worst = 0.0
    for name, idx in entries:
        arr = params[name]
        pos = np.unravel_index(idx, arr.shape)
        keep = arr[pos]
        arr[pos] = keep + epsilon
        up, _ = loss_and_grad_fn(params)
        arr[pos] = keep - epsilon
        dn, _ = loss_and_grad_fn(params)
        arr[pos] = keep
        fd = (up - dn) / (2.0 * epsilon)
        ad = bundle.grads[name].reshape(-1)[idx]
        err = abs(fd - ad) / max(abs(fd), abs(ad), floor)
        worst = max(worst, err)
    return worst
