"""Analytic target distributions: energies, gradients, Hessian-vector products.

Every target is an unnormalized density p(x) = exp(-U(x)) with U known up to an
additive constant (all samplers only ever use energy differences). energy,
gradient and hvp accept a single point of shape (d,) or a batch (B, d); batch
calls count one gradient/hvp evaluation per row.
"""

import csv
import os
import threading

import numpy as np
from scipy.special import expit


class EvalCounter:
    """Monotone evaluation counter, safe for chain-parallel use.

    Tracks both invocations and evaluated points (a batched call is one
    invocation, B points). Exact totals are only read after runs finish.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.calls = 0
        self.points = 0

    def add(self, n_points):
        with self._lock:
            self.calls += 1
            self.points += int(n_points)

    def reset(self):
        with self._lock:
            self.calls = 0
            self.points = 0


class TargetDistribution:
    """Bundle of energy/gradient/hvp callables over batched points.

    The callables passed to the constructor always receive (B, d) arrays and
    return (B,), (B, d), (B, d) respectively. exact_sampler, when present, has
    signature (rng, n) -> (n, d).
    """

    def __init__(self, name, dim, energy_fn, gradient_fn, hvp_fn,
                 exact_sampler=None):
        self.name = name
        self.dim = dim
        self._energy = energy_fn
        self._gradient = gradient_fn
        self._hvp = hvp_fn
        self._exact_sampler = exact_sampler
        self.grad_counter = EvalCounter()
        self.hvp_counter = EvalCounter()

    @property
    def grad_eval_count(self):
        return self.grad_counter.points

    @property
    def hvp_eval_count(self):
        return self.hvp_counter.points

    def reset_counters(self):
        self.grad_counter.reset()
        self.hvp_counter.reset()

    @property
    def has_exact_sampler(self):
        return self._exact_sampler is not None

    def fork(self):
        """Copy sharing the (stateless) callables but with fresh eval
        counters, so concurrent chain groups can count independently."""
        t = TargetDistribution.__new__(TargetDistribution)
        t.__dict__.update(self.__dict__)
        t.grad_counter = EvalCounter()
        t.hvp_counter = EvalCounter()
        return t

    def _batch(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(
                f"expected points of dimension {self.dim}, got shape {x.shape}")
        return x, single

    def energy(self, x):
        """U(x); non-finite values are mapped to +inf (treated as reject)."""
        xb, single = self._batch(x)
        with np.errstate(over="ignore", invalid="ignore"):
            e = np.asarray(self._energy(xb), dtype=float)
        e = np.where(np.isfinite(e), e, np.inf)
        return float(e[0]) if single else e

    def gradient(self, x):
        xb, single = self._batch(x)
        self.grad_counter.add(xb.shape[0])
        with np.errstate(over="ignore", invalid="ignore"):
            g = np.asarray(self._gradient(xb), dtype=float)
        return g[0] if single else g

    def hvp(self, x, v):
        xb, single = self._batch(x)
        vb, _ = self._batch(v)
        if vb.shape != xb.shape:
            raise ValueError("hvp vector shape must match point shape")
        self.hvp_counter.add(xb.shape[0])
        with np.errstate(over="ignore", invalid="ignore"):
            h = np.asarray(self._hvp(xb, vb), dtype=float)
        return h[0] if single else h

    def exact_sample(self, rng, n):
        if self._exact_sampler is None:
            raise ValueError(f"target {self.name!r} has no exact sampler")
        return self._exact_sampler(rng, n)


def make_icg(dim, log10_min=-2.0, log10_max=2.0):
    """Diagonal Gaussian with log-spaced variances, ascending with index."""
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if not (np.isfinite(log10_min) and np.isfinite(log10_max)):
        raise ValueError("variance bounds must be finite")
    if not log10_min < log10_max:
        raise ValueError("log10_min must be < log10_max")
    var = 10.0 ** (log10_min
                   + (log10_max - log10_min) * np.arange(dim) / (dim - 1))
    inv_var = 1.0 / var
    std = np.sqrt(var)

    def energy(x):
        return 0.5 * (x * x) @ inv_var

    def gradient(x):
        return x * inv_var

    def hvp(x, v):
        return v * inv_var

    def sampler(rng, n):
        return rng.standard_normal((n, dim)) * std

    t = TargetDistribution(f"icg{dim}", dim, energy, gradient, hvp, sampler)
    t.variances = var
    return t


def make_scg():
    """2d Gaussian with eigenvalues (100, 0.1), eigenbasis rotated by pi/4."""
    c = s = np.sqrt(0.5)
    rot = np.array([[c, -s], [s, c]])
    cov = rot @ np.diag([100.0, 0.1]) @ rot.T
    prec = rot @ np.diag([1.0 / 100.0, 1.0 / 0.1]) @ rot.T
    chol = np.linalg.cholesky(cov)

    def energy(x):
        return 0.5 * np.sum((x @ prec) * x, axis=1)

    def gradient(x):
        return x @ prec

    def hvp(x, v):
        return v @ prec

    def sampler(rng, n):
        return rng.standard_normal((n, 2)) @ chol.T

    t = TargetDistribution("scg", 2, energy, gradient, hvp, sampler)
    t.covariance = cov
    return t


# beyond this the conditional-variance factor exp(2*x0) overflows float64
_FUNNEL_OVERFLOW = 700.0


def make_funnel(dim, sigma=3.0):
    """Funnel: x0 ~ N(0, sigma^2), x_i | x0 ~ N(0, exp(-2*x0)) for i >= 1.

    U(x) = x0^2/(2 sigma^2) - (dim-1)*x0 + (exp(2*x0)/2) * sum_{i>=1} x_i^2,
    additive constants dropped. Energy is +inf once 2*x0 overflows exp.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    inv_sig2 = 1.0 / (sigma * sigma)

    def _e2(x0):
        return np.exp(np.minimum(2.0 * x0, _FUNNEL_OVERFLOW))

    def energy(x):
        x0 = x[:, 0]
        rest = 0.5 * np.sum(x[:, 1:] ** 2, axis=1)
        u = 0.5 * x0 * x0 * inv_sig2 - (dim - 1) * x0 + _e2(x0) * rest
        return np.where(2.0 * x0 > _FUNNEL_OVERFLOW, np.inf, u)

    def gradient(x):
        x0 = x[:, 0]
        e2 = _e2(x0)
        g = np.empty_like(x)
        g[:, 0] = x0 * inv_sig2 - (dim - 1) + e2 * np.sum(x[:, 1:] ** 2, axis=1)
        g[:, 1:] = e2[:, None] * x[:, 1:]
        return g

    def hvp(x, v):
        x0 = x[:, 0]
        e2 = _e2(x0)
        rest2 = np.sum(x[:, 1:] ** 2, axis=1)
        cross = np.sum(x[:, 1:] * v[:, 1:], axis=1)
        h = np.empty_like(v)
        h[:, 0] = v[:, 0] * (inv_sig2 + 2.0 * e2 * rest2) + 2.0 * e2 * cross
        h[:, 1:] = 2.0 * e2[:, None] * x[:, 1:] * v[:, 0:1] + e2[:, None] * v[:, 1:]
        return h

    def sampler(rng, n):
        x = np.empty((n, dim))
        x[:, 0] = sigma * rng.standard_normal(n)
        x[:, 1:] = rng.standard_normal((n, dim - 1)) * np.exp(-x[:, 0])[:, None]
        return x

    t = TargetDistribution(f"funnel{dim}", dim, energy, gradient, hvp, sampler)
    t.sigma = sigma
    return t


class DatasetTable:
    """Standardized classification table: z-scored features plus an intercept
    column (last), labels in {-1, +1}."""

    def __init__(self, features, labels, name="dataset"):
        self.features = np.asarray(features, dtype=float)
        self.labels = np.asarray(labels, dtype=float)
        self.name = name
        if self.features.ndim != 2:
            raise ValueError("features must be 2-d")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must align with feature rows")
        if not np.all(np.isin(self.labels, (-1.0, 1.0))):
            raise ValueError("labels must be -1/+1")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def k(self):
        return self.features.shape[1]


def load_dataset_csv(path):
    """Load a labeled CSV (header row, numeric body, label in the last column).

    Labels 0/1 are mapped to -1/+1; labels already in -1/+1 pass through.
    Feature columns are z-scored with the (n-1)-denominator std and an
    intercept column of ones is appended last.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if len(rows) < 2:
        raise ValueError(f"{path}: empty dataset (need header plus rows)")
    header, body = rows[0], rows[1:]
    width = len(header)
    data = np.empty((len(body), width))
    for i, row in enumerate(body):
        if len(row) != width:
            raise ValueError(f"{path}: row {i + 2} has {len(row)} cells, "
                             f"expected {width}")
        for j, cell in enumerate(row):
            try:
                data[i, j] = float(cell)
            except ValueError:
                raise ValueError(
                    f"{path}: non-numeric cell {cell!r} at row {i + 2}, "
                    f"column {header[j]!r}") from None
    raw_labels = data[:, -1]
    values = set(np.unique(raw_labels))
    if values <= {0.0, 1.0}:
        labels = np.where(raw_labels > 0.5, 1.0, -1.0)
    elif values <= {-1.0, 1.0}:
        labels = raw_labels.copy()
    else:
        raise ValueError(f"{path}: labels must be 0/1 or -1/+1, got {values}")
    feats = data[:, :-1]
    std = feats.std(axis=0, ddof=1)
    dead = np.flatnonzero(std == 0.0)
    if dead.size:
        raise ValueError(f"{path}: zero-variance column {header[dead[0]]!r}")
    feats = (feats - feats.mean(axis=0)) / std
    feats = np.hstack([feats, np.ones((feats.shape[0], 1))])
    name = os.path.splitext(os.path.basename(path))[0]
    return DatasetTable(feats, labels, name=name)


def make_blr(data, prior_variance=100.0):
    """Bayesian logistic regression posterior over coefficients theta.

    U(theta) = sum_i log(1 + exp(-y_i theta.x_i)) + |theta|^2/(2 prior_variance),
    with the intercept penalized like every other coefficient.
    """
    if prior_variance <= 0:
        raise ValueError("prior_variance must be positive")
    x_mat = data.features
    y = data.labels
    k = data.k
    inv_pv = 1.0 / prior_variance

    def energy(theta):
        m = -(theta @ x_mat.T) * y
        return np.logaddexp(0.0, m).sum(axis=1) \
            + 0.5 * inv_pv * np.sum(theta * theta, axis=1)

    def gradient(theta):
        m = -(theta @ x_mat.T) * y
        return (expit(m) * (-y)) @ x_mat + inv_pv * theta

    def hvp(theta, v):
        m = -(theta @ x_mat.T) * y
        sig = expit(m)
        w = sig * (1.0 - sig)
        return (w * (v @ x_mat.T)) @ x_mat + inv_pv * v

    t = TargetDistribution(f"blr-{data.name}", k, energy, gradient, hvp)
    t.dataset = data
    t.prior_variance = prior_variance
    return t
