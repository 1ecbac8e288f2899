"""Report figures rendered straight to PNG files (headless backend)."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def training_figure(log, path):
    """Loss, entropy estimate, and accept-EMA/beta panels over iterations."""
    it = log.column("iter")
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    axes[0].plot(it, log.column("loss"), lw=0.8)
    axes[0].set_title("loss")
    axes[1].plot(it, log.column("entropy_estimate"), lw=0.8, color="tab:green")
    axes[1].set_title("proposal entropy est.")
    ax2 = axes[2]
    ax2.plot(it, log.column("accept_ema"), lw=0.8, color="tab:blue",
             label="accept EMA")
    ax2.set_ylim(0, 1)
    ax2b = ax2.twinx()
    ax2b.plot(it, log.column("beta"), lw=0.8, color="tab:red", label="beta")
    ax2b.set_yscale("log")
    ax2.set_title("accept EMA / beta")
    for ax in axes:
        ax.set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def trace_figure(trace, path, sigma=None, dim_label="x0"):
    """One chain's coordinate trace plus the pooled marginal histogram;
    with sigma given, overlays the N(0, sigma^2) density."""
    trace = np.asarray(trace)
    if trace.ndim == 1:
        trace = trace[None, :]
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.2),
                             gridspec_kw={"width_ratios": [2, 1]})
    axes[0].plot(trace[0], lw=0.5)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel(dim_label)
    axes[0].set_title(f"chain trace of {dim_label}")
    pooled = trace.reshape(-1)
    axes[1].hist(pooled, bins=60, density=True, alpha=0.7)
    if sigma is not None:
        grid = np.linspace(pooled.min(), pooled.max(), 400)
        pdf = np.exp(-0.5 * (grid / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))
        axes[1].plot(grid, pdf, "k-", lw=1.2)
    axes[1].set_title(f"marginal of {dim_label}")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def ablation_figure(curves, path):
    """Entropy-vs-iteration curves per variant; curves maps label ->
    (iterations, entropy_estimates)."""
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for label, (it, ent) in curves.items():
        ax.plot(it, ent, lw=0.9, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("proposal entropy est.")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
