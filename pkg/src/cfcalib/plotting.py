"""Figures written next to the CSV reports (non-interactive backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from cfcalib.records import COLUMNS  # noqa: E402
from cfcalib.validation import BAD_K  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_trace(chain, path, columns=None, max_params=6):
    """Log-joint trace on top, first ``max_params`` latents below."""
    k = min(max_params, chain.states.shape[1])
    fig, axes = plt.subplots(k + 1, 1, figsize=(8, 1.6 * (k + 1)), sharex=True)
    axes = np.atleast_1d(axes)
    axes[0].plot(chain.log_joints, lw=0.6, color="k")
    axes[0].set_ylabel("log joint")
    for j in range(k):
        axes[j + 1].plot(chain.states[:, j], lw=0.5)
        axes[j + 1].set_ylabel(columns[j] if columns else f"x{j}", fontsize=7)
    axes[-1].set_xlabel("iteration")
    return _save(fig, path)


def plot_fitness_trace(trace, path, label="best fitness"):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(np.arange(len(trace)), trace, color="C3")
    ax.set_xlabel("generation")
    ax.set_ylabel(label)
    ax.set_yscale("log" if np.all(np.asarray(trace) > 0) else "linear")
    return _save(fig, path)


def plot_lag_histogram(hist, path, max_lag=7):
    lags = np.arange(max_lag + 1)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(lags, [hist.get(int(k), 0) for k in lags], color="C0")
    ax.set_xlabel("consecutive significant PACF lags")
    ax.set_ylabel("instances")
    return _save(fig, path)


def plot_pareto_k(k, path):
    k = np.asarray(k, dtype=float)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    shown = np.where(np.isfinite(k), k, np.nan)
    ax.scatter(np.arange(len(k)), shown, s=6, c=np.where(k > BAD_K, "C3", "C0"))
    ax.axhline(BAD_K, color="C3", ls="--", lw=0.8)
    ax.set_xlabel("data point")
    ax.set_ylabel("Pareto k")
    return _save(fig, path)


def plot_variable_histograms(instances, path, bins=50):
    instances = list(instances)
    fig, axes = plt.subplots(2, 3, figsize=(10, 6))
    for ax, c in zip(axes.ravel(), COLUMNS):
        x = np.concatenate([getattr(i, c) for i in instances])
        ax.hist(x, bins=bins, color="C0")
        ax.set_title(c)
    return _save(fig, path)


def plot_sweep(xs, ys, path, xlabel, ylabel="RMSE", logx=False):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, ys, "o-")
    if logx:
        ax.set_xscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    return _save(fig, path)
