'''
Tools for plotting moment series, Lyapunov exponent samples and clustering series.
'''

from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd


def _save(fig, plot_path: Path | None) -> Path | None:
    if plot_path is None:
        return None
    plot_path = Path(plot_path)
    plot_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(plot_path, dpi=120, bbox_inches='tight')
    plt.close(fig)
    return plot_path


def plot_moment_series(
    moments: pd.DataFrame,
    title: str | None = None,
    fit: dict | None = None,
    plot_path: Path | None = None,
):
    '''
    Plot ln M_p(t) against t, one line per p, with replicas averaged.

    Args:
        moments (pandas.DataFrame): Moment table with columns replica, p, t, ln_M_p.
        title (str, optional): Figure title.
        fit (dict, optional): Moment-Lyapunov fit as written by the intermittency
            stage; when given, the fitted slopes are shown in the legend.
        plot_path (Path, optional): If given, the figure is saved there and closed.

    Returns:
        The matplotlib figure, or the saved path when plot_path is given.
    '''
    fig, ax = plt.subplots(figsize=(8, 5))

    slopes = {}
    if fit is not None:
        slopes = dict(zip(fit['p'], fit['lambda_p'], strict=True))

    for p, group in moments.groupby('p'):
        mean = group.groupby('t')['ln_M_p'].mean()
        label = f'p = {p:g}'
        if p in slopes:
            label += f', $\\lambda_p$ = {slopes[p]:.3g}'
        ax.plot(mean.index, mean.values, label=label)

    ax.set_xlabel('t')
    ax.set_ylabel(r'$\ln M_p(t)$')
    ax.set_title(title or 'Moments of the transported density')
    ax.grid(True, linestyle='--', linewidth=0.5)
    ax.legend()

    if plot_path is None:
        return fig
    return _save(fig, plot_path)


def plot_lyapunov_samples(
    samples,
    lambda_hat: float,
    stderr: float,
    reference: float | None = None,
    title: str | None = None,
    plot_path: Path | None = None,
):
    '''
    Histogram of per-replica finite-time Lyapunov exponents.

    The pooled estimate is drawn with its 3-standard-error band; ``reference`` (for
    instance the closed-form exponent) is drawn as a dashed line.
    '''
    samples = np.asarray(samples, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(8, 5))

    ax.hist(samples, bins=max(5, int(np.sqrt(samples.size))), color='0.7', edgecolor='k')
    ax.axvline(lambda_hat, color='C0', label=f'$\\hat\\lambda$ = {lambda_hat:.4g}')
    ax.axvspan(lambda_hat - 3 * stderr, lambda_hat + 3 * stderr, color='C0', alpha=0.2)
    if reference is not None:
        ax.axvline(reference, color='C3', linestyle='--', label=f'closed form = {reference:.4g}')

    ax.set_xlabel(r'$\ln\det Dx(u, T) / T$')
    ax.set_ylabel('replicas')
    ax.set_title(title or 'Finite-time Lyapunov exponents')
    ax.legend()

    if plot_path is None:
        return fig
    return _save(fig, plot_path)


def plot_clustering(
    clustering: pd.DataFrame,
    title: str | None = None,
    plot_path: Path | None = None,
):
    '''Plot gamma(mu_t^N, delta_probe) against t on a log scale.'''
    fig, ax = plt.subplots(figsize=(8, 5))

    gamma = clustering['gamma'].to_numpy()
    ax.plot(clustering['t'], np.maximum(gamma, np.finfo(float).tiny))
    ax.set_yscale('log')
    ax.set_xlabel('t')
    ax.set_ylabel(r'$\gamma(\mu_t^N, \delta_{x(v, t)})$')
    ax.set_title(title or 'Clustering of the particle ensemble around a probe')
    ax.grid(True, which='both', linestyle='--', linewidth=0.5)

    if plot_path is None:
        return fig
    return _save(fig, plot_path)


def plot_verdicts(report: pd.DataFrame, plot_path: Path | None = None):
    '''Bar chart of lambda_hat per experiment, coloured by the intermittency verdict.'''
    fig, ax = plt.subplots(figsize=(8, 5))

    colors = ['C3' if v == 'intermittent' else 'C0' for v in report['verdict']]
    ax.bar(report['name'], report['lambda_hat'], yerr=3 * report['stderr'], color=colors)
    ax.axhline(0.0, color='k', linewidth=0.5)
    ax.set_ylabel(r'$\hat\lambda$')
    ax.set_title('Lyapunov exponents (red: intermittent)')

    if plot_path is None:
        return fig
    return _save(fig, plot_path)
