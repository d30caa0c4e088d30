import io
from typing import Dict, Optional, Sequence

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

from config import Config
from records import atomic_write

plt.rcParams.update({
    'svg.hashsalt': Config.SVG_HASHSALT,
    'svg.fonttype': 'none',
    'font.size': 9,
    'axes.grid': True,
    'grid.alpha': 0.3,
    'lines.linewidth': 1.2,
})


def _save(fig, path: str) -> str:
    buf = io.StringIO()
    fig.tight_layout()
    fig.savefig(buf, format='svg', metadata={'Date': None})
    plt.close(fig)
    return atomic_write(path, buf.getvalue())


def _finite(values, cap: float = Config.SENTINEL) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return np.where(np.isfinite(values) & (values < cap), values, np.nan)


def plot_envelope(xi, f_values, env_values, path: str, title: str = '',
                  breakpoints: Optional[Sequence[float]] = None) -> str:
    """f and f** over a 1D gradient grid."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xi, _finite(f_values), label='f', color='tab:blue')
    ax.plot(xi, _finite(env_values), label='f**', color='tab:red', linestyle='--')
    if breakpoints is not None and len(breakpoints):
        ax.vlines(breakpoints, *ax.get_ylim(), colors='0.6', linewidth=0.5)
    ax.set_xlabel('xi')
    ax.set_ylabel('value')
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_convergence(eps: Sequence[float], series: Dict[str, Sequence[float]], path: str,
                     title: str = 'recovery') -> str:
    """Certificate quantities against the accuracy schedule, log-log, with the line y = eps."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    eps = np.asarray(eps, dtype=float)
    for name, values in series.items():
        values = np.abs(_finite(values))
        values = np.where(values > 0, values, np.nan)
        if np.any(np.isfinite(values)):
            ax.loglog(eps, values, marker='o', markersize=3, label=name)
    ax.loglog(eps, eps, color='0.5', linestyle=':', label='eps')
    ax.invert_xaxis()
    ax.set_xlabel('eps')
    ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_plateaus(traces: Dict[str, Sequence[Sequence[float]]], path: str, title: str = 'best energy') -> str:
    """Best energy per level for each family; ``traces`` maps a label to (resolutions, values)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, (levels, values) in traces.items():
        values = _finite(values)
        positive = np.where(values > 0, values, np.nan)
        if np.any(np.isfinite(positive)):
            ax.loglog(levels, positive, marker='o', markersize=3, label=name)
        else:
            ax.semilogx(levels, values, marker='o', markersize=3, label=name)
    ax.set_xlabel('cells')
    ax.set_ylabel('energy')
    ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)
