import io
import logging
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt
import numpy as np
from sklearn.decomposition import PCA

from metrics import AggregateBand
from persistence import atomic_write_bytes

"""
Static SVG figures: mean curve with a one-standard-deviation band per
series, and a 2-D PCA projection of GameDistill embeddings.
"""

plt.rcParams['svg.hashsalt'] = 'sqloss'
plt.rcParams['font.size'] = 9
plt.rcParams['figure.figsize'] = [6.0, 3.7]


def _save_svg(fig, path: Union[str, Path]) -> Path:
    buffer = io.BytesIO()
    fig.savefig(buffer, format='svg', bbox_inches='tight', metadata={'Date': None})
    plt.close(fig)
    logging.info(f'💾 Saving plot {path}')
    return atomic_write_bytes(path, buffer.getvalue())


def _clean_axes(ax):
    ax.spines['right'].set_visible(False)
    ax.spines['top'].set_visible(False)
    ax.xaxis.set_ticks_position('bottom')
    ax.yaxis.set_ticks_position('left')


def plot_bands(bands: Dict[str, AggregateBand], path: Union[str, Path], ylabel: str, title: str = '',
               cited: Optional[Dict[str, float]] = None) -> Path:
    """One bold mean line and shaded +-1 std region per label; cited values drawn as dashed lines."""
    fig = plt.figure()
    ax = fig.add_subplot(1, 1, 1)
    for label, band in bands.items():
        line, = ax.plot(band.epochs, band.mean, linewidth=2, label=f'{label} (n={band.n_seeds})')
        ax.fill_between(band.epochs, band.mean - band.std, band.mean + band.std, color=line.get_color(), alpha=0.25)
    for label, value in (cited or {}).items():
        ax.axhline(value, linestyle='--', linewidth=1, color='grey', label=f'{label} (cited)')
    ax.set_xlabel('Epoch')
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    _clean_axes(ax)
    ax.legend(frameon=False)
    return _save_svg(fig, path)


def project_2d(embeddings: np.ndarray, seed: int = 0) -> np.ndarray:
    x = np.asarray(embeddings, dtype=float)
    if x.shape[1] <= 2:
        return np.pad(x, ((0, 0), (0, 2 - x.shape[1])))
    return PCA(n_components=2, random_state=seed).fit_transform(x)


def plot_clusters(embeddings: np.ndarray, assignments: np.ndarray, path: Union[str, Path],
                  names: Optional[Sequence[str]] = None, title: str = '') -> Path:
    points = project_2d(embeddings)
    fig = plt.figure()
    ax = fig.add_subplot(1, 1, 1)
    for j in np.unique(assignments):
        label = names[j] if names is not None else f'cluster {j}'
        mask = assignments == j
        ax.scatter(points[mask, 0], points[mask, 1], s=4, alpha=0.6, label=f'{label} ({int(mask.sum())})')
    ax.set_xlabel('PC 1')
    ax.set_ylabel('PC 2')
    if title:
        ax.set_title(title)
    _clean_axes(ax)
    ax.legend(frameon=False, markerscale=3)
    return _save_svg(fig, path)
