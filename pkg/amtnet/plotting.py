"""Image output: feature maps and 2-D projections of exported embeddings."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from sklearn.manifold import TSNE  # noqa: E402

from .errors import InvalidInput  # noqa: E402
from .signal_pipeline import FeatureKind, FeatureMap  # noqa: E402

LOGGER = logging.getLogger(__name__)

_FEATURE_TITLES = {
    FeatureKind.SPECTROGRAM: "Amplitude spectrogram",
    FeatureKind.MEL: "Log Mel spectrogram",
    FeatureKind.CQT: "Log constant-Q spectrogram",
}


def plot_feature_map(feature: FeatureMap, path: Union[str, Path], title: Optional[str] = None) -> Path:
    """Time on x, frequency bins on y, lowest bin at the bottom."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    n_frames, n_bins = feature.shape
    duration = n_frames / feature.frame_rate if feature.frame_rate else float(n_frames)
    data = feature.data
    if feature.kind is FeatureKind.SPECTROGRAM:
        data = np.log(data + 1e-8)
    fig, ax = plt.subplots(figsize=(10, 4))
    image = ax.imshow(data.T, origin="lower", aspect="auto", extent=(0.0, duration, 0, n_bins), cmap="magma")
    ax.set_xlabel("Time (s)" if feature.frame_rate else "Frame")
    ax.set_ylabel("Frequency bin")
    if feature.freq_axis is not None and len(feature.freq_axis) == n_bins:
        ticks = np.linspace(0, n_bins - 1, 6).astype(int)
        ax.set_yticks(ticks + 0.5)
        ax.set_yticklabels([f"{feature.freq_axis[t]:.0f}" for t in ticks])
        ax.set_ylabel("Frequency (Hz)")
    ax.set_title(title or _FEATURE_TITLES[feature.kind])
    fig.colorbar(image, ax=ax)
    fig.tight_layout()
    fig.savefig(target, dpi=120)
    plt.close(fig)
    return target


def project_tsne(matrix: np.ndarray, perplexity: float = 30.0, seed: int = 0) -> np.ndarray:
    points = np.asarray(matrix, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 3:
        raise InvalidInput("t-SNE needs a 2-D matrix with at least three rows")
    limit = (points.shape[0] - 1) / 3.0
    if perplexity > limit:
        LOGGER.warning("Perplexity %.1f is too large for %d samples; using %.1f", perplexity, points.shape[0], limit)
        perplexity = limit
    tsne = TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed)
    return tsne.fit_transform(points)


def plot_embedding_scatter(
    points: np.ndarray,
    labels: Sequence[str],
    path: Union[str, Path],
    title: str = "",
) -> Path:
    if len(points) != len(labels):
        raise InvalidInput(f"{len(points)} points but {len(labels)} labels")
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 6))
    names = sorted(set(labels))
    colors = plt.get_cmap("tab20", max(len(names), 1))
    label_array = np.asarray(labels)
    for index, name in enumerate(names):
        chosen = label_array == name
        ax.scatter(points[chosen, 0], points[chosen, 1], s=10, color=colors(index), label=name)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.legend(fontsize="small", markerscale=2, loc="best")
    fig.tight_layout()
    fig.savefig(target, dpi=120)
    plt.close(fig)
    return target
