"""
PNG-рисунки отчётов: рассеяние латентных меток, кривые абляций, сетки декодированных кадров
"""
from pathlib import Path
from typing import Sequence, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402 pylint: disable=wrong-import-position
import numpy as np  # noqa: E402 pylint: disable=wrong-import-position
import pandas as pd  # noqa: E402 pylint: disable=wrong-import-position
from PIL import Image  # noqa: E402 pylint: disable=wrong-import-position


PathType = Union[str, Path]


def _save(fig, path: PathType) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150, bbox_inches='tight')
    plt.close(fig)
    return path


def latent_scatter(scatter: pd.DataFrame, path: PathType, delta_max: float) -> Path:
    """
    Истинные действия окна, раскрашенные латентной меткой
    :param scatter: таблица (label, dx, dy)
    :param path: путь PNG
    :param delta_max: предел осей
    :return: путь
    """
    fig, ax = plt.subplots(figsize=(5, 5))
    for label, group in scatter.groupby('label', sort=True):
        ax.scatter(group['dx'], group['dy'], s=4, alpha=0.5, label=str(label))
    ax.set_xlim(-delta_max, delta_max)
    ax.set_ylim(-delta_max, delta_max)
    ax.axhline(0.0, color='grey', linewidth=0.5)
    ax.axvline(0.0, color='grey', linewidth=0.5)
    ax.set_xlabel('dx')
    ax.set_ylabel('dy')
    if scatter['label'].nunique() <= 16:
        ax.legend(markerscale=3, fontsize='small', title='код')
    return _save(fig, path)


def sweep_plot(frame: pd.DataFrame, axis: str, path: PathType) -> Path:
    """
    Средний успех режимов по значениям оси абляции
    :param frame: таблица (value, mode, split, success_mean, stderr)
    :param axis: имя оси
    :param path: путь PNG
    :return: путь
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    for (mode, split), group in frame.groupby(['mode', 'split'], sort=True):
        group = group.sort_values('value')
        ax.errorbar(group['value'], group['success_mean'], yerr=group['stderr'], marker='o', capsize=3,
                    label=f'{mode} ({split})')
    ax.set_xlabel(axis)
    ax.set_ylabel('успех')
    ax.set_ylim(0.0, 1.0)
    ax.legend(fontsize='small')
    return _save(fig, path)


def frame_grid(frames: np.ndarray, path: PathType, scale: int = 4) -> Path:
    """
    Сетка кадров (строки x столбцы) одним PNG
    :param frames: (rows, cols, H, W, 3) float в [0, 1] или uint8
    :param path: путь PNG
    :param scale: увеличение
    :return: путь
    """
    frames = np.asarray(frames)
    if frames.dtype != np.uint8:
        frames = (np.clip(frames, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    rows, cols, height, width, _ = frames.shape
    canvas = frames.transpose(0, 2, 1, 3, 4).reshape(rows * height, cols * width, 3)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image = Image.fromarray(np.ascontiguousarray(canvas))
    image.resize((image.width * scale, image.height * scale), Image.Resampling.NEAREST).save(path)
    return path


def rollout_strips(rollouts: Sequence[np.ndarray], path: PathType, scale: int = 4) -> Path:
    """ Нейронные роллауты: по строке на задачу """
    return frame_grid(np.stack(rollouts), path, scale)
