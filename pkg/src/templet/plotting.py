"""Figures written next to the delimited reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .training import moving_average  # noqa: E402


def loss_curve(losses: Sequence[float], path, title: str = "training loss", window: int = 50) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 3.5), dpi=100)
    ax.plot(range(len(losses)), losses, lw=0.6, alpha=0.4, label="loss")
    if len(losses) >= window:
        ma = moving_average(losses, window)
        ax.plot(range(window - 1, len(losses)), ma, lw=1.5, label=f"moving average ({window})")
    ax.set_xlabel("step")
    ax.set_ylabel("flow loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path

