"""Wall-clock throughput of the full detect pipeline."""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from .model import ActiveModel

REPEATS = 3


@dataclass
class BenchResult:
    fps: float
    n_images: int
    seconds: list[float]
    config_hash: str
    image_size: int

    def to_dict(self) -> dict:
        return asdict(self)


def bench(model: ActiveModel, images: np.ndarray, n_images: int, config_hash: str = "",
          repeats: int = REPEATS) -> BenchResult:
    """Detect ``n_images`` frames one at a time, ``repeats`` times; FPS from the median run.

    ``images`` is cycled when it holds fewer than ``n_images`` frames.
    """
    if n_images < 1:
        raise ValueError(f"n_images must be positive, got {n_images}")
    if len(images) == 0:
        raise ValueError("bench needs at least one input image")
    seconds = []
    for _ in range(repeats):
        start = time.perf_counter()
        for i in range(n_images):
            model.detect(images[i % len(images)][None])
        seconds.append(time.perf_counter() - start)
    fps = n_images / statistics.median(seconds)
    return BenchResult(fps, n_images, seconds, config_hash, int(images.shape[-1]))
