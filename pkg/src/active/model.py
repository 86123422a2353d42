"""The full detector: backbone -> fusion -> head, plus inference with DIoU-NMS."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .ccfpn import CCFPN, parse_variant
from .dbfen import DBFEN, LEVELS, DbfenConfig
from .head import (
    DEFAULT_CONF_THRESH,
    DEFAULT_DIOU_THRESH,
    FALLBACK_ANCHORS,
    LEVEL_STRIDE,
    Detection,
    Head,
    anchors_by_level,
    decode,
    diou_nms,
)
from .nn import Module
from .tensor import ShapeError, Tensor


@dataclass
class ModelConfig:
    dbfen: DbfenConfig = field(default_factory=DbfenConfig)
    variant: int = 4
    eq3_literal: bool = False
    pyramid_width: int = 64
    image_size: int = 416
    conf_thresh: float = DEFAULT_CONF_THRESH
    diou_thresh: float = DEFAULT_DIOU_THRESH
    anchors: list = field(default_factory=lambda: [list(a) for a in FALLBACK_ANCHORS])

    def __post_init__(self):
        if isinstance(self.dbfen, dict):
            self.dbfen = DbfenConfig(**self.dbfen)
        self.variant = parse_variant(self.variant)
        if self.image_size % 32 or self.image_size <= 0:
            raise ValueError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        self.anchors = [[float(w), float(h)] for w, h in self.anchors]
        anchors_by_level(self.anchors)

    @classmethod
    def micro(cls, **overrides) -> "ModelConfig":
        base = dict(dbfen=DbfenConfig.micro(), pyramid_width=8)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


class ActiveModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self._cfg = cfg
        self._dtype = dtype
        self.dbfen = DBFEN(cfg.dbfen, rng, dtype)
        in_widths = tuple(reversed(cfg.dbfen.widths))  # j = 1, 2, 3
        self.ccfpn = CCFPN(cfg.variant, in_widths, cfg.pyramid_width, rng, cfg.eq3_literal, dtype)
        self.head = Head(cfg.pyramid_width, rng, dtype)
        self._priors = anchors_by_level(cfg.anchors)

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def priors(self) -> dict[int, np.ndarray]:
        return self._priors

    @property
    def dtype(self):
        return self._dtype

    def set_anchors(self, anchors):
        self._cfg.anchors = [[float(w), float(h)] for w, h in np.asarray(anchors).reshape(-1, 2)]
        self._priors = anchors_by_level(self._cfg.anchors)

    def __call__(self, images: Tensor, training: bool = False, rng=None) -> list[Tensor]:
        """Raw head outputs for levels 1 (13x13 at 416 px), 2, 3."""
        if images.shape[2] != self._cfg.image_size or images.shape[3] != self._cfg.image_size:
            raise ShapeError(f"model expects {self._cfg.image_size}px inputs, got {images.shape[2:]}")
        pin = self.dbfen(images, training=training, rng=rng)
        pout = self.ccfpn(pin)
        return self.head(pout.outputs())

    def detect(self, images: np.ndarray, conf_thresh: float | None = None,
               diou_thresh: float | None = None) -> list[list[Detection]]:
        """Decode, clip and suppress; one detection list per image."""
        conf_thresh = self._cfg.conf_thresh if conf_thresh is None else conf_thresh
        diou_thresh = self._cfg.diou_thresh if diou_thresh is None else diou_thresh
        x = Tensor(np.asarray(images, dtype=self._dtype))
        raw = self(x)
        per_image: list[list[Detection]] = [[] for _ in range(x.shape[0])]
        for k, r in zip(LEVELS, raw):
            for n, dets in enumerate(decode(r, self._priors[k], LEVEL_STRIDE[k], self._cfg.image_size, conf_thresh)):
                per_image[n].extend(dets)
        return [diou_nms(d, conf_thresh, diou_thresh) for d in per_image]
