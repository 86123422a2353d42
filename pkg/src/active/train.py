"""Adam and the two-phase (frozen backbone, then full) training schedule."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .loss import GroundTruth, assign_targets, detection_loss
from .model import ActiveModel
from .tensor import NumericalError, Tensor, backward

logger = logging.getLogger(__name__)

FROZEN_PREFIX = "dbfen."


@dataclass
class PhaseConfig:
    epochs: int
    batch: int
    lr: float
    frozen: str = "none"  # "backbone" or "none"

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1 or self.lr < 0:
            raise ValueError(f"invalid phase config {self}")
        if self.frozen not in ("backbone", "none"):
            raise ValueError(f"frozen must be 'backbone' or 'none', got {self.frozen!r}")


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainConfig:
    phase1: PhaseConfig = field(default_factory=lambda: PhaseConfig(50, 4, 1e-3, "backbone"))
    phase2: PhaseConfig = field(default_factory=lambda: PhaseConfig(100, 2, 1e-4, "none"))
    seed: int = 0
    adam: AdamConfig = field(default_factory=AdamConfig)

    def __post_init__(self):
        for name in ("phase1", "phase2"):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, PhaseConfig(**value))
        if isinstance(self.adam, dict):
            self.adam = AdamConfig(**self.adam)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float,
              cfg: AdamConfig = AdamConfig()) -> None:
    """In-place bias-corrected Adam update."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"param/grad shape mismatch {p.shape} vs {g.shape}")
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype)


class Adam:
    def __init__(self, params: list[Tensor], lr: float, cfg: AdamConfig | None = None):
        self.params = list(params)
        self.lr = lr
        self.cfg = cfg or AdamConfig()
        self.state = AdamState()

    def step(self):
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, self.lr, self.cfg)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W)
    boxes: list[list[GroundTruth]]

    def __len__(self):
        return len(self.boxes)


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    initial_loss: float | None = None
    update_norms: dict[str, dict[str, float]] = field(default_factory=dict)


def _set_frozen(model: ActiveModel, frozen: bool):
    # frozen tensors drop out of the graph entirely, so backward never reaches them
    for name, p in model.named_parameters():
        if name.startswith(FROZEN_PREFIX):
            p.requires_grad = not frozen
            p.zero_grad()


def train(dataset: Dataset, model: ActiveModel, cfg: TrainConfig, progress=None) -> TrainResult:
    """Run phase 1 (backbone frozen) then phase 2 (everything trainable).

    Returns per-epoch loss rows and the L2 norm of each phase's total update to
    the backbone and to the rest of the network.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng(cfg.seed + 1)
    named = list(model.named_parameters())
    result = TrainResult()
    try:
        for phase_name, phase in (("phase1", cfg.phase1), ("phase2", cfg.phase2)):
            before = {n: p.data.copy() for n, p in named}
            frozen = phase.frozen == "backbone"
            _set_frozen(model, frozen)
            trainable = [p for n, p in named if not (frozen and n.startswith(FROZEN_PREFIX))]
            opt = Adam(trainable, phase.lr, cfg.adam)
            for epoch in range(phase.epochs):
                order = rng.permutation(len(dataset))
                sums = {"loc": 0.0, "conf": 0.0, "cls": 0.0, "total": 0.0}
                for start in range(0, len(order), phase.batch):
                    idx = order[start : start + phase.batch]
                    if len(idx) == 0:
                        continue
                    x = Tensor(dataset.images[idx].astype(model.dtype, copy=False))
                    targets = assign_targets([dataset.boxes[i] for i in idx], model.priors, model.config.image_size)
                    raw = model(x, training=True, rng=drop_rng)
                    loss, terms = detection_loss(raw, targets, return_terms=True)
                    if not np.isfinite(terms["total"]):
                        raise NumericalError(f"NaN loss at {phase_name} epoch {epoch}")
                    if result.initial_loss is None:
                        result.initial_loss = terms["total"] / len(idx)
                    opt.zero_grad()
                    backward(loss)
                    opt.step()
                    for key in sums:
                        sums[key] += terms[key]
                row = {"epoch": epoch, "phase": phase_name, "loc_loss": sums["loc"],
                       "conf_loss": sums["conf"], "cls_loss": sums["cls"], "total": sums["total"]}
                result.log.append(row)
                if progress is not None:
                    progress(row)
                logger.debug("%s epoch %d total %.4f", phase_name, epoch, sums["total"])
            result.update_norms[phase_name] = _update_norms(before, named)
    finally:
        _set_frozen(model, False)
    return result


def _update_norms(before, named) -> dict[str, float]:
    backbone = rest = 0.0
    for n, p in named:
        d = float(np.sum((p.data.astype(np.float64) - before[n].astype(np.float64)) ** 2))
        if n.startswith(FROZEN_PREFIX):
            backbone += d
        else:
            rest += d
    return {"backbone": backbone**0.5, "rest": rest**0.5}

