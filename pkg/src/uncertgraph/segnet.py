"""Tiny 2D U-Net with dropout after every block, soft dice loss, Adam steps."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DomainError, ShapeError, UncertGraphError
from .optim import Adam
from .tensor import Tensor

DICE_EPS = 1e-6


@dataclass(frozen=True)
class SegNetConfig:
    levels: int = 3
    base_width: int = 8
    dropout: float = 0.3
    classes: int = 2
    init_seed: int = 0

    def validate(self) -> None:
        if self.levels < 1 or self.base_width < 1:
            raise DomainError("levels and base_width must be positive")
        if not 0.0 < self.dropout < 1.0:
            raise DomainError("MCDO needs a dropout probability in (0, 1)")
        if self.classes < 2:
            raise DomainError("need at least two classes")


@dataclass
class SliceBatch:
    """Intensities of shape (N, H, W) in [0, 1], optional binary labels alike."""

    intensities: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.intensities, dtype=np.float32)
        if x.ndim == 2:
            x = x[None]
        if not np.all(np.isfinite(x)):
            raise DomainError("intensities must be finite")
        self.intensities = x
        if self.labels is not None:
            y = np.asarray(self.labels)
            if y.ndim == 2:
                y = y[None]
            if y.shape != x.shape:
                raise ShapeError(f"labels {y.shape} do not match intensities {x.shape}")
            if not np.all((y == 0) | (y == 1)):
                raise DomainError("labels must be binary")
            self.labels = y.astype(np.uint8)


class SegNet:
    """Encoder/decoder with one 3x3 conv per block and skip concatenation.

    Channel width doubles per level starting at ``base_width``; a dropout site
    follows every encoder, bottleneck and decoder block.
    """

    def __init__(self, config: SegNetConfig = SegNetConfig()):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        widths = [config.base_width * 2**i for i in range(config.levels + 1)]
        self.params: dict[str, Tensor] = {}

        def conv(name, c_in, c_out, k=3):
            std = np.sqrt(2.0 / (c_in * k * k))
            self.params[f"{name}.w"] = Tensor(rng.normal(0.0, std, (c_out, c_in, k, k)), True)
            self.params[f"{name}.b"] = Tensor(np.zeros(c_out), True)

        c_prev = 1
        for i in range(config.levels):
            conv(f"enc{i}", c_prev, widths[i])
            c_prev = widths[i]
        conv("bottleneck", c_prev, widths[config.levels])
        for i in reversed(range(config.levels)):
            conv(f"dec{i}", widths[i + 1] + widths[i], widths[i])
        conv("head", widths[0], config.classes, k=1)
        self._optimizer: Adam | None = None

    @property
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self) -> "SegNet":
        other = SegNet.__new__(SegNet)
        other.config = self.config
        other.params = {k: Tensor(v.data.copy(), True) for k, v in self.params.items()}
        other._optimizer = None
        return other

    def logits(self, x: Tensor, stochastic: bool = False, keys: Sequence[tuple] | None = None) -> Tensor:
        """Class logits (N, M, H, W) for an (N, 1, H, W) input.

        ``keys`` holds one integer tuple per batch row; dropout site ``s`` of
        row ``n`` draws its mask from the stream keyed ``keys[n] + (s,)``.
        """
        cfg = self.config
        n, _, h, w = x.shape
        step = 2**cfg.levels
        if h % step or w % step:
            raise ShapeError(f"slice dims {h}x{w} must be divisible by {step}")
        if stochastic and keys is None:
            raise UncertGraphError("stochastic forward needs dropout keys")
        p = self.params
        site = 0

        def block(name, inp):
            nonlocal site
            out = T.relu(T.conv2d(inp, p[f"{name}.w"], p[f"{name}.b"], padding=1))
            site_keys = [tuple(k) + (site,) for k in keys] if stochastic else None
            site += 1
            return T.dropout(out, cfg.dropout, stochastic, site_keys) if stochastic else out

        skips = []
        h_ = x
        for i in range(cfg.levels):
            h_ = block(f"enc{i}", h_)
            skips.append(h_)
            h_ = T.maxpool2(h_)
        h_ = block("bottleneck", h_)
        for i in reversed(range(cfg.levels)):
            h_ = T.concat([T.upsample_nearest2(h_), skips[i]], axis=1)
            h_ = block(f"dec{i}", h_)
        return T.conv2d(h_, p["head.w"], p["head.b"], padding=0)


def _as_input(batch: SliceBatch | np.ndarray) -> np.ndarray:
    if not isinstance(batch, SliceBatch):
        batch = SliceBatch(batch)
    return batch.intensities[:, None]


def forward(
    net: SegNet,
    batch: SliceBatch | np.ndarray,
    stochastic: bool = False,
    seed: int = 0,
    pass_index: int = 0,
    slice_ids: Sequence[int] | None = None,
) -> Tensor:
    """Per-pixel class probabilities (N, M, H, W) for one batch of slices.

    With ``stochastic`` the dropout masks of row ``n`` are keyed by
    ``(seed, pass_index, slice_ids[n])``; ``slice_ids`` defaults to the row
    position.
    """
    x = Tensor(_as_input(batch))
    keys = None
    if stochastic:
        ids = range(x.shape[0]) if slice_ids is None else slice_ids
        keys = [(seed, pass_index, int(s)) for s in ids]
    return T.softmax_channel(net.logits(x, stochastic, keys))


def predict_probabilities(
    net: SegNet,
    slices: np.ndarray,
    stochastic: bool = False,
    seed: int = 0,
    pass_index: int = 0,
    batch_size: int = 16,
) -> np.ndarray:
    """Inference over a (D, H, W) stack; returns (D, M, H, W) float32."""
    out = []
    with T.no_grad():
        for start in range(0, slices.shape[0], batch_size):
            ids = list(range(start, min(start + batch_size, slices.shape[0])))
            probs = forward(net, slices[ids], stochastic, seed, pass_index, slice_ids=ids)
            out.append(probs.data)
    return np.concatenate(out, axis=0)


def dice_loss(pred: Tensor | np.ndarray, target: np.ndarray) -> Tensor:
    """Soft dice loss on the foreground channel of (N, M, H, W) probabilities."""
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    target = np.asarray(target, dtype=np.float32)
    if target.ndim == pred.ndim - 2:
        target = target[None]
    if pred.ndim != 4 or target.shape != (pred.shape[0],) + pred.shape[2:]:
        raise ShapeError(f"dice_loss: prediction {pred.shape} does not match target {target.shape}")
    fg = T.take(pred, [1], axis=1)
    g = target[:, None]
    inter = T.sum(T.mul_const(fg, g))
    total = T.add_const(T.sum(fg), float(g.sum(dtype=np.float64)) + DICE_EPS)
    ratio = T.div(T.add_const(T.scale(inter, 2.0), DICE_EPS), total)
    return T.add_const(T.scale(ratio, -1.0), 1.0)


def train_step(net: SegNet, batch: SliceBatch, lr: float, optimizer: Adam | None = None, seed: int = 0, step: int = 0) -> float:
    """One Adam update on the dice loss; returns the loss before the update.

    Dropout is active during training, keyed by ``(seed, step, row)``.
    Without an explicit ``optimizer`` the net keeps its own Adam state.
    """
    if batch.labels is None:
        raise UncertGraphError("train_step needs labelled slices")
    if optimizer is None:
        if net._optimizer is None:
            net._optimizer = Adam(net.parameters, lr=lr)
        optimizer = net._optimizer
    optimizer.lr = lr
    probs = forward(net, batch, stochastic=True, seed=seed, pass_index=step)
    loss = dice_loss(probs, batch.labels)
    T.backward(loss)
    optimizer.step()
    return loss.item()


def config_dict(net: SegNet) -> dict:
    return asdict(net.config)
