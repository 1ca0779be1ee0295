"""SwG-former network, ACCDOA output coding and the training loop.

Data flow for one clip (defaults in brackets)::

    features [T=250, F=64, C=7]
      -> n_msconv x MS-Conv, each halving F           [250, 4, 128]
      -> flatten (F, C) into d_model + sinusoidal PE  [250, 512]
      -> n_blocks x SwG-former block                  [250, 512]
      -> time max-pool by T / label_frames            [50, 512]
      -> FC -> GeLU -> FC -> tanh                     [50, 13, 3]
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .blocks import MODULE_ORDERS, MSConv, MSConvConfig, SwGBlockConfig, SwGFormerBlock, sinusoidal_encoding
from .graph import AGGREGATORS
from .metrics import Event, FrameEvents, MetricsReport, direction, evaluate
from .numerics import functional as F
from .numerics.io import load_tensors, save_tensors
from .numerics.nn import Linear, Module
from .numerics.optim import Adam
from .numerics.tensor import Tensor, no_grad

log = logging.getLogger(__name__)

WINDOW_GROUPS = {
    "A": (5, 25, 25, 25, 25),
    "B": (5, 5, 25, 25, 25),
    "C": (5, 5, 5, 25, 25),
    "D": (25, 25, 25, 5, 5),
    "E": (1, 1, 1, 1, 1),
    "F": (5, 5, 5, 5, 5),
    "G": (25, 25, 25, 25, 25),
    "H": (5, 5),
}


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss."""


# ---------------------------------------------------------------------------
# configuration


def _parse_int_tuple(value) -> tuple:
    if isinstance(value, str):
        value = value.strip()
        if value.upper() in WINDOW_GROUPS:
            return WINDOW_GROUPS[value.upper()]
        return tuple(int(v) for v in value.replace("[", "").replace("]", "").split(",") if v.strip())
    return tuple(int(v) for v in value)


@dataclass
class ModelConfig:
    n_mels: int = 64
    in_channels: int = 7
    frames: int = 250
    label_frames: int = 50
    n_msconv: int = 4
    msconv_channels: tuple = (64, 64, 128, 128)
    n_blocks: int = 5
    window_group: tuple = WINDOW_GROUPS["B"]
    k: int = 24
    aggregator: str = "conv2d_agg"
    module_order: tuple = MODULE_ORDERS["FF-MHSA-SwG-FF"]
    n_heads: int = 8
    ff_ratio: int = 4
    swg_ratio: int = 4
    dropout_rate: float = 0.05
    n_classes: int = 13
    fc_hidden: int = 0  # 0 -> d_model // 2
    seed: int = 0

    def __post_init__(self):
        self.msconv_channels = _parse_int_tuple(self.msconv_channels)
        self.window_group = _parse_int_tuple(self.window_group)
        if isinstance(self.module_order, str):
            order = self.module_order.strip()
            self.module_order = MODULE_ORDERS.get(order) or tuple(
                s.strip() for s in order.replace("[", "").replace("]", "").replace("-", ",").split(","))
        self.module_order = tuple(self.module_order)
        self.validate()

    def validate(self) -> None:
        if len(self.msconv_channels) != self.n_msconv:
            raise ValueError(f"msconv_channels has {len(self.msconv_channels)} entries for n_msconv={self.n_msconv}")
        if self.n_mels % (2 ** self.n_msconv):
            raise ValueError(f"n_mels={self.n_mels} cannot be halved {self.n_msconv} times")
        if len(self.window_group) != self.n_blocks:
            raise ValueError(f"window group length mismatch: {len(self.window_group)} window sizes "
                             f"{list(self.window_group)} for n_blocks={self.n_blocks}")
        for t in self.window_group:
            if t < 1 or self.frames % t:
                raise ValueError(f"window size t={t} does not divide the frame count T={self.frames}")
        if self.frames % self.label_frames:
            raise ValueError(f"frames={self.frames} is not a multiple of label_frames={self.label_frames}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 1 <= self.k < self.d_model:
            raise ValueError(f"k={self.k} neighbours requires 1 <= k < F*C={self.d_model}")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}; expected one of {AGGREGATORS}")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")

    @property
    def n_freq_post(self) -> int:
        return self.n_mels // 2 ** self.n_msconv

    @property
    def n_chan_post(self) -> int:
        return self.msconv_channels[-1] if self.n_msconv else self.in_channels

    @property
    def d_model(self) -> int:
        return self.n_freq_post * self.n_chan_post

    @property
    def hidden(self) -> int:
        return self.fc_hidden or self.d_model // 2

    def block_config(self, t: int) -> SwGBlockConfig:
        return SwGBlockConfig(t=t, k=self.k, aggregator=self.aggregator, d_model=self.d_model,
                              n_heads=self.n_heads, ff_ratio=self.ff_ratio, swg_ratio=self.swg_ratio,
                              dropout_rate=self.dropout_rate, module_order=self.module_order)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in dataclasses.fields(self)}


def full_config(**overrides) -> ModelConfig:
    """Full-size configuration: 4 MS-Conv, 5 blocks, group B, k = 24, d_model 512."""
    return ModelConfig(**overrides)


def desk_config(**overrides) -> ModelConfig:
    """CPU-scale configuration: 16 mel bands, 2 MS-Conv (8, 16), 2 blocks, d_model 64, 4 classes."""
    base = dict(n_mels=16, n_msconv=2, msconv_channels=(8, 16), n_blocks=2, window_group=(5, 25),
                k=24, n_classes=4)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    max_steps: int = 0  # 0 -> no cap
    threshold: float = 0.5
    dtype: str = "float32"
    seed: int = 0
    eval_every: int = 1
    log_path: str = ""
    checkpoint_path: str = ""


def _coerce(value: str, default):
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return value.strip()
    return value.strip()


def parse_config_text(text: str) -> tuple[dict, dict]:
    """Flat ``key = value`` text -> (model overrides, train overrides).

    ``#`` starts a comment. Keys must name a ModelConfig or TrainConfig field;
    anything else is rejected.
    """
    model_fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    model_kw, train_kw = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in model_fields:
            model_kw[key] = _coerce(value, model_fields[key].default)
        elif key in train_fields:
            train_kw[key] = _coerce(value, train_fields[key].default)
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    return model_kw, train_kw


def load_config(path, base: str = "desk") -> tuple[ModelConfig, TrainConfig]:
    model_kw, train_kw = parse_config_text(Path(path).read_text())
    make = desk_config if base == "desk" else full_config
    return make(**model_kw), TrainConfig(**train_kw)


# ---------------------------------------------------------------------------
# network


class SwGFormer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None, dtype=np.float64):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.dtype = np.dtype(dtype)
        chans = (cfg.in_channels,) + tuple(cfg.msconv_channels)
        self.msconvs = [MSConv(MSConvConfig(chans[i], chans[i + 1], dropout_rate=cfg.dropout_rate), rng, dtype)
                        for i in range(cfg.n_msconv)]
        self.blocks = [SwGFormerBlock(cfg.block_config(t), cfg.n_freq_post, cfg.n_chan_post, rng, dtype)
                       for t in cfg.window_group]
        self.fc1 = Linear(cfg.d_model, cfg.hidden, rng, dtype=dtype)
        self.fc2 = Linear(cfg.hidden, 3 * cfg.n_classes, rng, dtype=dtype)
        self._pe = sinusoidal_encoding(cfg.frames, cfg.d_model)

    def astype(self, dtype) -> "SwGFormer":
        super().astype(dtype)
        self.dtype = np.dtype(dtype)
        return self

    def forward(self, x) -> Tensor:
        """[B, T, F, C] (or a single [T, F, C]) features -> [B, L, n_classes, 3]."""
        cfg = self.cfg
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        single = x.ndim == 3
        if single:
            x = x.reshape(1, *x.shape)
        expected = (cfg.frames, cfg.n_mels, cfg.in_channels)
        if tuple(x.shape[1:]) != expected:
            raise ValueError(f"feature shape {tuple(x.shape[1:])} does not match config {expected}")
        B, T = x.shape[0], cfg.frames
        h = x.transpose(0, 3, 1, 2)  # [B, C, T, F]
        for block in self.msconvs:
            h = block(h)
        h = h.transpose(0, 2, 3, 1).reshape(B, T, cfg.d_model)  # (F, C) row-major
        h = h + Tensor(self._pe.astype(h.dtype))
        for block in self.blocks:
            h = block(h)
        pool = T // cfg.label_frames
        h = F.max_pool2d(h.reshape(B, 1, T, cfg.d_model), (pool, 1)).reshape(B, cfg.label_frames, cfg.d_model)
        out = F.tanh(self.fc2(F.gelu(self.fc1(h))))
        out = out.reshape(B, cfg.label_frames, cfg.n_classes, 3)
        return out.reshape(*out.shape[1:]) if single else out


def predict(model: SwGFormer, X: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Eval-mode forward over a stack of clips, returned as a numpy ACCDOA array."""
    was_training = model.training
    model.eval()
    outs = []
    with no_grad():
        for s in range(0, len(X), batch_size):
            outs.append(model(np.asarray(X[s:s + batch_size], dtype=model.dtype)).data)
    model.train(was_training)
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, model.cfg.label_frames, model.cfg.n_classes, 3))


# ---------------------------------------------------------------------------
# ACCDOA


def accdoa_encode(annotations, n_classes: int, label_frames: int) -> np.ndarray:
    """Rows (frame, class, source, az_deg, el_deg) -> [label_frames, n_classes, 3] targets."""
    target = np.zeros((label_frames, n_classes, 3))
    seen = set()
    for frame, cls, _src, az, el in annotations:
        frame, cls = int(frame), int(cls)
        if not 0 <= frame < label_frames:
            continue
        if not 0 <= cls < n_classes:
            raise ValueError(f"class index {cls} outside [0, {n_classes})")
        if (frame, cls) in seen:
            raise ValueError(f"frame {frame}, class {cls}: more than one active instance "
                             "(single-ACCDOA holds one event per class and frame)")
        seen.add((frame, cls))
        target[frame, cls] = direction(float(az), float(el))
    return target


def accdoa_decode(pred: np.ndarray, threshold: float = 0.5) -> list[list[tuple[int, np.ndarray]]]:
    """[L, n_classes, 3] -> per frame list of (class, unit DoA) with ||v|| > threshold."""
    if not 0 < threshold < np.sqrt(3):
        raise ValueError(f"threshold must lie in (0, sqrt(3)), got {threshold}")
    pred = np.asarray(pred, dtype=np.float64)
    norms = np.linalg.norm(pred, axis=-1)
    frames = []
    for l in range(pred.shape[0]):
        active = np.nonzero(norms[l] > threshold)[0]
        frames.append([(int(c), pred[l, c] / norms[l, c]) for c in active])
    return frames


def decoded_to_rows(frames) -> list[tuple]:
    """Decoded frames -> annotation rows (frame, class, source, az_deg, el_deg)."""
    rows = []
    for l, events in enumerate(frames):
        for c, u in events:
            az = float(np.degrees(np.arctan2(u[1], u[0])))
            el = float(np.degrees(np.arcsin(np.clip(u[2], -1.0, 1.0))))
            rows.append((l, c, 0, az, el))
    return rows


def accdoa_to_events(arr: np.ndarray, threshold: float = 0.5) -> list[list[Event]]:
    return [[Event(c, u, 0) for c, u in fr] for fr in accdoa_decode(arr, threshold)]


def accdoa_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over every frame x class x axis entry."""
    if tuple(pred.shape) != tuple(np.shape(target)):
        raise ValueError(f"prediction {pred.shape} and target {np.shape(target)} differ")
    return F.mse_loss(pred, target)


def evaluate_accdoa(pred: np.ndarray, target: np.ndarray, threshold: float = 0.5,
                    segment_frames: int = 10) -> MetricsReport:
    """Metrics over a batch of clips [N, L, K, 3]; clips are concatenated along time."""
    n_classes = target.shape[-2]
    ref, est = [], []
    for p, t in zip(pred, target):
        ref += accdoa_to_events(t, threshold)
        est += accdoa_to_events(p, threshold)
    return evaluate(FrameEvents(ref, est), n_classes, segment_frames=segment_frames)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: SwGFormer, extra: dict | None = None) -> None:
    """Concatenated SWGT records plus a JSON manifest ``<path>.json``."""
    state = model.state_dict()
    names = list(state)
    save_tensors(path, [state[n] for n in names])
    manifest = {
        "version": __version__,
        "config": model.cfg.to_dict(),
        "tensors": [{"name": n, "shape": list(state[n].shape)} for n in names],
    }
    if extra:
        manifest.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(path, dtype=np.float64) -> SwGFormer:
    manifest = json.loads(Path(str(path) + ".json").read_text())
    cfg = ModelConfig(**manifest["config"])
    model = SwGFormer(cfg, np.random.default_rng(cfg.seed), dtype=dtype)
    arrays = load_tensors(path)
    names = [t["name"] for t in manifest["tensors"]]
    if len(arrays) != len(names):
        raise ValueError(f"checkpoint holds {len(arrays)} tensors, manifest lists {len(names)}")
    model.load_state_dict(dict(zip(names, arrays)))
    return model


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    step_losses: list = field(default_factory=list)
    epoch_rows: list = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0
    report: MetricsReport | None = None


def _grad_norms(model: Module) -> dict[str, float]:
    return {n: float(np.linalg.norm(p.grad)) for n, p in model.named_parameters()}


LOG_HEADER = ["epoch", "train_loss", "ER", "F20", "LE", "LR", "SELD"]


def train_loop(model: SwGFormer, train_set: tuple[np.ndarray, np.ndarray],
               val_set: tuple[np.ndarray, np.ndarray] | None, cfg: TrainConfig,
               time_budget: float | None = None) -> TrainResult:
    """Adam over shuffled minibatches; per-epoch loss + validation metrics.

    Stops after ``cfg.epochs`` epochs, ``cfg.max_steps`` steps (if > 0) or
    ``time_budget`` seconds, whichever comes first. A non-finite loss aborts
    with :class:`NumericalError` carrying the learning rate and gradient norms.
    """
    X, Y = train_set
    if len(X) != len(Y):
        raise ValueError(f"{len(X)} feature clips but {len(Y)} targets")
    rng = np.random.default_rng(cfg.seed)
    model.astype(np.dtype(cfg.dtype)).train()
    opt = Adam(model.parameters(), lr=cfg.lr)
    result = TrainResult()
    log_fh = None
    if cfg.log_path:
        log_fh = open(cfg.log_path, "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(LOG_HEADER)
    start = time.perf_counter()
    stop = False
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(X))
            epoch_losses = []
            for s in range(0, len(order), cfg.batch_size):
                batch = order[s:s + cfg.batch_size]
                xb = np.asarray(X[batch], dtype=model.dtype)
                yb = np.asarray(Y[batch], dtype=model.dtype)
                opt.zero_grad()
                loss = accdoa_loss(model(xb), yb)
                value = loss.item()
                if not np.isfinite(value):
                    with np.errstate(all="ignore"):
                        loss.backward()
                    norms = _grad_norms(model)
                    worst = sorted(norms.items(), key=lambda kv: np.nan_to_num(kv[1], nan=np.inf), reverse=True)[:5]
                    raise NumericalError(f"non-finite loss {value} at step {result.steps + 1} (epoch {epoch}); "
                                         f"lr={opt.lr}; largest grad norms {worst}")
                loss.backward()
                opt.step()
                result.steps += 1
                result.step_losses.append(value)
                epoch_losses.append(value)
                if (cfg.max_steps and result.steps >= cfg.max_steps) or (
                        time_budget is not None and time.perf_counter() - start > time_budget):
                    stop = True
                    break
            train_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
            row = [epoch, train_loss]
            if val_set is not None and (epoch % cfg.eval_every == 0 or stop or epoch == cfg.epochs):
                report = evaluate_accdoa(predict(model, val_set[0]), val_set[1], cfg.threshold)
                result.report = report
                row += report.summary_row()
                model.train()
            else:
                row += [float("nan")] * 5
            result.epoch_rows.append(row)
            log.info("epoch %d loss %.5f %s", epoch, train_loss, row[2:])
            if log_fh:
                writer.writerow([epoch] + [f"{v:.6f}" for v in row[1:]])
                log_fh.flush()
            if stop:
                break
    finally:
        if log_fh:
            log_fh.close()
    result.seconds = time.perf_counter() - start
    if cfg.checkpoint_path:
        save_checkpoint(cfg.checkpoint_path, model, {"train": dataclasses.asdict(cfg), "steps": result.steps})
    return result
