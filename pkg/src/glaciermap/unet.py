"""U-Net segmentation model: build, forward/backward, Dice training, inference.

Architecture: ``depth`` encoder stages of two same-padding 3x3 convolutions
(ReLU) with channel width doubling per stage, 2x2 max pooling between
stages, a two-convolution bottleneck at double the deepest encoder width,
and a mirrored decoder using 2x2 stride-2 transpose convolutions with skip
concatenation. Spatial dropout closes every encoder and decoder block in
training mode. A 1x1 convolution head emits per-class logits; binary heads
use a sigmoid, multiclass heads a per-pixel softmax.

Parameters live in a flat dict keyed by layer path (enc1.conv1.w, dec3.up.b,
head.w, ...) so checkpoints and gradient checks can address single tensors.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from . import container, nn
from .errors import ConfigurationError, GlacierError, ShapeError, ValidationError
from .geodata import RasterTile
from .pipeline import make_rng

DICE_EPS = 1.0


class TrainingAbort(GlacierError):
    """Training hit a non-finite loss; message names epoch and batch."""


@dataclass
class UNetConfig:
    in_channels: int
    out_classes: int
    depth: int = 5
    base_channels: int = 16
    conv_kernel: int = 3
    up_kernel: int = 2
    pool_kernel: int = 2
    spatial_dropout_rate: float = 0.3
    padding: str = "same"

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigurationError("depth and base_channels must be >= 1")
        if self.in_channels < 1 or self.out_classes < 1:
            raise ConfigurationError("in_channels and out_classes must be >= 1")

    @property
    def encoder_widths(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.depth)]

    @property
    def bottleneck_width(self) -> int:
        return self.base_channels * 2**self.depth

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-4
    l1_lambda: float = 5e-4
    loss: str = "dice"
    optimizer: str = "adam"
    grad_clip_norm: float = 1.0  # global-norm clip; 0 disables
    warmup_steps: int = 0  # linear lr ramp over the first optimizer steps
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be nonnegative")
        if self.l1_lambda < 0:
            raise ConfigurationError("l1_lambda must be nonnegative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TaskSpec:
    """Segmentation task: which planes the model predicts.

    binary_union    one plane for clean∪debris (sigmoid)
    multiclass_3    clean, debris, background planes (softmax)
    binary_clean / binary_debris
                    single-class binary heads; together they realize the
                    two-independent-binary-models protocol
    """

    mode: str

    MODES = ("binary_union", "multiclass_3", "binary_clean", "binary_debris")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ConfigurationError(f"mode must be one of {self.MODES}, got {self.mode!r}")

    @property
    def n_planes(self) -> int:
        return 3 if self.mode == "multiclass_3" else 1

    @property
    def activation(self) -> str:
        return "softmax" if self.mode == "multiclass_3" else "sigmoid"

    def target_planes(self, mask_planes: np.ndarray) -> np.ndarray:
        """Canonical (clean, debris) mask planes -> model target planes."""
        clean = mask_planes[..., 0, :, :]
        debris = mask_planes[..., 1, :, :]
        union = np.maximum(clean, debris)
        stack = {
            "binary_union": (union,),
            "binary_clean": (clean,),
            "binary_debris": (debris,),
            "multiclass_3": (clean, debris, 1 - union),
        }[self.mode]
        return np.stack(stack, axis=-3)

    def binarize(self, probs: np.ndarray) -> dict[str, np.ndarray]:
        """Probabilities -> named binary planes (threshold 0.5 / argmax)."""
        if self.mode == "multiclass_3":
            am = probs.argmax(axis=-3)
            return {"clean_ice": am == 0, "debris": am == 1, "glacier": am != 2}
        plane = probs[..., 0, :, :] >= 0.5
        name = {
            "binary_union": "glacier",
            "binary_clean": "clean_ice",
            "binary_debris": "debris",
        }[self.mode]
        return {name: plane}

    def truth_planes(self, mask_planes: np.ndarray) -> dict[str, np.ndarray]:
        clean = mask_planes[..., 0, :, :] > 0
        debris = mask_planes[..., 1, :, :] > 0
        if self.mode == "multiclass_3":
            return {"clean_ice": clean, "debris": debris, "glacier": clean | debris}
        return {
            "binary_union": {"glacier": clean | debris},
            "binary_clean": {"clean_ice": clean},
            "binary_debris": {"debris": debris},
        }[self.mode]


# ---------------------------------------------------------------------------
# Parameters

def build_unet(config: UNetConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-initialized parameters keyed by layer path; deterministic in seed."""
    rng = make_rng(seed)
    k = config.conv_kernel
    params: dict[str, np.ndarray] = {}

    def conv(name, c_in, c_out, kh, kw):
        fan_in = c_in * kh * kw
        params[f"{name}.w"] = nn.he_normal(rng, (c_out, c_in, kh, kw), fan_in, dtype)
        params[f"{name}.b"] = np.zeros(c_out, dtype=dtype)

    def up(name, c_in, c_out):
        fan_in = c_in * config.up_kernel**2
        params[f"{name}.w"] = nn.he_normal(
            rng, (c_in, c_out, config.up_kernel, config.up_kernel), fan_in, dtype
        )
        params[f"{name}.b"] = np.zeros(c_out, dtype=dtype)

    c_prev = config.in_channels
    for i, width in enumerate(config.encoder_widths, start=1):
        conv(f"enc{i}.conv1", c_prev, width, k, k)
        conv(f"enc{i}.conv2", width, width, k, k)
        c_prev = width
    conv("bottleneck.conv1", c_prev, config.bottleneck_width, k, k)
    conv("bottleneck.conv2", config.bottleneck_width, config.bottleneck_width, k, k)
    for i in range(config.depth, 0, -1):
        width = config.base_channels * 2 ** (i - 1)
        up(f"dec{i}.up", 2 * width, width)
        conv(f"dec{i}.conv1", 2 * width, width, k, k)
        conv(f"dec{i}.conv2", width, width, k, k)
    conv("head", config.base_channels, config.out_classes, 1, 1)
    # temper the class head so logits start near zero; keeps the sigmoid /
    # softmax unsaturated during the first optimizer steps
    params["head.w"] *= np.asarray(0.1, dtype=dtype)
    return params


def parameter_count(config: UNetConfig) -> int:
    """Closed-form parameter count.

    With B = base_channels, d = depth, C = in_channels, K = out_classes,
    k^2 = conv kernel area, u^2 = up kernel area and w_i = B*2^(i-1):

      encoder either-conv pairs:  sum_i [k^2*c_{i-1}*w_i + w_i + k^2*w_i^2 + w_i]
      bottleneck (width 2*w_d):   k^2*w_d*2w_d + 2w_d + k^2*(2w_d)^2 + 2w_d
      decoder stages:             sum_i [u^2*2w_i*w_i + w_i + k^2*2w_i*w_i + w_i
                                         + k^2*w_i^2 + w_i]
      head:                       B*K + K

    For the default depth-5 base-16 config this reduces to
    N(C, K) = 144*C + 17*K + 7,775,152.
    """
    k2 = config.conv_kernel**2
    u2 = config.up_kernel**2
    total = 0
    c_prev = config.in_channels
    for width in config.encoder_widths:
        total += k2 * c_prev * width + width + k2 * width * width + width
        c_prev = width
    wb = config.bottleneck_width
    total += k2 * c_prev * wb + wb + k2 * wb * wb + wb
    for i in range(config.depth, 0, -1):
        width = config.base_channels * 2 ** (i - 1)
        total += u2 * (2 * width) * width + width
        total += k2 * (2 * width) * width + width
        total += k2 * width * width + width
    total += config.base_channels * config.out_classes + config.out_classes
    return total


def count_params(params: dict[str, np.ndarray]) -> int:
    return sum(int(v.size) for v in params.values())


# ---------------------------------------------------------------------------
# Forward / backward

def forward(
    params: dict,
    config: UNetConfig,
    x: np.ndarray,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    return_tape: bool = False,
):
    """Run the network; returns (K, H, W) or (N, K, H, W) probabilities.

    Dropout is active only in train_mode (requires rng). With return_tape
    the per-op caches needed by backward() are returned too.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    n, c, h, w = x.shape
    if c != config.in_channels:
        raise ShapeError(
            f"enc1.conv1 expects {config.in_channels} input channels, got {c}"
        )
    factor = 2**config.depth
    if h % factor or w % factor:
        raise ShapeError(
            f"input {h}x{w} not divisible by {factor} (depth {config.depth})"
        )
    if train_mode and config.spatial_dropout_rate > 0 and rng is None:
        raise ConfigurationError("train_mode forward needs an rng for dropout")

    tape = []
    drop = train_mode and config.spatial_dropout_rate > 0

    def convblock(name, h_in):
        out, cache = nn.conv2d(h_in, params[f"{name}.w"], params[f"{name}.b"])
        tape.append(("conv", name, cache))
        out, mask = nn.relu(out)
        tape.append(("relu", None, mask))
        return out

    hcur = x.astype(params["head.w"].dtype, copy=False)
    skips = {}
    for i in range(1, config.depth + 1):
        hcur = convblock(f"enc{i}.conv1", hcur)
        hcur = convblock(f"enc{i}.conv2", hcur)
        if drop:
            hcur, mask = nn.spatial_dropout(hcur, config.spatial_dropout_rate, rng)
            tape.append(("drop", None, mask))
        skips[i] = hcur
        tape.append(("branch", i, None))
        hcur, cache = nn.maxpool2(hcur)
        tape.append(("pool", None, cache))

    hcur = convblock("bottleneck.conv1", hcur)
    hcur = convblock("bottleneck.conv2", hcur)

    for i in range(config.depth, 0, -1):
        name = f"dec{i}.up"
        hcur, cache = nn.conv_transpose2x2(hcur, params[f"{name}.w"], params[f"{name}.b"])
        tape.append(("up", name, cache))
        skip = skips.pop(i)
        hcur = np.concatenate([skip, hcur], axis=1)
        tape.append(("concat", i, skip.shape[1]))
        hcur = convblock(f"dec{i}.conv1", hcur)
        hcur = convblock(f"dec{i}.conv2", hcur)
        if drop:
            hcur, mask = nn.spatial_dropout(hcur, config.spatial_dropout_rate, rng)
            tape.append(("drop", None, mask))

    logits, cache = nn.conv2d(hcur, params["head.w"], params["head.b"])
    tape.append(("conv", "head", cache))
    if config.out_classes == 1:
        probs = nn.sigmoid(logits)
        tape.append(("act", "sigmoid", probs))
    else:
        probs = nn.softmax_channels(logits)
        tape.append(("act", "softmax", probs))

    out = probs[0] if squeeze else probs
    if return_tape:
        return out, tape
    return out


def backward(dprobs: np.ndarray, tape: list) -> dict[str, np.ndarray]:
    """Walk the tape in reverse; returns parameter gradients keyed like params."""
    grads: dict[str, np.ndarray] = {}
    pending: dict[int, np.ndarray] = {}
    d = dprobs if dprobs.ndim == 4 else dprobs[None]
    for kind, name, cache in reversed(tape):
        if kind == "act":
            d = nn.sigmoid_backward(d, cache) if name == "sigmoid" else nn.softmax_backward(d, cache)
        elif kind == "conv":
            d, dw, db = nn.conv2d_backward(d, cache)
            grads[f"{name}.w"] = dw
            grads[f"{name}.b"] = db
        elif kind == "relu":
            d = nn.relu_backward(d, cache)
        elif kind == "drop":
            d = nn.spatial_dropout_backward(d, cache)
        elif kind == "concat":
            pending[name] = d[:, :cache]
            d = np.ascontiguousarray(d[:, cache:])
        elif kind == "up":
            d, dw, db = nn.conv_transpose2x2_backward(d, cache)
            grads[f"{name}.w"] = dw
            grads[f"{name}.b"] = db
        elif kind == "pool":
            d = nn.maxpool2_backward(d, cache)
        elif kind == "branch":
            d = d + pending.pop(name)
        else:  # pragma: no cover
            raise AssertionError(f"unknown tape op {kind}")
    return grads


# ---------------------------------------------------------------------------
# Loss and objective

def dice_loss(pred: np.ndarray, truth: np.ndarray, eps: float = DICE_EPS) -> float:
    """Soft Dice loss over all pixels and planes: 1 - (2*sum(p*y)+eps) / (sum(p)+sum(y)+eps)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"pred {pred.shape} vs truth {truth.shape}")
    num = 2.0 * float((pred * truth).sum()) + eps
    den = float(pred.sum()) + float(truth.sum()) + eps
    return 1.0 - num / den


def dice_loss_grad(pred: np.ndarray, truth: np.ndarray, eps: float = DICE_EPS) -> np.ndarray:
    """d dice_loss / d pred."""
    num = 2.0 * (pred * truth).sum() + eps
    den = pred.sum() + truth.sum() + eps
    return -(2.0 * truth * den - num) / (den * den)


def l1_penalty(params: dict, lam: float) -> float:
    """lam * sum |w| over convolution weights; biases excluded."""
    if lam == 0:
        return 0.0
    return lam * float(sum(np.abs(v).sum() for k, v in params.items() if k.endswith(".w")))


def training_objective(
    params: dict,
    batch: tuple[np.ndarray, np.ndarray],
    config: UNetConfig,
    train_config: TrainConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    return_grads: bool = False,
):
    """Mean per-sample Dice loss over the batch plus the l1 weight penalty."""
    x, y = batch
    if x.shape[0] == 0:
        raise ConfigurationError("batch is empty")
    probs, tape = forward(params, config, x, train_mode=train_mode, rng=rng, return_tape=True)
    n = x.shape[0]
    losses = [dice_loss(probs[i], y[i]) for i in range(n)]
    objective = float(np.mean(losses)) + l1_penalty(params, train_config.l1_lambda)
    if not return_grads:
        return objective
    dprobs = np.stack([dice_loss_grad(probs[i], y[i]) for i in range(n)]) / n
    grads = backward(dprobs.astype(probs.dtype), tape)
    if train_config.l1_lambda > 0:
        for k in grads:
            if k.endswith(".w"):
                grads[k] = grads[k] + train_config.l1_lambda * np.sign(params[k])
    return objective, grads, probs, float(np.mean(losses))


# ---------------------------------------------------------------------------
# Training

def _union_iou(pred_planes: dict, truth_planes: dict) -> float:
    key = "glacier" if "glacier" in pred_planes else next(iter(pred_planes))
    p = pred_planes[key]
    t = truth_planes[key]
    tp = float(np.logical_and(p, t).sum())
    denom = tp + float(np.logical_and(p, ~t).sum()) + float(np.logical_and(~p, t).sum())
    return tp / denom if denom > 0 else 0.0


def evaluate(
    params: dict,
    config: UNetConfig,
    task: TaskSpec,
    x: np.ndarray,
    mask_planes: np.ndarray,
    batch_size: int = 8,
) -> dict:
    """Eval-mode Dice loss and union IoU over a dataset."""
    y = task.target_planes(mask_planes).astype(params["head.w"].dtype)
    losses = []
    tp = fp = fn = 0.0
    for s in range(0, x.shape[0], batch_size):
        probs = forward(params, config, x[s : s + batch_size])
        for i in range(probs.shape[0]):
            losses.append(dice_loss(probs[i], y[s + i]))
        pred = task.binarize(probs)
        truth = task.truth_planes(mask_planes[s : s + batch_size])
        key = "glacier" if "glacier" in pred else next(iter(pred))
        p, t = pred[key], truth[key]
        tp += float(np.logical_and(p, t).sum())
        fp += float(np.logical_and(p, ~t).sum())
        fn += float(np.logical_and(~p, t).sum())
    denom = tp + fp + fn
    return {
        "dice_loss": float(np.mean(losses)) if losses else 0.0,
        "iou": tp / denom if denom > 0 else 0.0,
    }


def fit(
    params: dict,
    config: UNetConfig,
    task: TaskSpec,
    train_data: tuple[np.ndarray, np.ndarray],
    dev_data: tuple[np.ndarray, np.ndarray] | None,
    train_config: TrainConfig,
) -> tuple[dict, list[dict]]:
    """Adam + Dice + l1 training loop.

    train_data/dev_data are (inputs (N,C,H,W), canonical mask planes
    (N,2,H,W)). Returns the best-dev-IoU parameters (final parameters when
    no dev set is given) and a history with one train and one dev row per
    epoch. Single-threaded and deterministic given train_config.seed.
    """
    x_train, m_train = train_data
    if x_train.shape[0] == 0:
        raise ConfigurationError("training set is empty")
    y_train = task.target_planes(m_train).astype(params["head.w"].dtype)
    rng = make_rng(train_config.seed)
    adam = nn.Adam(params, train_config.learning_rate)
    history: list[dict] = []
    best = {"iou": -1.0, "params": None, "epoch": -1}

    n = x_train.shape[0]
    bs = min(train_config.batch_size, n)
    for epoch in range(train_config.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        tp = fp = fn = 0.0
        for b, s in enumerate(range(0, n, bs)):
            sel = order[s : s + bs]
            objective, grads, probs, batch_dice = training_objective(
                params,
                (x_train[sel], y_train[sel]),
                config,
                train_config,
                train_mode=True,
                rng=rng,
                return_grads=True,
            )
            if not np.isfinite(objective):
                raise TrainingAbort(
                    f"non-finite loss {objective} at epoch {epoch} batch {b}"
                )
            if train_config.grad_clip_norm > 0:
                total = np.sqrt(sum(float(np.square(g).sum()) for g in grads.values()))
                if total > train_config.grad_clip_norm:
                    scale = train_config.grad_clip_norm / total
                    for g in grads.values():
                        g *= scale
            if train_config.warmup_steps > 0:
                lr_scale = min(1.0, (adam.t + 1) / train_config.warmup_steps)
            else:
                lr_scale = 1.0
            adam.step(params, grads, lr_scale=lr_scale)
            epoch_losses.append(batch_dice)
            pred = task.binarize(probs)
            truth = task.truth_planes(m_train[sel])
            key = "glacier" if "glacier" in pred else next(iter(pred))
            p, t = pred[key], truth[key]
            tp += float(np.logical_and(p, t).sum())
            fp += float(np.logical_and(p, ~t).sum())
            fn += float(np.logical_and(~p, t).sum())
        denom = tp + fp + fn
        history.append(
            {
                "epoch": epoch,
                "split": "train",
                "dice_loss": float(np.mean(epoch_losses)),
                "iou": tp / denom if denom > 0 else 0.0,
            }
        )
        if dev_data is not None and dev_data[0].shape[0] > 0:
            dev = evaluate(params, config, task, dev_data[0], dev_data[1], bs)
        else:
            dev = {"dice_loss": float("nan"), "iou": float("nan")}
        history.append({"epoch": epoch, "split": "dev", **dev})
        if np.isfinite(dev["iou"]) and dev["iou"] > best["iou"]:
            best = {
                "iou": dev["iou"],
                "params": {k: v.copy() for k, v in params.items()},
                "epoch": epoch,
            }
    final = best["params"] if best["params"] is not None else params
    return final, history


def history_to_csv(history: list[dict]) -> str:
    lines = ["epoch,split,dice_loss,iou"]
    for row in history:
        lines.append(f"{row['epoch']},{row['split']},{row['dice_loss']},{row['iou']}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Tile-scale inference

def preprocess_window(window: np.ndarray) -> np.ndarray:
    """Impute NaN with 0 then per-channel z-score, mirroring patch training."""
    data = np.where(np.isnan(window), np.float32(0.0), window.astype(np.float32))
    mean = data.mean(axis=(1, 2), keepdims=True)
    std = data.std(axis=(1, 2), keepdims=True)
    return (data - mean) / (std + np.float32(1e-6))


def _window_positions(extent: int, window: int, stride: int) -> list[int]:
    if extent <= window:
        return [0]
    positions = list(range(0, extent - window + 1, stride))
    if positions[-1] != extent - window:
        positions.append(extent - window)
    return positions


def predict_tile(
    params: dict,
    config: UNetConfig,
    tile: RasterTile,
    stack,
    window: int = 512,
    overlap: int = 64,
    normalize: bool = True,
) -> np.ndarray:
    """Sliding-window inference over a whole tile.

    Windows of ``window`` pixels advance by window - overlap; where windows
    overlap, per-pixel probabilities are averaged. Tiles smaller than the
    window are reflect-padded up to it and the output is cropped back.
    """
    from .channels import ChannelStack  # local import to avoid cycle at load

    if not isinstance(stack, ChannelStack):
        stack = ChannelStack(tile, list(stack))
    data = stack.tensor()
    c, h, w = data.shape
    pad_h = max(0, window - h)
    pad_w = max(0, window - w)
    if pad_h or pad_w:
        mode = "reflect" if min(h, w) > 1 else "edge"
        data = np.pad(data, ((0, 0), (0, pad_h), (0, pad_w)), mode=mode)
    hp, wp = data.shape[1], data.shape[2]
    stride = window - overlap
    if stride < 1:
        raise ConfigurationError("overlap must be smaller than the window")
    acc = np.zeros((config.out_classes, hp, wp), dtype=np.float64)
    cnt = np.zeros((hp, wp), dtype=np.float64)
    for i0 in _window_positions(hp, window, stride):
        for j0 in _window_positions(wp, window, stride):
            win = data[:, i0 : i0 + window, j0 : j0 + window]
            win = preprocess_window(win) if normalize else win
            probs = forward(params, config, win)
            acc[:, i0 : i0 + window, j0 : j0 + window] += probs
            cnt[i0 : i0 + window, j0 : j0 + window] += 1.0
    out = (acc / cnt).astype(np.float32)
    return out[:, :h, :w]


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(
    path,
    params: dict,
    config: UNetConfig,
    epoch: int = 0,
    metrics: dict | None = None,
    task: TaskSpec | None = None,
) -> None:
    names = sorted(params)
    header = {
        "kind": "unet-checkpoint",
        "config": config.to_dict(),
        "epoch": epoch,
        "metrics": metrics or {},
        "task": task.mode if task else None,
        "created_at": dt.datetime.now(dt.timezone.utc).isoformat(),
        "params": [
            {"name": k, "shape": list(params[k].shape), "dtype": "f32"} for k in names
        ],
    }
    payload = b"".join(container.array_payload(params[k].astype(np.float32)) for k in names)
    container.write_file(path, header, payload)


def load_checkpoint(path) -> tuple[dict, UNetConfig, dict]:
    header, payload = container.read_file(path)
    if header.get("kind") != "unet-checkpoint":
        raise ValidationError(f"{path} is not a model checkpoint")
    params = {}
    offset = 0
    for entry in header["params"]:
        size = int(np.prod(entry["shape"])) * 4
        chunk = payload[offset : offset + size]
        if len(chunk) != size:
            raise container.FormatError(
                f"{path}: parameter {entry['name']} truncated: expected {size} bytes, "
                f"got {len(chunk)}",
            )
        params[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(entry["shape"]).copy()
        offset += size
    config = UNetConfig.from_dict(header["config"])
    return params, config, header
