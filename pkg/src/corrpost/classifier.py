"""Slim residual CNN over 32x32 response patches: build, augment, train, predict."""
from __future__ import annotations

import enum
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from . import tensornet as tn
from .errors import InputError, ModelStateError, ShapeError, TrainingDivergenceError
from .response import PATCH, ResponsePatch

log = logging.getLogger(__name__)

__all__ = [
    "AugmentConfig",
    "TrainConfig",
    "TrainReport",
    "Model",
    "Decision",
    "Prediction",
    "build_model",
    "augment",
    "rotate_bilinear",
    "train",
    "predict",
    "predict_scores",
    "stratified_split",
    "save_model",
    "load_model",
]


@dataclass
class AugmentConfig:
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rot_max_deg: float = 90.0
    noise_sigma_max: float = 0.05

    def __post_init__(self):
        if not (0 <= self.hflip_p <= 1 and 0 <= self.vflip_p <= 1):
            raise InputError("flip probabilities must lie in [0, 1]")
        if not 0 <= self.rot_max_deg <= 180:
            raise InputError("rot_max_deg must lie in [0, 180]")
        if self.noise_sigma_max < 0:
            raise InputError("noise_sigma_max must be >= 0")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    l2: float = 0.005
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    val_fraction: float = 0.1
    base_width: int = 21
    recalibrate_bn: bool = True

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")
        if self.l2 < 0:
            raise InputError("l2 must be >= 0")
        if self.batch_size < 2:
            raise InputError("batch_size must be >= 2 for batch norm")
        if self.optimizer not in ("adam", "sgd"):
            raise InputError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.val_fraction < 1:
            raise InputError("val_fraction must lie in [0, 1)")

    def make_optimizer(self):
        if self.optimizer == "adam":
            return tn.Adam(self.lr, self.beta1, self.beta2, self.eps)
        return tn.SGD(self.lr, self.momentum)


@dataclass
class TrainReport:
    epoch_loss: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    n_train: int = 0
    n_val: int = 0
    train_counts: dict = field(default_factory=dict)
    val_counts: dict = field(default_factory=dict)
    split_disjoint: bool = True
    final_val_accuracy: float | None = None
    param_count: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Everything except wall-clock timings, so reruns serialize identically."""
        d = asdict(self)
        del d["epoch_seconds"]
        return d


# --- model -------------------------------------------------------------------

@dataclass
class Model:
    params: tn.ModelParams
    base_width: int = 21
    n_stages: int = 4
    blocks_per_stage: int = 2
    input_size: int = PATCH

    def stage_widths(self) -> list[int]:
        return [self.base_width * 2 ** i for i in range(self.n_stages)]

    def block_names(self):
        for s in range(self.n_stages):
            for b in range(self.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                yield f"stage{s + 1}.block{b + 1}", stride

    def forward(self, x, train: bool = False) -> tn.Tensor:
        """Probabilities of the true class, shape ``(N,)``."""
        p = self.params
        if not isinstance(x, tn.Tensor):
            arr = np.asarray(x, dtype=p.dtype)
            if arr.ndim == 2:
                arr = arr[None]
            if arr.ndim == 3:
                arr = arr[:, None]
            x = tn.Tensor(arr)
        h = tn.batchnorm(x, p["input_bn.gain"], p["input_bn.shift"], p.bn["input_bn"], train)
        h = tn.conv2d(h, p["stem.conv"], 1)
        h = tn.batchnorm(h, p["stem.bn.gain"], p["stem.bn.shift"], p.bn["stem.bn"], train)
        h = tn.swish(h)
        for name, stride in self.block_names():
            h = tn.residual_block(h, p, name, stride, train)
        h = tn.global_avg_pool(h)
        return tn.dense_sigmoid(h, p["head.weight"], p["head.bias"])

    def architecture(self) -> dict:
        layers = [{"kind": "INPUTBN", "width": 1, "stride": 1},
                  {"kind": "CONV3x3", "width": self.base_width, "stride": 1},
                  {"kind": "BATCHNORM", "width": self.base_width, "stride": 1},
                  {"kind": "SWISH", "width": self.base_width, "stride": 1}]
        widths = self.stage_widths()
        for name, stride in self.block_names():
            s = int(name[5]) - 1
            layers.append({"kind": "RESBLOCK", "name": name, "width": widths[s], "stride": stride})
        layers += [{"kind": "GLOBALAVGPOOL", "width": widths[-1], "stride": 1},
                   {"kind": "DENSE", "width": 1, "stride": 1},
                   {"kind": "SIGMOID", "width": 1, "stride": 1}]
        return {
            "base_width": self.base_width,
            "n_stages": self.n_stages,
            "blocks_per_stage": self.blocks_per_stage,
            "input_size": self.input_size,
            "block_form": "post-activation basic block, Swish",
            "stem": "conv3x3 stride 1, no max-pool",
            "param_count": self.params.total_count,
            "layers": layers,
        }


def build_model(base_width: int = 21, *, seed: int = 0, dtype=np.float32, n_stages: int = 4,
                blocks_per_stage: int = 2, input_size: int = PATCH) -> Model:
    if base_width < 1:
        raise InputError("base_width must be >= 1")
    rng = np.random.default_rng(seed)
    p = tn.ModelParams(dtype)
    p.add_bn("input_bn", 1)
    tn.init_conv(p, "stem.conv", 1, base_width, 3, rng)
    p.add_bn("stem.bn", base_width)
    model = Model(p, base_width, n_stages, blocks_per_stage, input_size)
    widths = model.stage_widths()
    in_ch = base_width
    for name, stride in model.block_names():
        w = widths[int(name[5]) - 1]
        tn.init_residual_block(p, name, in_ch, w, stride, rng)
        in_ch = w
    limit = np.sqrt(6.0 / (in_ch + 1))
    p.add("head.weight", rng.uniform(-limit, limit, size=in_ch), decay=True)
    p.add("head.bias", np.zeros(()))
    return model


def _state_from(model: Model, arrays) -> None:
    p = model.params
    for name, t in p.items():
        if name not in arrays:
            raise ModelStateError(f"checkpoint lacks tensor {name}")
        t.data = np.asarray(arrays[name], dtype=p.dtype).reshape(t.shape).copy()
    for name, st in p.bn.items():
        mean = arrays.get(f"{name}.running_mean")
        var = arrays.get(f"{name}.running_var")
        if mean is None or var is None:
            raise ModelStateError(f"checkpoint lacks running statistics for {name}")
        st.mean = np.asarray(mean, dtype=p.dtype).copy()
        st.var = np.asarray(var, dtype=p.dtype).copy()


def save_model(path, model: Model) -> None:
    tn.save_checkpoint(path, model.params, model.architecture())


def load_model(path) -> Model:
    arch = json.loads(Path(str(path) + ".json").read_text())
    model = build_model(arch["base_width"], n_stages=arch["n_stages"],
                        blocks_per_stage=arch["blocks_per_stage"], input_size=arch["input_size"])
    _state_from(model, tn.load_checkpoint(path))
    return model


# --- augmentation -----------------------------------------------------------

def rotate_bilinear(img: np.ndarray, angle_deg: float, center=None) -> np.ndarray:
    """Rotate counter-clockwise about ``center`` (row, col); bilinear, zero fill.

    ``center`` defaults to the geometric image center, where a 90 degree turn
    agrees with ``np.rot90(img)``.
    """
    h, w = img.shape
    cy, cx = ((h - 1) / 2.0, (w - 1) / 2.0) if center is None else center
    th = np.deg2rad(angle_deg)
    c, s = np.cos(th), np.sin(th)
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = rr - cy, cc - cx
    src_r = cy + c * dy + s * dx
    src_c = cx - s * dy + c * dx
    return map_coordinates(np.asarray(img, dtype=np.float64), [src_r, src_c], order=1,
                           mode="grid-constant", cval=0.0)


def response_origin(shape) -> tuple[int, int]:
    """Pixel holding zero lag in a centered or peak-centered response patch."""
    return shape[0] // 2, shape[1] // 2


def flip_about_origin(x: np.ndarray, axis: int) -> np.ndarray:
    """Mirror ``i -> -i (mod n)`` relative to the origin pixel ``n // 2``.

    Unlike ``np.flip`` this keeps the origin pixel in place, so a peak at zero
    lag stays at zero lag.
    """
    n = x.shape[axis]
    o = n // 2
    idx = (2 * o - np.arange(n)) % n
    return np.take(x, idx, axis=axis)


def augment(patch, cfg: AugmentConfig, rng):
    """Random flips, rotation in ``[0, rot_max_deg]``, Gaussian noise, clamp to [0, 1].

    Flips and rotation act about the response origin (see
    :func:`response_origin`): mirroring or rotating a scene together with its
    filter transforms the correlation plane about zero lag, not about the
    geometric patch center. Accepts a :class:`ResponsePatch` or a bare 2D
    array and returns the same kind.
    """
    data = patch.data if isinstance(patch, ResponsePatch) else np.asarray(patch)
    x = np.array(data, dtype=np.float64)
    if rng.random() < cfg.hflip_p:
        x = flip_about_origin(x, 1)
    if rng.random() < cfg.vflip_p:
        x = flip_about_origin(x, 0)
    angle = rng.uniform(0.0, cfg.rot_max_deg) if cfg.rot_max_deg > 0 else 0.0
    if angle:
        x = rotate_bilinear(x, angle, center=response_origin(x.shape))
    sigma = rng.uniform(0.0, cfg.noise_sigma_max) if cfg.noise_sigma_max > 0 else 0.0
    if sigma:
        x = x + rng.normal(0.0, sigma, size=x.shape)
    x = np.clip(x, 0.0, 1.0)
    x = np.ascontiguousarray(x)
    if isinstance(patch, ResponsePatch):
        return ResponsePatch(x, patch.source_resolution, patch.crop_mode)
    return x


# --- training -----------------------------------------------------------------

def stratified_split(labels, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays (train, val) with ``fraction`` of each label held out."""
    labels = np.asarray(labels)
    train_idx, val_idx = [], []
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(fraction * len(idx)))
        val_idx.append(idx[:k])
        train_idx.append(idx[k:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(val_idx))


def predict_scores(model: Model, patches, batch_size: int = 256) -> np.ndarray:
    """True-class probabilities for a stack of patches (inference mode)."""
    x = np.asarray([p.data if isinstance(p, ResponsePatch) else p for p in patches]) \
        if not isinstance(patches, np.ndarray) else patches
    if x.ndim == 2:
        x = x[None]
    out = []
    with tn.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(model.forward(x[i:i + batch_size], train=False).data)
    return np.concatenate(out).astype(np.float64) if out else np.zeros(0)


class Decision(enum.Enum):
    TRUE_CLASS = 1
    FALSE_CLASS = 0


@dataclass(frozen=True)
class Prediction:
    decision: Decision
    score: float


def predict(model: Model, patch, threshold: float = 0.5) -> Prediction:
    """Classify one patch; TRUE_CLASS iff the score reaches ``threshold``."""
    data = patch.data if isinstance(patch, ResponsePatch) else np.asarray(patch)
    if data.shape != (model.input_size, model.input_size):
        raise ShapeError(f"patch {data.shape} does not match model input {model.input_size}")
    score = float(predict_scores(model, data[None])[0])
    return Prediction(Decision.TRUE_CLASS if score >= threshold else Decision.FALSE_CLASS, score)


def _counts(y) -> dict:
    return {str(int(k)): int(v) for k, v in zip(*np.unique(y, return_counts=True))}


def train(patches, labels, cfg: TrainConfig | None = None, *, model: Model | None = None,
          progress=None) -> tuple[Model, TrainReport]:
    """Train the classifier with BCE + L2 under seeded augmentation.

    ``patches`` is an array ``(N, 32, 32)`` (or a list of ResponsePatch) and
    ``labels`` holds 0/1. Returns the trained model and its report.
    """
    cfg = cfg or TrainConfig()
    x = np.asarray([p.data if isinstance(p, ResponsePatch) else p for p in patches],
                   dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise InputError("training data must contain both classes")
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    split_rng, init_rng, shuffle_rng, aug_rng = (np.random.default_rng(s) for s in seeds)
    tr, va = stratified_split(y, cfg.val_fraction, split_rng)
    if model is None:
        model = build_model(cfg.base_width, seed=int(init_rng.integers(2 ** 31)),
                            input_size=x.shape[-1])
    params = model.params
    opt = cfg.make_optimizer()
    decay = params.decay_tensors()
    report = TrainReport(n_train=len(tr), n_val=len(va), train_counts=_counts(y[tr]),
                         val_counts=_counts(y[va]),
                         split_disjoint=not set(tr.tolist()) & set(va.tolist()),
                         param_count=params.total_count, config=asdict(cfg))
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = tr[shuffle_rng.permutation(len(tr))]
        losses, correct, seen = [], 0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            xb = np.stack([augment(x[i], cfg.augment, aug_rng) for i in idx])
            yb = y[idx]
            params.zero_grad()
            prob = model.forward(xb, train=True)
            loss = tn.bce_loss(prob, yb, decay, cfg.l2)
            lv = loss.item()
            if not np.isfinite(lv):
                raise TrainingDivergenceError(f"loss became {lv} in epoch {epoch + 1}",
                                              epoch=epoch + 1)
            tn.backward(loss)
            try:
                opt.step(params)
            except TrainingDivergenceError as exc:
                raise TrainingDivergenceError(f"{exc} in epoch {epoch + 1}", epoch=epoch + 1)
            losses.append(lv * len(idx))
            correct += int(np.sum((prob.data >= 0.5) == (yb == 1)))
            seen += len(idx)
        report.epoch_loss.append(float(np.sum(losses) / max(seen, 1)))
        report.train_accuracy.append(correct / max(seen, 1))
        if len(va):
            scores = predict_scores(model, x[va])
            report.val_accuracy.append(float(np.mean((scores >= 0.5) == (y[va] == 1))))
        report.epoch_seconds.append(time.perf_counter() - t0)
        log.info("epoch %d/%d loss %.4f train acc %.3f val acc %s (%.1fs)", epoch + 1,
                 cfg.epochs, report.epoch_loss[-1], report.train_accuracy[-1],
                 f"{report.val_accuracy[-1]:.3f}" if report.val_accuracy else "-",
                 report.epoch_seconds[-1])
        if progress is not None:
            progress(epoch + 1, report)
    if cfg.recalibrate_bn and cfg.epochs:
        recalibrate_bn(model, x[tr], cfg.batch_size, shuffle_rng)
        if len(va):
            scores = predict_scores(model, x[va])
            report.final_val_accuracy = float(np.mean((scores >= 0.5) == (y[va] == 1)))
    return model, report


def recalibrate_bn(model: Model, patches, batch_size: int = 32, rng=None) -> None:
    """Re-estimate BN running statistics on clean (un-augmented) inputs.

    The running averages collected during training describe augmented
    batches (added noise, zero-filled rotation corners), which shifts the
    input statistics away from what the model sees at inference. One
    gradient-free pass in train mode replaces them with population moments
    pooled over all batches. ``rng`` shuffles the pass so batches mix like
    training batches do.
    """
    x = np.asarray(patches, dtype=np.float64)
    if rng is not None:
        x = x[rng.permutation(len(x))]
    states = list(model.params.bn.values())
    for st in states:
        st.pooled = 0
    try:
        with tn.no_grad():
            for start in range(0, len(x), batch_size):
                xb = x[start:start + batch_size]
                if len(xb) >= 2:
                    model.forward(xb, train=True)
        for st in states:
            st.finish_average()
    finally:
        for st in states:
            st.pooled = None
