"""Fixed 3D U-Net segmenter trained with Dice + cross-entropy under k-fold CV."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from .engine import ops
from .engine.nn import Conv3d, ConvTranspose3d, InstanceNorm3d, Module
from .engine.optim import Adam
from .engine.tensor import Tape, Tensor
from .pipeline.io import ModelCheckpoint
from .volume import NUM_CLASSES, STRUCTURE_IDS, STRUCTURES, LabelVolume, Volume

CHECKPOINT_KIND = "unet3d-seg"
SOFT_DICE_EPS = 1e-5


@dataclass
class SegConfig:
    folds: int = 5
    epochs: int = 60
    lr: float = 0.01
    levels: int = 3
    base_channels: int = 8
    num_classes: int = NUM_CLASSES
    batch_size: int = 2
    seed: int = 0
    poly_decay: bool = False
    leaky_slope: float = 0.01

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError(f"folds must be >= 2, got {self.folds}")
        if self.num_classes != NUM_CLASSES:
            raise ValueError(f"num_classes must be {NUM_CLASSES}, got {self.num_classes}")
        if self.epochs < 1 or self.batch_size < 1 or self.levels < 1 or self.base_channels < 1:
            raise ValueError("epochs, batch_size, levels and base_channels must be positive")

    def lr_at(self, epoch: int) -> float:
        if not self.poly_decay:
            return self.lr
        return self.lr * (1.0 - epoch / self.epochs) ** 0.9


@dataclass
class FoldResult:
    fold_index: int
    dice: dict
    checkpoint: ModelCheckpoint | None = field(default=None, repr=False)
    val_indices: tuple = ()

    def __post_init__(self):
        for k, v in self.dice.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"fold {self.fold_index}: Dice {k}={v} outside [0, 1]")

    @property
    def mean_dice(self) -> float:
        return float(np.mean([self.dice[s] for s in STRUCTURES]))


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


class _Block(Module):
    """conv -> instance norm -> leaky ReLU, twice; the first conv may be strided."""

    def __init__(self, cin, cout, stride, rng, slope):
        super().__init__()
        self.slope = slope
        std1 = np.sqrt(2.0 / (cin * 27))
        std2 = np.sqrt(2.0 / (cout * 27))
        self.conv1 = Conv3d(cin, cout, 3, stride, 1, rng=rng, init_std=std1)
        self.norm1 = InstanceNorm3d(cout)
        self.conv2 = Conv3d(cout, cout, 3, 1, 1, rng=rng, init_std=std2)
        self.norm2 = InstanceNorm3d(cout)

    def forward(self, x):
        x = ops.leaky_relu(self.norm1(self.conv1(x)), self.slope)
        return ops.leaky_relu(self.norm2(self.conv2(x)), self.slope)


class UNet3D(Module):
    def __init__(self, cfg: SegConfig = SegConfig()):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        ch = [cfg.base_channels * 2 ** min(l, 3) for l in range(cfg.levels + 1)]
        self.enc0 = _Block(1, ch[0], 1, rng, cfg.leaky_slope)
        for l in range(1, cfg.levels + 1):
            self.add_module(f"enc{l}", _Block(ch[l - 1], ch[l], 2, rng, cfg.leaky_slope))
        for l in range(cfg.levels, 0, -1):
            self.add_module(f"up{l}", ConvTranspose3d(ch[l], ch[l - 1], 2, 2, 0, rng=rng,
                                                      init_std=np.sqrt(1.0 / ch[l])))
            self.add_module(f"dec{l}", _Block(2 * ch[l - 1], ch[l - 1], 1, rng, cfg.leaky_slope))
        self.head = Conv3d(ch[0], cfg.num_classes, 1, 1, 0, rng=rng, init_std=np.sqrt(1.0 / ch[0]))

    def check_input(self, shape) -> None:
        f = 2 ** self.cfg.levels
        for axis, n in zip("xyz", shape[-3:]):
            if n % f:
                raise ValueError(f"input extent along {axis} ({n}) is not divisible by 2^levels = {f}")

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x.shape)
        skips = [self.enc0(x)]
        for l in range(1, self.cfg.levels + 1):
            skips.append(getattr(self, f"enc{l}")(skips[-1]))
        h = skips[-1]
        for l in range(self.cfg.levels, 0, -1):
            h = getattr(self, f"up{l}")(h)
            h = getattr(self, f"dec{l}")(ops.concat([h, skips[l - 1]], axis=1))
        return self.head(h)


def normalize_input(vol) -> np.ndarray:
    """Per-volume z-score, shaped [1, 1, X, Y, Z]."""
    v = np.asarray(vol.data if isinstance(vol, Volume) else vol, dtype=np.float32)
    sd = float(v.std())
    v = (v - v.mean()) / (sd if sd > 1e-8 else 1.0)
    return v[None, None].astype(np.float32)


# ---------------------------------------------------------------------------
# loss and splits
# ---------------------------------------------------------------------------


def _target_array(target) -> np.ndarray:
    if isinstance(target, LabelVolume):
        t = target.classes[None]
    elif isinstance(target, (list, tuple)) and target and isinstance(target[0], LabelVolume):
        t = np.stack([lv.classes for lv in target])
    else:
        t = np.asarray(target)
    if t.size and (t.min() < 0 or t.max() >= NUM_CLASSES):
        raise ValueError(f"target class ids must lie in 0..{NUM_CLASSES - 1}")
    return t.astype(np.int64)


def one_hot(t: np.ndarray, k: int = NUM_CLASSES) -> np.ndarray:
    return np.moveaxis(np.eye(k, dtype=np.float32)[t], -1, 1)


def dice_ce_loss(logits: Tensor, target) -> Tensor:
    """Cross-entropy plus (1 - mean soft Dice over the foreground classes).

    Soft Dice pools voxels over the whole batch: (2 Σ p g + ε) / (Σ p + Σ g + ε).
    """
    t = _target_array(target)
    if logits.ndim != 5 or logits.shape[1] != NUM_CLASSES or logits.shape[:1] + logits.shape[2:] != t.shape:
        raise ValueError(f"logits {logits.shape} and target {t.shape} are inconsistent")
    g = one_hot(t)
    logp = ops.log_softmax(logits, axis=1)
    nvox = t.size
    ce = ops.sum(logp * g) * np.float32(-1.0 / nvox)
    p = ops.exp(logp)
    axes = (0, 2, 3, 4)
    inter = ops.sum(p * g, axis=axes)
    denom = ops.sum(p, axis=axes) + g.sum(axis=axes) + np.float32(SOFT_DICE_EPS)
    soft = (inter * 2.0 + np.float32(SOFT_DICE_EPS)) / denom
    fg = np.array([0.0] + [1.0] * (NUM_CLASSES - 1), dtype=np.float32)
    mean_dice = ops.sum(soft * fg) * np.float32(1.0 / (NUM_CLASSES - 1))
    return ce + (1.0 - mean_dice)


def kfold_split(n: int, k: int, seed: int = 0) -> list[np.ndarray]:
    """Shuffle ``range(n)`` with ``seed`` and deal it into ``k`` near-equal folds."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if n < k:
        raise ValueError(f"cannot split {n} items into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


# ---------------------------------------------------------------------------
# training / inference
# ---------------------------------------------------------------------------


def _as_pairs(dataset) -> list:
    if hasattr(dataset, "load_pairs"):
        dataset = dataset.load_pairs()
    pairs = list(dataset)
    for i, pair in enumerate(pairs):
        if len(pair) != 2 or pair[1] is None:
            raise ValueError(f"dataset entry {i} has no label volume")
    return pairs


def make_checkpoint(model: UNet3D) -> ModelCheckpoint:
    return ModelCheckpoint({"kind": CHECKPOINT_KIND, "seg": asdict(model.cfg)}, model.state_dict())


def load_model(checkpoint) -> UNet3D:
    if isinstance(checkpoint, UNet3D):
        return checkpoint
    if not isinstance(checkpoint, ModelCheckpoint):
        checkpoint = ModelCheckpoint.load(checkpoint)
    if checkpoint.config.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"checkpoint kind {checkpoint.config.get('kind')!r} is not {CHECKPOINT_KIND!r}")
    model = UNet3D(SegConfig(**checkpoint.config["seg"]))
    model.load_state_dict(checkpoint.params)
    return model


def fit(pairs, cfg: SegConfig, seed: int | None = None, log=None) -> UNet3D:
    """Train one U-Net on all ``pairs`` (last-epoch weights are kept)."""
    if not pairs:
        raise ValueError("cannot train on an empty set")
    seed = cfg.seed if seed is None else seed
    model = UNet3D(SegConfig(**{**asdict(cfg), "seed": seed}))
    opt = Adam(model.named_parameters(), cfg.lr)
    xs = [normalize_input(img) for img, _ in pairs]
    ys = [lab.classes for _, lab in pairs]
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = Tensor(np.concatenate([xs[i] for i in idx]))
            y = np.stack([ys[i] for i in idx])
            with Tape() as tape:
                loss = dice_ce_loss(model(x), y)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite segmentation loss at epoch {epoch}")
            opt.zero_grad()
            tape.backward(loss)
            opt.step(cfg.lr_at(epoch))
            total += loss.item() * len(idx)
        if log is not None:
            log({"epoch": epoch, "loss": total / len(pairs)})
    return model


def predict(checkpoint, vol) -> LabelVolume:
    """Arg-max labels; ``np.argmax`` returns the first maximum, i.e. the lower class id on ties."""
    model = load_model(checkpoint)
    logits = model(Tensor(normalize_input(vol))).data[0]
    spacing = vol.spacing if isinstance(vol, Volume) else (1.0, 1.0, 1.0)
    return LabelVolume(np.argmax(logits, axis=0).astype(np.uint8), spacing)


def train_seg(dataset, cfg: SegConfig = SegConfig(), log=None) -> list[FoldResult]:
    """k-fold cross-validation: one model per fold, validated with :mod:`metrics`."""
    pairs = _as_pairs(dataset)
    folds = kfold_split(len(pairs), cfg.folds, cfg.seed)
    results = []
    for k, val in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(len(pairs)), val)
        if len(val) == 0 or len(train_idx) == 0:
            raise ValueError(f"fold {k} has an empty training or validation split")
        model = fit([pairs[i] for i in train_idx], cfg, seed=cfg.seed * 1000 + k,
                    log=None if log is None else (lambda rec, k=k: log({"fold": k, **rec})))
        ckpt = make_checkpoint(model)
        per = {s: [] for s in STRUCTURES}
        for i in val:
            pred = predict(model, pairs[i][0])
            for s in STRUCTURES:
                per[s].append(metrics.dice(pred, pairs[i][1], STRUCTURE_IDS[s]))
        results.append(FoldResult(k, {s: float(np.mean(v)) for s, v in per.items()}, ckpt,
                                  tuple(int(i) for i in val)))
    return results


def best_fold(results: list[FoldResult]) -> FoldResult:
    """Highest mean validation Dice across structures; the lower fold index wins ties."""
    return max(results, key=lambda r: (r.mean_dice, -r.fold_index))


def folds_csv(model_name: str, results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "structure", "fold", "dice"])
    for s in STRUCTURES:
        for r in results:
            w.writerow([model_name, s, r.fold_index, repr(r.dice[s])])
    return buf.getvalue()
