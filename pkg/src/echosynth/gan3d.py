"""Paired 3D Pix2pix: label map -> echo-like volume.

The generator is a 3D U-Net whose decoder upsamples either with strided
transposed convolutions or with trilinear interpolation followed by a 3x3x3
convolution; the discriminator is a 3D PatchGAN over the (label, image) pair.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .engine import ops
from .engine.nn import Conv3d, ConvTranspose3d, InstanceNorm3d, Module
from .engine.optim import Adam
from .engine.tensor import Tape, Tensor
from .pipeline.io import ModelCheckpoint
from .volume import NUM_CLASSES, LabelVolume, Volume

UPSAMPLE_MODES = ("transposed", "trilinear")
CHECKPOINT_KIND = "pix2pix3d"


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


@dataclass
class GeneratorConfig:
    levels: int = 3
    base_channels: int = 16
    upsample_mode: str = "transposed"
    in_channels: int = 1
    out_channels: int = 1
    init_seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ValueError(f"upsample_mode must be one of {UPSAMPLE_MODES}, got {self.upsample_mode!r}")


@dataclass
class DiscriminatorConfig:
    layers: int = 3
    base_channels: int = 16
    kernel: int = 3
    init_seed: int = 1

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.kernel < 2:
            raise ValueError(f"kernel must be >= 2, got {self.kernel}")

    def receptive_field(self) -> int:
        # final 1x1x1 conv, then `layers` stride-2 convs walking back to the input
        rf = 1
        for _ in range(self.layers):
            rf = rf * 2 + (self.kernel - 2)
        return rf


@dataclass
class AugmentConfig:
    blur_sigma_range: tuple = (0.0, 1.0)
    rotation_range: float = 10.0
    probability: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        lo, hi = (float(v) for v in self.blur_sigma_range)
        if not 0.0 <= lo <= hi:
            raise ValueError(f"blur_sigma_range must satisfy 0 <= lo <= hi, got {self.blur_sigma_range}")
        if self.rotation_range < 0:
            raise ValueError(f"rotation_range must be >= 0, got {self.rotation_range}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must lie in [0, 1], got {self.probability}")
        self.blur_sigma_range = (lo, hi)


@dataclass
class GanTrainConfig:
    epochs: int = 200
    lr: float = 2e-4
    lambda_l1: float = 100.0
    batch_size: int = 1
    seed: int = 0
    betas: tuple = (0.5, 0.999)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.lambda_l1 < 0:
            raise ValueError(f"lambda_l1 must be >= 0, got {self.lambda_l1}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


class Generator(Module):
    """3D U-Net. Encoder: ``levels`` k4 s2 convs; decoder mirrors it with skips.

    Layout follows the usual Pix2pix U-Net block: no norm on the outermost and
    innermost encoder convs, LeakyReLU(0.2) before each down conv, ReLU before
    each up step, instance norm after every inner up step, and a tanh head
    rescaled to [0, 1].
    """

    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        L, b = cfg.levels, cfg.base_channels
        ch = [cfg.in_channels] + [b * 2 ** min(l, 3) for l in range(L)]
        for l in range(1, L + 1):
            self.add_module(f"enc{l}", Conv3d(ch[l - 1], ch[l], 4, 2, 1, rng=rng))
            if 1 < l < L:
                self.add_module(f"enc{l}_norm", InstanceNorm3d(ch[l]))
        for l in range(L, 0, -1):
            cin = ch[l] if l == L else 2 * ch[l]
            cout = cfg.out_channels if l == 1 else ch[l - 1]
            if cfg.upsample_mode == "transposed":
                self.add_module(f"dec{l}", ConvTranspose3d(cin, cout, 4, 2, 1, rng=rng))
            else:
                self.add_module(f"dec{l}", Conv3d(cin, cout, 3, 1, 1, rng=rng))
            if l > 1:
                self.add_module(f"dec{l}_norm", InstanceNorm3d(cout))

    def check_input(self, shape) -> None:
        if len(shape) != 5 or shape[1] != self.cfg.in_channels:
            raise ValueError(f"generator expects [N,{self.cfg.in_channels},X,Y,Z] input, got {tuple(shape)}")
        f = 2 ** self.cfg.levels
        for axis, n in zip("xyz", shape[2:]):
            if n % f:
                raise ValueError(f"input extent along {axis} ({n}) is not divisible by 2^levels = {f}")

    def _up(self, l: int, h: Tensor) -> Tensor:
        mod = getattr(self, f"dec{l}")
        if self.cfg.upsample_mode == "trilinear":
            h = ops.trilinear_upsample(h, 2)
        return mod(h)

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x.shape)
        L = self.cfg.levels
        skips = []
        h = x
        for l in range(1, L + 1):
            if l > 1:
                h = ops.leaky_relu(h, 0.2)
            h = getattr(self, f"enc{l}")(h)
            if 1 < l < L:
                h = getattr(self, f"enc{l}_norm")(h)
            skips.append(h)
        for l in range(L, 0, -1):
            if l < L:
                h = ops.concat([h, skips[l - 1]], axis=1)
            h = self._up(l, ops.relu(h))
            if l > 1:
                h = getattr(self, f"dec{l}_norm")(h)
        return (ops.tanh(h) + 1.0) * 0.5


class Discriminator(Module):
    """PatchGAN: ``layers`` stride-2 convs then a 1x1x1 conv to one logit per patch."""

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        cin = 2
        for l in range(1, cfg.layers + 1):
            cout = cfg.base_channels * 2 ** min(l - 1, 3)
            self.add_module(f"conv{l}", Conv3d(cin, cout, cfg.kernel, 2, cfg.kernel // 2, rng=rng))
            if l > 1:
                self.add_module(f"norm{l}", InstanceNorm3d(cout))
            cin = cout
        self.head = Conv3d(cin, 1, 1, 1, 0, rng=rng)

    def output_shape(self, spatial) -> tuple:
        out = tuple(spatial)
        for _ in range(self.cfg.layers):
            out = tuple(ops.conv_output_extent(n, self.cfg.kernel, 2, self.cfg.kernel // 2) for n in out)
        return out

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[1] != 2:
            raise ValueError(f"discriminator expects [N,2,X,Y,Z] (labels, image), got {x.shape}")
        rf = self.cfg.receptive_field()
        if rf >= min(x.shape[2:]):
            raise ValueError(f"receptive field {rf} is not smaller than the input extents {x.shape[2:]}")
        h = x
        for l in range(1, self.cfg.layers + 1):
            h = getattr(self, f"conv{l}")(h)
            if l > 1:
                h = getattr(self, f"norm{l}")(h)
            h = ops.leaky_relu(h, 0.2)
        return self.head(h)


def build_generator(cfg: GeneratorConfig = GeneratorConfig()) -> Generator:
    return Generator(cfg)


def build_discriminator(cfg: DiscriminatorConfig = DiscriminatorConfig()) -> Discriminator:
    return Discriminator(cfg)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _check_finite(name: str, t: Tensor) -> None:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"{name} contains non-finite values")


def discriminator_loss(d_real_logits: Tensor, d_fake_logits: Tensor) -> Tensor:
    return (ops.bce_with_logits(d_real_logits, 1.0) + ops.bce_with_logits(d_fake_logits, 0.0)) * 0.5


def generator_loss(d_fake_logits: Tensor, fake: Tensor, target: Tensor, lambda_l1: float):
    l1 = ops.mean(ops.abs(fake - target))
    return ops.bce_with_logits(d_fake_logits, 1.0) + l1 * float(lambda_l1), l1


def gan_loss(d_real_logits: Tensor, d_fake_logits: Tensor, fake_image: Tensor, target_image: Tensor,
             lambda_l1: float = 100.0) -> dict:
    """cGAN + L1 objective.

    Returns ``{"loss_D", "loss_G", "l1_term"}`` as scalar tensors. The same
    ``d_fake_logits`` feeds both terms, so callers that want the detached-fake
    discriminator update should use :func:`discriminator_loss` separately.
    """
    if fake_image.shape != target_image.shape:
        raise ValueError(f"fake {fake_image.shape} and target {target_image.shape} shapes differ")
    for name, t in (("d_real_logits", d_real_logits), ("d_fake_logits", d_fake_logits),
                    ("fake_image", fake_image), ("target_image", target_image)):
        _check_finite(name, t)
    loss_g, l1 = generator_loss(d_fake_logits, fake_image, target_image, lambda_l1)
    return {"loss_D": discriminator_loss(d_real_logits, d_fake_logits), "loss_G": loss_g, "l1_term": l1}


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def transform_pair(image: Volume, labels: LabelVolume, angle_deg: float = 0.0, blur_sigma: float = 0.0):
    """Rotate both volumes about the slice (z) axis and blur the image.

    Linear interpolation for the image, nearest neighbour for the labels.
    """
    img, lab = image.data, labels.classes
    if angle_deg != 0.0:
        img = ndimage.rotate(img, angle_deg, axes=(0, 1), reshape=False, order=1, mode="nearest")
        lab = ndimage.rotate(lab, angle_deg, axes=(0, 1), reshape=False, order=0, mode="nearest")
    if blur_sigma > 0.0:
        img = ndimage.gaussian_filter(img, blur_sigma, mode="nearest")
    return Volume(img, image.spacing), LabelVolume(lab, labels.spacing)


def augment_pair(image: Volume, labels: LabelVolume, cfg: AugmentConfig, rng: np.random.Generator):
    # always draw the same number of variates so the stream stays aligned
    u = rng.random(2)
    angle = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
    sigma = rng.uniform(*cfg.blur_sigma_range)
    if not cfg.enabled:
        return image, labels
    return transform_pair(image, labels,
                          angle if u[0] < cfg.probability else 0.0,
                          sigma if u[1] < cfg.probability else 0.0)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _as_pairs(dataset) -> list:
    if hasattr(dataset, "load_pairs"):
        dataset = dataset.load_pairs()
    pairs = list(dataset)
    for i, pair in enumerate(pairs):
        if len(pair) != 2 or not isinstance(pair[0], Volume) or not isinstance(pair[1], LabelVolume):
            raise ValueError(f"dataset entry {i} is not an (image, labels) pair")
    return pairs


def label_input(labels) -> np.ndarray:
    arr = labels.as_intensity() if isinstance(labels, LabelVolume) else np.asarray(labels, np.float32) / (NUM_CLASSES - 1)
    return arr[None, None]


def make_checkpoint(G: Generator, D: Discriminator | None = None) -> ModelCheckpoint:
    config = {"kind": CHECKPOINT_KIND, "generator": asdict(G.cfg)}
    params = [("generator." + n, p.data.copy()) for n, p in G.named_parameters()]
    if D is not None:
        config["discriminator"] = asdict(D.cfg)
        params += [("discriminator." + n, p.data.copy()) for n, p in D.named_parameters()]
    return ModelCheckpoint(config, dict(params))


def load_generator(checkpoint) -> Generator:
    if not isinstance(checkpoint, ModelCheckpoint):
        checkpoint = ModelCheckpoint.load(checkpoint)
    if checkpoint.config.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"checkpoint kind {checkpoint.config.get('kind')!r} is not {CHECKPOINT_KIND!r}")
    G = Generator(GeneratorConfig(**checkpoint.config["generator"]))
    G.load_state_dict(checkpoint.subset("generator."))
    return G


def train_gan(dataset, gcfg: GeneratorConfig = GeneratorConfig(), dcfg: DiscriminatorConfig = DiscriminatorConfig(),
              tcfg: GanTrainConfig = GanTrainConfig(), log=None):
    """Alternating Adam updates of D (on the detached fake) and G.

    Returns ``(checkpoint, history)`` where history holds one dict per epoch
    with the epoch-mean ``loss_D``, ``loss_G`` and ``l1_term``.
    """
    pairs = _as_pairs(dataset)
    if not pairs:
        raise ValueError("train_gan needs at least one (image, labels) pair")
    G, D = Generator(gcfg), Discriminator(dcfg)
    opt_g = Adam(G.named_parameters(), tcfg.lr, tcfg.betas)
    opt_d = Adam(D.named_parameters(), tcfg.lr, tcfg.betas)
    ss = np.random.SeedSequence(tcfg.seed)
    order_rng, aug_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    history = []
    for epoch in range(tcfg.epochs):
        sums = np.zeros(3)
        batches = 0
        order = order_rng.permutation(len(pairs))
        for start in range(0, len(order), tcfg.batch_size):
            imgs, labs = [], []
            for i in order[start : start + tcfg.batch_size]:
                img, lab = augment_pair(*pairs[i], tcfg.augment, aug_rng)
                imgs.append(img.data[None, None])
                labs.append(label_input(lab))
            x = Tensor(np.concatenate(labs))
            y = Tensor(np.concatenate(imgs))

            with Tape() as tape_g:
                fake = G(x)
                # discriminator step on its own tape, against the detached fake
                with Tape() as tape_d:
                    d_real = D(ops.concat([x, y], axis=1))
                    d_fake = D(ops.concat([x, fake.detach()], axis=1))
                    loss_d = discriminator_loss(d_real, d_fake)
                opt_d.zero_grad()
                tape_d.backward(loss_d)
                opt_d.step()
                loss_g, l1 = generator_loss(D(ops.concat([x, fake], axis=1)), fake, y, tcfg.lambda_l1)
            opt_g.zero_grad()
            tape_g.backward(loss_g)
            opt_g.step()
            D.zero_grad()

            vals = np.array([loss_d.item(), loss_g.item(), l1.item()])
            if not np.all(np.isfinite(vals)):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            sums += vals
            batches += 1
        m = sums / batches
        history.append({"epoch": epoch, "loss_D": float(m[0]), "loss_G": float(m[1]), "l1_term": float(m[2])})
        if log is not None:
            log(history[-1])
    return make_checkpoint(G, D), history


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss_D", "loss_G", "l1_term"])
    for h in history:
        w.writerow([h["epoch"], repr(h["loss_D"]), repr(h["loss_G"]), repr(h["l1_term"])])
    return buf.getvalue()


def save_history(history, path) -> None:
    Path(path).write_text(history_csv(history))


# ---------------------------------------------------------------------------
# inference and diagnostics
# ---------------------------------------------------------------------------


def synthesize(checkpoint, labels: LabelVolume) -> Volume:
    G = checkpoint if isinstance(checkpoint, Generator) else load_generator(checkpoint)
    out = G(Tensor(label_input(labels))).data[0, 0]
    return Volume(np.clip(out, 0.0, 1.0), labels.spacing)


def checkerboard_patterns(shape) -> list[np.ndarray]:
    """The 7 alternating-sign lattices (-1)^(sum of coords over a non-empty axis subset)."""
    grids = np.indices(shape)
    pats = []
    for mask in range(1, 8):
        s = np.zeros(shape, dtype=np.int64)
        for ax in range(3):
            if mask >> ax & 1:
                s = s + grids[ax]
        pats.append(np.where(s % 2 == 0, 1.0, -1.0))
    return pats


def checkerboard_energy(vol) -> float:
    """Fraction of (mean-removed) energy on the Nyquist lattice, in [0, 1]."""
    v = np.asarray(vol.data if isinstance(vol, Volume) else vol, dtype=np.float64)
    if v.ndim != 3 or min(v.shape) < 2:
        raise ValueError(f"checkerboard_energy needs a 3-D volume with extents >= 2, got {v.shape}")
    v = v - v.mean()
    vv = float(np.sum(v * v))
    if vv <= 1e-30 * max(v.size, 1):
        return 0.0
    e = sum(float(np.sum(v * c)) ** 2 / (vv * float(np.sum(c * c))) for c in checkerboard_patterns(v.shape))
    return float(min(max(e, 0.0), 1.0))
