"""Training loop, losses, metrics, and checkpointing.

Self-supervised: each training example renders a held-out view of the
scene from its nearest neighbors and penalizes the difference to the real
image with an L1 plus multi-scale feature loss, optionally adding a
least-squares patch adversary.
"""

from __future__ import annotations

import csv
import math
import pickle
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .config import TrainConfig
from .errors import NonFiniteError
from .pipeline import PipelineResult, PreparedViews, SynthesisPipeline, crop_views

CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = b"SVNVS-CKPT\n"


# ---------------------------------------------------------------------------
# perceptual loss


class PerceptualFeatureNet(nn.Module):
    """Frozen random convolutional pyramid for feature-space distances.

    A stand-in for a pretrained perceptual backbone that keeps runs
    self-contained and seed-reproducible; any callable returning a list of
    feature maps can replace it.
    """

    def __init__(self, seed: int = 0, widths=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        chans = [3, *widths]
        layers = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            conv = nn.Conv2d(cin, cout, 3, stride=1 if cin == 3 else 2, padding=1)
            with torch.no_grad():
                std = math.sqrt(2.0 / (cin * 9))
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
                conv.bias.zero_()
            layers.append(conv)
        self.convs = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.convs:
            x = torch.relu(conv(x))
            feats.append(x)
        return feats

    def layer_weights(self) -> list[float]:
        """One over channel count per level."""
        return [1.0 / conv.out_channels for conv in self.convs]


def feature_distance(pred: torch.Tensor, target: torch.Tensor, feature_fn,
                     layer_weights) -> torch.Tensor:
    """Weighted sum of L1 distances between feature pyramids of two images."""
    fp = feature_fn(pred.unsqueeze(0))
    ft = feature_fn(target.unsqueeze(0))
    if len(fp) != len(layer_weights):
        raise ValueError(f"{len(layer_weights)} layer weights for {len(fp)} feature maps")
    total = pred.new_zeros(())
    for w, a, b in zip(layer_weights, fp, ft):
        total = total + w * (a - b).abs().mean()
    return total


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor, feature_fn,
                    layer_weights) -> torch.Tensor:
    """Pixel L1 plus weighted feature-space L1 terms."""
    return (pred - target).abs().mean() + feature_distance(pred, target, feature_fn,
                                                           layer_weights)


# ---------------------------------------------------------------------------
# adversary


class PatchDiscriminator(nn.Module):
    """4-layer patch classifier for least-squares adversarial training."""

    def __init__(self, base_channels: int = 32):
        super().__init__()
        c = base_channels
        self.net = nn.Sequential(
            nn.Conv2d(3, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1, bias=False),
            nn.InstanceNorm2d(2 * c, affine=True),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1, bias=False),
            nn.InstanceNorm2d(4 * c, affine=True),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * c, 1, 4, stride=1, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def lsgan_generator_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    return ((fake_logits - 1.0) ** 2).mean()


def lsgan_discriminator_loss(real_logits: torch.Tensor,
                             fake_logits: torch.Tensor) -> torch.Tensor:
    return 0.5 * (((real_logits - 1.0) ** 2).mean() + (fake_logits ** 2).mean())


# ---------------------------------------------------------------------------
# metrics


def psnr(pred, target) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; inf on exact match."""
    a = np.asarray(pred.detach().cpu() if isinstance(pred, torch.Tensor) else pred,
                   dtype=np.float64)
    b = np.asarray(target.detach().cpu() if isinstance(target, torch.Tensor) else target,
                   dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    k = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 2-D correlation, valid region only."""
    size = len(kernel)
    h, w = img.shape
    out = np.zeros((h, w - size + 1))
    for i, kv in enumerate(kernel):
        out += kv * img[:, i:i + w - size + 1]
    out2 = np.zeros((h - size + 1, w - size + 1))
    for i, kv in enumerate(kernel):
        out2 += kv * out[i:i + h - size + 1, :]
    return out2


def ssim(pred, target) -> float:
    """Structural similarity on luma, 11x11 Gaussian window (sigma 1.5).

    Images are (3, H, W) or (H, W, 3) in [0, 1]; the mean is taken over
    window positions that fit entirely inside the image.
    """
    def luma(x):
        arr = np.asarray(x.detach().cpu() if isinstance(x, torch.Tensor) else x,
                         dtype=np.float64)
        if arr.ndim == 3 and arr.shape[0] == 3:
            arr = arr.transpose(1, 2, 0)
        if arr.ndim == 3:
            return 0.299 * arr[..., 0] + 0.587 * arr[..., 1] + 0.114 * arr[..., 2]
        return arr

    x, y = luma(pred), luma(target)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < 11:
        raise ValueError("image smaller than the 11x11 filter window")
    k = _gaussian_kernel()
    mu_x = _filter_valid(x, k)
    mu_y = _filter_valid(y, k)
    var_x = _filter_valid(x * x, k) - mu_x ** 2
    var_y = _filter_valid(y * y, k) - mu_y ** 2
    cov = _filter_valid(x * y, k) - mu_x * mu_y
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def depth_accuracy(depth_est, depth_gt, planes, mask=None) -> float:
    """Fraction of pixels whose inverse depth is within one plane spacing."""
    est = np.asarray(depth_est.detach().cpu() if isinstance(depth_est, torch.Tensor)
                     else depth_est, dtype=np.float64)
    gt = np.asarray(depth_gt, dtype=np.float64)
    err = np.abs(1.0 / est - 1.0 / gt)
    ok = err <= planes.spacing_inverse() + 1e-12
    if mask is not None:
        if not mask.any():
            raise ValueError("empty evaluation mask")
        ok = ok[mask]
    return float(ok.mean())


def pixel_blend_weight(weights: torch.Tensor, prob: torch.Tensor) -> torch.Tensor:
    """Depth-expected blend weight per source: (N, D, H, W) -> (N, H, W)."""
    return (weights * prob.unsqueeze(0)).sum(dim=1)


# ---------------------------------------------------------------------------
# reports, checkpoints, trainer


@dataclass
class LossReport:
    step: int
    l1: float
    perceptual: float  # feature-space terms only
    adv_g: float
    adv_d: float
    total: float  # l1 + perceptual + lambda_adv * adv_g


def _pack(obj):
    """Replace tensors with (dtype, shape, bytes) records for serialization.

    torch.save rewrites its zip container differently after a load, so a
    saved-loaded-saved file is not byte-identical; a plain pickle of packed
    tensors is, which the checkpoint contract requires. Strings are interned
    so pickle's identity memo sees the same sharing whether a string came
    from source code or from a loaded file.
    """
    if isinstance(obj, torch.Tensor):
        t = obj.detach().cpu().contiguous()
        return {"__tensor__": sys.intern(str(t.dtype).removeprefix("torch.")),
                "shape": list(t.shape), "data": t.numpy().tobytes()}
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_pack(k): _pack(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_pack(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_pack(v) for v in obj)
    return obj


def _unpack(obj):
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            arr = np.frombuffer(obj["data"], dtype=np.dtype(obj["__tensor__"]))
            return torch.from_numpy(arr.copy().reshape(obj["shape"]))
        return {k: _unpack(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_unpack(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_unpack(v) for v in obj)
    return obj


@dataclass
class Checkpoint:
    version: int
    step: int
    config: TrainConfig
    model_state: dict
    optimizer_state: dict
    discriminator_state: dict | None
    discriminator_optimizer_state: dict | None
    torch_rng_state: torch.Tensor

    def save(self, path):
        payload = {
            "version": self.version,
            "step": self.step,
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "model_state": self.model_state,
            "optimizer_state": self.optimizer_state,
            "discriminator_state": self.discriminator_state,
            "discriminator_optimizer_state": self.discriminator_optimizer_state,
            "torch_rng_state": self.torch_rng_state,
        }
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(pickle.dumps(_pack(payload), protocol=4))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if not raw.startswith(CHECKPOINT_MAGIC):
            raise ValueError(f"{path} is not a checkpoint file")
        payload = _unpack(pickle.loads(raw[len(CHECKPOINT_MAGIC):]))
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
        return cls(
            version=payload["version"],
            step=payload["step"],
            config=TrainConfig.from_dict(payload["config"]),
            model_state=payload["model_state"],
            optimizer_state=payload["optimizer_state"],
            discriminator_state=payload["discriminator_state"],
            discriminator_optimizer_state=payload["discriminator_optimizer_state"],
            torch_rng_state=payload["torch_rng_state"],
        )


class Trainer:
    def __init__(self, config: TrainConfig, perceptual: nn.Module | None = None):
        torch.manual_seed(config.seed)
        self.config = config
        self.model = SynthesisPipeline(config)
        self.perceptual = perceptual if perceptual is not None else PerceptualFeatureNet(
            seed=config.seed
        )
        self.layer_weights = (
            self.perceptual.layer_weights()
            if hasattr(self.perceptual, "layer_weights")
            else None
        )
        self.optimizer = torch.optim.Adam(self.model.parameters(),
                                          lr=config.learning_rate, betas=(0.9, 0.999))
        if config.gan:
            self.discriminator = PatchDiscriminator()
            self.disc_optimizer = torch.optim.Adam(self.discriminator.parameters(),
                                                   lr=config.learning_rate,
                                                   betas=(0.9, 0.999))
        else:
            self.discriminator = None
            self.disc_optimizer = None
        self.step_count = 0

    def forward(self, batch: PreparedViews) -> PipelineResult:
        return self.model(batch)

    def step(self, batch: PreparedViews) -> LossReport:
        result = self.model(batch)
        pred, target = result.final, batch.target_image
        l1 = (pred - target).abs().mean()
        if result.candidates is not None and self.config.blend_l1_weight > 0:
            # direct photometric pressure on the pre-refinement blend: wrong
            # depth or visibility shows up here even after the refinement net
            # learns to clean its inputs
            blend = result.aggregated.image.clamp(0, 1)
            l1 = l1 + self.config.blend_l1_weight * (blend - target).abs().mean()
        per = feature_distance(pred, target, self.perceptual, self.layer_weights)

        adv_g = pred.new_zeros(())
        if self.discriminator is not None:
            adv_g = lsgan_generator_loss(self.discriminator(pred.unsqueeze(0)))
        total = l1 + per + self.config.lambda_adv * adv_g
        if not torch.isfinite(total):
            raise NonFiniteError("training loss")
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()

        adv_d = 0.0
        if self.discriminator is not None:
            d_loss = lsgan_discriminator_loss(
                self.discriminator(target.unsqueeze(0)),
                self.discriminator(pred.detach().unsqueeze(0)),
            )
            if not torch.isfinite(d_loss):
                raise NonFiniteError("discriminator loss")
            self.disc_optimizer.zero_grad(set_to_none=True)
            d_loss.backward()
            self.disc_optimizer.step()
            adv_d = float(d_loss.detach())

        self.step_count += 1
        return LossReport(
            step=self.step_count,
            l1=float(l1.detach()),
            perceptual=float(per.detach()),
            adv_g=float(adv_g.detach()),
            adv_d=adv_d,
            total=float(total.detach()),
        )

    @torch.no_grad()
    def evaluate(self, batch: PreparedViews) -> dict:
        result = self.model(batch)
        pred = result.final.clamp(0, 1)
        return {
            "psnr": psnr(pred, batch.target_image),
            "ssim": ssim(pred, batch.target_image),
        }

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            version=CHECKPOINT_VERSION,
            step=self.step_count,
            config=self.config,
            model_state=self.model.state_dict(),
            optimizer_state=self.optimizer.state_dict(),
            discriminator_state=(self.discriminator.state_dict()
                                 if self.discriminator is not None else None),
            discriminator_optimizer_state=(self.disc_optimizer.state_dict()
                                           if self.disc_optimizer is not None else None),
            torch_rng_state=torch.get_rng_state(),
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, config: TrainConfig | None = None) -> "Trainer":
        trainer = cls(config if config is not None else ckpt.config)
        trainer.model.load_state_dict(ckpt.model_state)
        trainer.optimizer.load_state_dict(ckpt.optimizer_state)
        if trainer.discriminator is not None and ckpt.discriminator_state is not None:
            trainer.discriminator.load_state_dict(ckpt.discriminator_state)
            trainer.disc_optimizer.load_state_dict(ckpt.discriminator_optimizer_state)
        trainer.step_count = ckpt.step
        torch.set_rng_state(ckpt.torch_rng_state)
        return trainer


def train_step(batch: PreparedViews, state: Checkpoint,
               config: TrainConfig | None = None) -> tuple[Checkpoint, LossReport]:
    """Pure-functional single step: checkpoint in, checkpoint out."""
    trainer = Trainer.from_checkpoint(state, config)
    report = trainer.step(batch)
    return trainer.checkpoint(), report


# ---------------------------------------------------------------------------
# loop helpers


METRICS_FIELDS = ["step", "l1", "perceptual", "adv_g", "adv_d", "total", "psnr", "ssim"]


class MetricsWriter:
    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(METRICS_FIELDS)

    def write(self, report: LossReport, scores: dict | None = None):
        row = [report.step, f"{report.l1:.6f}", f"{report.perceptual:.6f}",
               f"{report.adv_g:.6f}", f"{report.adv_d:.6f}", f"{report.total:.6f}"]
        if scores:
            row += [f"{scores['psnr']:.4f}", f"{scores['ssim']:.6f}"]
        else:
            row += ["", ""]
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(row)


def _random_crop(batch: PreparedViews, size: tuple[int, int]) -> PreparedViews:
    full_h, full_w = batch.target_image.shape[-2:]
    h, w = min(size[0], full_h), min(size[1], full_w)
    # global torch RNG keeps crop draws inside the checkpointed RNG state
    top = int(torch.randint(0, full_h - h + 1, ()))
    left = int(torch.randint(0, full_w - w + 1, ()))
    return crop_views(batch, top, left, (h, w))


def fit(trainer: Trainer, batches: list[PreparedViews], steps: int,
        metrics_path=None, eval_every: int = 0, eval_batch: PreparedViews | None = None,
        stop_fn=None, log_fn=None) -> list[LossReport]:
    """Round-robin over prepared batches for a fixed number of steps.

    Trains on random windows when the config sets crop_size; a single fixed
    target lets the refiner memorize pixel positions instead of using its
    inputs, and moving windows take that shortcut away. Evaluation always
    scores the full frame. eval_every > 0 scores the eval batch (default:
    first batch) periodically; stop_fn(scores) returning True ends training
    early.
    """
    writer = MetricsWriter(metrics_path) if metrics_path is not None else None
    reports = []
    eval_batch = eval_batch if eval_batch is not None else batches[0]
    crop = trainer.config.crop_size
    for i in range(steps):
        batch = batches[i % len(batches)]
        if crop is not None:
            batch = _random_crop(batch, crop)
        report = trainer.step(batch)
        reports.append(report)
        scores = None
        if eval_every and (report.step % eval_every == 0 or i == steps - 1):
            scores = trainer.evaluate(eval_batch)
        if writer is not None:
            writer.write(report, scores)
        if log_fn is not None:
            log_fn(report, scores)
        if scores is not None and stop_fn is not None and stop_fn(scores):
            break
    return reports
