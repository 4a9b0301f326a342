"""Modified U-Net backbone with a global-average-pooling head.

The backbone maps an image to per-class score maps; averaging each map over
the image gives the predicted semantic proportions. Layout:

* contracting path: four blocks of two 3x3 conv + ReLU, each followed by a
  2x2 max-pool, widths ``base, 2*base, 4*base, 8*base``;
* expansive path: four blocks, each a stride-2 3x3 transpose conv + ReLU
  (upsampling), concatenation with the same-resolution contracting output,
  then a 3x3 conv + ReLU, widths halving back to ``base``;
* a 1x1 conv with ``n_out`` filters and softmax (or sigmoid for one output).

Inputs are shifted from [0, 1] to [-0.5, 0.5] before the first conv. Sides
that are not multiples of 16 are edge-padded and the output is cropped
back, so score maps always match the input size.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .core import ImagePatch, MaskStack, ProportionVector

HeadActivation = Literal["softmax_over_classes", "sigmoid"]
DEPTH = 4
CHECKPOINT_FORMAT = "spseg-checkpoint"
CHECKPOINT_VERSION = 1
INTERPRETATION = {
    "expansive_block": "stride-2 3x3 transpose conv + ReLU, skip concat, 3x3 conv + ReLU",
    "padding": "zero padding inside convs; replicate padding of inputs to a multiple of 16",
    "init": "He-uniform (fan-in) for hidden layers, LeCun-uniform for the head, zero biases; "
            "with a class prior the head starts at zero weights and log-prior biases",
    "input": "pixels shifted by -0.5",
}

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    n_out: int = 6
    base_filters: int = 64
    head_activation: HeadActivation | None = None
    dtype: Literal["float32", "float64"] = "float32"
    depth: int = field(default=DEPTH, init=False)

    def __post_init__(self) -> None:
        if self.head_activation is None:
            act = "sigmoid" if self.n_out == 1 else "softmax_over_classes"
            object.__setattr__(self, "head_activation", act)
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.n_out < 1:
            raise ValueError("n_out must be >= 1")
        if self.base_filters < 4:
            raise ValueError("base_filters must be >= 4")
        if self.head_activation == "softmax_over_classes" and self.n_out < 2:
            raise ValueError("a softmax head needs n_out >= 2 (one channel would be constantly 1)")
        if self.head_activation == "sigmoid" and self.n_out != 1:
            raise ValueError("the sigmoid head is for the single-output binary setting")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {tuple(_DTYPES)}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    @property
    def mode(self) -> str:
        return "binary" if self.head_activation == "sigmoid" else "multiclass"


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(),
    )


class UNet(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_filters * 2 ** k for k in range(DEPTH)]
        self.down = nn.ModuleList()
        c = cfg.in_channels
        for w in widths:
            self.down.append(_double_conv(c, w))
            c = w
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for w in reversed(widths):
            self.up.append(nn.ConvTranspose2d(c, w, 3, stride=2, padding=1, output_padding=1))
            self.merge.append(nn.Conv2d(2 * w, w, 3, padding=1))
            c = w
        self.head = nn.Conv2d(c, cfg.n_out, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        m, h = x.shape[-2:]
        x = x - 0.5
        unit = 2 ** DEPTH
        pad_m, pad_h = -m % unit, -h % unit
        if pad_m or pad_h:
            x = F.pad(x, (0, pad_h, 0, pad_m), mode="replicate")
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        for up, merge, skip in zip(self.up, self.merge, reversed(skips)):
            x = F.relu(up(x))
            x = F.relu(merge(torch.cat([x, skip], dim=1)))
        return self.head(x)[..., :m, :h]

    def activate(self, logits: torch.Tensor) -> torch.Tensor:
        if self.cfg.head_activation == "sigmoid":
            return torch.sigmoid(logits)
        return torch.softmax(logits, dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.activate(self.logits(x))


@dataclass
class ModelState:
    """A backbone plus the bookkeeping needed to reproduce it."""

    net: UNet
    config: BackboneConfig
    seed: int
    step: int = 0

    def parameters(self) -> list[torch.nn.Parameter]:
        return list(self.net.parameters())

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.net.state_dict().items()}

    def copy(self) -> ModelState:
        twin = UNet(self.config).to(self.config.torch_dtype)
        twin.load_state_dict(self.net.state_dict())
        return ModelState(twin, self.config, self.seed, self.step)


def _fan_in(module: nn.Module) -> int:
    w = module.weight
    k = w.shape[2] * w.shape[3]
    return (w.shape[0] if isinstance(module, nn.ConvTranspose2d) else w.shape[1]) * k


def build_backbone(cfg: BackboneConfig, seed: int = 0, class_prior: Sequence[float] | None = None) -> ModelState:
    """Allocate the network and initialise every weight from ``seed``.

    With ``class_prior`` (expected class proportions) the head starts with
    zero weights and biases at the log-prior, so the initial prediction is
    the prior everywhere instead of a random, possibly saturated, softmax.
    Without it the majority class tends to swamp the others early and the
    softmax saturates before any pixel-level discrimination is learned.
    """
    with torch.random.fork_rng(devices=[]):
        net = UNet(cfg)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in net.modules():
            if not isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                continue
            scale = 3.0 if module is net.head else 6.0
            bound = math.sqrt(scale / _fan_in(module))
            module.weight.copy_(torch.rand(module.weight.shape, generator=gen) * 2 * bound - bound)
            module.bias.zero_()
        if class_prior is not None:
            prior = np.clip(np.asarray(class_prior, dtype=np.float64), 1e-3, 1 - 1e-3)
            if prior.shape != (cfg.n_out,):
                raise ValueError(f"class_prior needs {cfg.n_out} entries, got {prior.shape}")
            bias = np.log(prior) if cfg.n_out > 1 else np.log(prior / (1 - prior))
            net.head.weight.zero_()
            net.head.bias.copy_(torch.from_numpy(bias))
    net.to(cfg.torch_dtype)
    return ModelState(net, cfg, seed)


@dataclass(frozen=True, eq=False)
class ScoreMaps:
    """Per-class scores of shape (n_out, M, H)."""

    values: np.ndarray
    head: HeadActivation = "softmax_over_classes"

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim != 3:
            raise ValueError(f"score maps must be n_out x M x H, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("score maps contain non-finite values")
        if self.head == "sigmoid":
            if v.min() < 0.0 or v.max() > 1.0:
                raise ValueError("sigmoid scores must lie in [0, 1]")
        elif v.min() < 0.0 or np.abs(v.sum(axis=0) - 1.0).max() > 1e-5:
            raise ValueError("softmax scores must be a per-pixel distribution")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_out(self) -> int:
        return self.values.shape[0]


def patches_to_tensor(patches: Sequence[ImagePatch], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    arr = np.stack([p.pixels for p in patches]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def forward(model: ModelState, batch: Sequence[ImagePatch] | torch.Tensor) -> list[ScoreMaps]:
    """Score maps for a batch of patches (no gradient tracking)."""
    x = batch if isinstance(batch, torch.Tensor) else patches_to_tensor(batch, model.config.torch_dtype)
    if x.ndim != 4 or x.shape[1] != model.config.in_channels:
        raise ValueError(f"expected N x {model.config.in_channels} x M x H input, got {tuple(x.shape)}")
    with torch.no_grad():
        out = model.net(x.to(model.config.torch_dtype))
    head = model.config.head_activation
    return [ScoreMaps(o.cpu().numpy(), head) for o in out]


def global_average_pool(maps: torch.Tensor) -> torch.Tensor:
    """Spatial mean over the last two axes: (N, C, M, H) -> (N, C)."""
    return maps.mean(dim=(-2, -1))


def gap(maps: ScoreMaps) -> ProportionVector:
    mode = "binary" if maps.head == "sigmoid" else "multiclass"
    return ProportionVector(maps.values.mean(axis=(1, 2)), mode)


def predict_masks(maps: ScoreMaps, mode: Literal["argmax", "threshold"] = "argmax",
                  threshold: float = 0.5) -> MaskStack:
    """Argmax over classes, or foreground where the score is at least ``threshold``."""
    if mode == "argmax":
        if maps.n_out < 2:
            raise ValueError("argmax needs at least two score channels")
        return MaskStack.from_labels(maps.values.argmax(axis=0), maps.n_out)
    if mode == "threshold":
        if maps.n_out != 1:
            raise ValueError("threshold mode needs exactly one score channel")
        return MaskStack((maps.values >= threshold).astype(np.uint8), "binary")
    raise ValueError(f"unknown mask mode {mode!r}")


def default_mask_mode(model: ModelState) -> str:
    return "threshold" if model.config.n_out == 1 else "argmax"


def gradients(model: ModelState, loss: torch.Tensor) -> list[torch.Tensor]:
    """Exact d(loss)/d(parameter) for every parameter, in ``model.parameters()`` order."""
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise ValueError("loss must be a scalar tensor")
    params = model.parameters()
    if not loss.requires_grad:
        raise ValueError("loss is detached from any computation graph")
    grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=True)
    if all(g is None for g in grads):
        raise ValueError("loss was not computed from this model's outputs")
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def save_checkpoint(model: ModelState, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "interpretation": INTERPRETATION,
        "seed": model.seed,
        "step": model.step,
        "state_dict": model.net.state_dict(),
        "extra": extra or {},
    }, path)
    return path


def load_checkpoint(path: str | Path) -> ModelState:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    conf = dict(blob["config"])
    conf.pop("depth", None)
    cfg = BackboneConfig(**conf)
    with torch.random.fork_rng(devices=[]):
        net = UNet(cfg).to(cfg.torch_dtype)
    net.load_state_dict(blob["state_dict"])
    return ModelState(net, cfg, blob["seed"], blob["step"])


def export_score_maps(maps: ScoreMaps, out_dir: str | Path, prefix: str,
                      class_names: Sequence[str]) -> list[Path]:
    """One 8-bit grayscale PNG per class (score 1 -> 255)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for j, name in enumerate(class_names[:maps.n_out]):
        img = np.round(np.clip(maps.values[j], 0, 1) * 255).astype(np.uint8)
        p = out_dir / f"{prefix}_score_{j}_{name}.png"
        Image.fromarray(img).save(p)
        paths.append(p)
    return paths


def export_mask(mask: MaskStack, path: str | Path) -> Path:
    """Predicted labels as an 8-bit PNG, classes spread over the gray range."""
    labels = mask.labels()
    top = max(mask.n_classes - 1, 1)
    img = (labels * (255 // top)).astype(np.uint8)
    Image.fromarray(img).save(path)
    return Path(path)
