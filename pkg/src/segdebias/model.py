"""Three-part segmentation network: feature extractor f, pixel head g, bias head h.

The backbone is an ordered list of layer segments. `fork_at` partitions it
into f (everything before the fork) and g (everything after), then attaches
a fresh colour-bin classifier h to the fork output through a gradient
reversal, so h trains normally while f receives the negated bias gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_SCHEMA_VERSION = 1


class GradientReversalFunction(torch.autograd.Function):
    """Identity forward; backward multiplies incoming gradients by -scale."""

    @staticmethod
    def forward(ctx, x, scale: float):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.scale * grad_output, None


def grl_forward(x: torch.Tensor, scale: float) -> torch.Tensor:
    """Forward pass of the reversal: returns x unchanged."""
    if scale < 0:
        raise ValueError(f"reversal scale must be >= 0, got {scale}")
    return GradientReversalFunction.apply(x, scale)


def grl_backward(upstream_grad: torch.Tensor, scale: float) -> torch.Tensor:
    """Backward rule of the reversal in isolation: -scale * upstream gradient."""
    if scale < 0:
        raise ValueError(f"reversal scale must be >= 0, got {scale}")
    return -scale * upstream_grad


class GradientReversal(nn.Module):
    def __init__(self, scale: float = 1.0):
        super().__init__()
        if scale < 0:
            raise ValueError(f"reversal scale must be >= 0, got {scale}")
        self.scale = scale

    def forward(self, x):
        return GradientReversalFunction.apply(x, self.scale)

    def extra_repr(self) -> str:
        return f"scale={self.scale}"


@dataclass(frozen=True)
class BackboneSpec:
    """Reference backbone description; `fork_feature_count` is the channel count at the fork."""

    name: str = "mini_seg"
    width: int = 32
    depth: int = 3

    def __post_init__(self):
        if self.name != "mini_seg":
            raise ValueError(f"unknown backbone: {self.name!r} (only 'mini_seg' is built in)")
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be >= 1")

    @property
    def fork_feature_count(self) -> int:
        return self.width


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class EncoderDecoder(nn.Module):
    """Symmetric encoder-decoder with skip connections and nearest-neighbour upsampling."""

    def __init__(self, width: int, depth: int, in_channels: int = 3):
        super().__init__()
        widths = [width * (2 ** d) for d in range(depth + 1)]
        self.encoders = nn.ModuleList()
        cin = in_channels
        for w in widths[:-1]:
            self.encoders.append(_conv_block(cin, w))
            cin = w
        self.bottleneck = _conv_block(widths[-2], widths[-1])
        self.decoders = nn.ModuleList()
        cin = widths[-1]
        for w in reversed(widths[:-1]):
            self.decoders.append(_conv_block(cin + w, w))
            cin = w
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = dec(torch.cat([x, skip], dim=1))
        return x


def build_backbone_layers(spec: BackboneSpec, num_classes: int) -> list[nn.Module]:
    """Ordered layer segments of the reference backbone.

    [encoder-decoder core, penultimate 3x3 conv + ReLU, final 1x1 classifier conv]
    All segment boundaries carry full-resolution feature maps, so the fork may
    sit at any of them.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    w = spec.width
    return [
        EncoderDecoder(w, spec.depth),
        nn.Sequential(nn.Conv2d(w, w, 3, padding=1), nn.ReLU(inplace=True)),
        nn.Conv2d(w, num_classes, 1),
    ]


class BiasHead(nn.Module):
    """Shallow per-pixel colour-bin classifier: two 1x1 convs with a nonlinearity."""

    def __init__(self, in_channels: int, bias_classes: int):
        super().__init__()
        hidden = max(in_channels, bias_classes)
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, bias_classes, 1),
        )

    def forward(self, x):
        return self.net(x)


def _has_params(module: nn.Module) -> bool:
    return any(True for _ in module.parameters())


class SegmentationModel(nn.Module):
    """The (f, g, h) triple joined at the fork.

    f and g consume the same fork features; h sees them through the gradient
    reversal. Every learnable parameter belongs to exactly one of f, g, h.
    """

    def __init__(
        self,
        f_layers: list[nn.Module],
        g_layers: list[nn.Module],
        bias_head: nn.Module,
        fork_index: int,
        grl_scale: float,
        backbone: BackboneSpec,
        num_classes: int,
        bias_classes: int,
    ):
        super().__init__()
        self.f = nn.Sequential(*f_layers)
        self.g = nn.Sequential(*g_layers)
        self.grl = GradientReversal(grl_scale)
        self.h = bias_head
        self.fork_index = fork_index
        self.backbone = backbone
        self.num_classes = num_classes
        self.bias_classes = bias_classes

    @property
    def grl_scale(self) -> float:
        return self.grl.scale

    @grl_scale.setter
    def grl_scale(self, value: float):
        if value < 0:
            raise ValueError(f"reversal scale must be >= 0, got {value}")
        self.grl.scale = value

    def features(self, batch: torch.Tensor) -> torch.Tensor:
        return self.f(batch)

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        """Segmentation-only path f . g, upsampled to the input resolution."""
        return self._align(self.g(self.f(batch)), batch)

    def forward_joint(self, batch: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(seg_logits, bias_logits); the bias path passes through the reversal."""
        if batch.ndim != 4 or batch.shape[1] != 3:
            raise ValueError(f"expected a (n, 3, H, W) batch, got shape {tuple(batch.shape)}")
        feats = self.f(batch)
        seg = self._align(self.g(feats), batch)
        bias = self._align(self.h(self.grl(feats)), batch)
        return seg, bias

    @staticmethod
    def _align(logits: torch.Tensor, batch: torch.Tensor) -> torch.Tensor:
        if logits.shape[-2:] != batch.shape[-2:]:
            logits = F.interpolate(logits, size=batch.shape[-2:], mode="bilinear", align_corners=False)
        return logits


def fork_at(
    backbone: BackboneSpec,
    fork_index: int | None = None,
    *,
    num_classes: int,
    bias_classes: int,
    grl_scale: float = 1.0,
    bias_head_seed: int | None = None,
) -> SegmentationModel:
    """Partition the backbone at `fork_index` and attach the bias head there.

    f = layers[:fork_index], g = layers[fork_index:]. The default fork sits
    before the final classifier conv, leaving exactly one learnable
    convolution (plus the softmax applied at loss time) inside g. The bias
    head is initialised from an isolated RNG stream so building it leaves
    the global torch RNG - and therefore f and g - untouched.
    """
    layers = build_backbone_layers(backbone, num_classes)
    if fork_index is None:
        fork_index = len(layers) - 1
    if not 1 <= fork_index < len(layers):
        raise ValueError(
            f"fork_index {fork_index} out of range: must be in [1, {len(layers) - 1}] "
            "(the fork may not leave g without a learnable layer)"
        )
    g_layers = layers[fork_index:]
    if not any(_has_params(m) for m in g_layers):
        raise ValueError("fork leaves no learnable layer inside g")

    if bias_head_seed is None:
        bias_head_seed = (torch.initial_seed() + 0x9E3779B9) % (2 ** 63)
    rng_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(bias_head_seed)
        head = BiasHead(backbone.fork_feature_count, bias_classes)
    finally:
        torch.random.set_rng_state(rng_state)

    return SegmentationModel(
        f_layers=layers[:fork_index],
        g_layers=g_layers,
        bias_head=head,
        fork_index=fork_index,
        grl_scale=grl_scale,
        backbone=backbone,
        num_classes=num_classes,
        bias_classes=bias_classes,
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(
    path,
    model: SegmentationModel,
    optimizer_state: dict | None = None,
    epoch: int = 0,
    train_config: dict | None = None,
    extra: dict | None = None,
) -> Path:
    """Versioned container holding everything needed to rebuild and resume."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "backbone": asdict(model.backbone),
        "fork_index": model.fork_index,
        "grl_scale": model.grl_scale,
        "num_classes": model.num_classes,
        "bias_classes": model.bias_classes,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer_state,
        "epoch": epoch,
        "train_config": train_config,
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> tuple[SegmentationModel, dict]:
    """Rebuild the model from a checkpoint; returns (model, full payload)."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    version = payload.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema_version: {version}")
    model = fork_at(
        BackboneSpec(**payload["backbone"]),
        payload["fork_index"],
        num_classes=payload["num_classes"],
        bias_classes=payload["bias_classes"],
        grl_scale=payload["grl_scale"],
        bias_head_seed=0,
    )
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, payload
