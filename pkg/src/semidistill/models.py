"""Architecture registries, classifier-head adaptation and parameter accounting.

Two registries:

* ``paper`` — MobileNetV3-Large / ResNet-18 / EfficientNet-B5 (torchvision),
  taking 32x32 inputs natively. ResNet-18 gets the usual CIFAR stem (3x3
  stride-1 first conv, no initial max-pool); the other two keep their stock
  stems, which reduce 32x32 inputs to 1x1 feature maps.
* ``desk`` — three plain conv nets (~47k / ~130k / ~336k parameters) that
  keep the roughly 1 : 2.75 : 7 size hierarchy but train in minutes on a CPU.

Pretrained backbone weights are an optional external input in the flat
named-tensor container format; the classifier head is always re-initialized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ModelError
from .weights_io import load_weights


@dataclass
class ModelSpec:
    name: str
    tier: str
    num_classes: int = 10
    pretrained_weights: str | None = None
    learning_rate: float = 0.01

    def __post_init__(self):
        if self.name not in _REGISTRY:
            raise ModelError(f"unknown architecture: {self.name!r}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass
class ModelHandle:
    spec: ModelSpec
    module: nn.Module
    parameter_count: int
    state_version: int = 0
    head_prefix: str = field(default="fc", repr=False)


class DeskConvNet(nn.Module):
    """Three conv-norm-relu-pool blocks, global average pooling, linear head.

    GroupNorm keeps the forward pass batch-independent, so evaluation-mode
    outputs are identical to training-mode outputs for fixed weights.
    """

    def __init__(self, widths: tuple[int, int, int], num_classes: int):
        super().__init__()
        layers = []
        in_ch = 3
        for w in widths:
            layers += [
                nn.Conv2d(in_ch, w, 3, padding=1, bias=False),
                nn.GroupNorm(8, w),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            in_ch = w
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(in_ch, num_classes)

    def forward(self, x):
        x = self.features(x)
        x = x.mean(dim=(2, 3))
        return self.fc(x)


def _build_desk(widths):
    def build(num_classes):
        return DeskConvNet(widths, num_classes), "fc"

    return build


def _build_resnet18(num_classes):
    from torchvision.models import resnet18

    net = resnet18(num_classes=num_classes)
    # CIFAR stem: keep 32x32 resolution through the first stage
    net.conv1 = nn.Conv2d(3, 64, 3, stride=1, padding=1, bias=False)
    net.maxpool = nn.Identity()
    return net, "fc"


def _build_mobilenetv3_large(num_classes):
    from torchvision.models import mobilenet_v3_large

    return mobilenet_v3_large(num_classes=num_classes), "classifier"


def _build_efficientnet_b5(num_classes):
    from torchvision.models import efficientnet_b5

    return efficientnet_b5(num_classes=num_classes), "classifier"


# name -> (registry, tier, default learning rate, builder)
_REGISTRY = {
    "desk-small": ("desk", "small", 0.001, _build_desk((32, 48, 72))),
    "desk-medium": ("desk", "medium", 0.01, _build_desk((48, 88, 112))),
    "desk-large": ("desk", "large", 0.01, _build_desk((72, 144, 184))),
    "mobilenetv3-large": ("paper", "small", 0.001, _build_mobilenetv3_large),
    "resnet-18": ("paper", "medium", 0.01, _build_resnet18),
    "efficientnet-b5": ("paper", "large", 0.01, _build_efficientnet_b5),
}

REGISTRIES = ("desk", "paper")


def registry_names(registry: str) -> list[str]:
    if registry not in REGISTRIES:
        raise ConfigError(f"unknown registry: {registry!r}")
    return [n for n, (reg, *_ ) in _REGISTRY.items() if reg == registry]


def make_spec(name: str, num_classes: int = 10, pretrained_weights: str | None = None) -> ModelSpec:
    if name not in _REGISTRY:
        raise ModelError(f"unknown architecture: {name!r}")
    _, tier, lr, _ = _REGISTRY[name]
    return ModelSpec(
        name=name,
        tier=tier,
        num_classes=num_classes,
        pretrained_weights=pretrained_weights,
        learning_rate=lr,
    )


def build_model(spec: ModelSpec, init_seed: int = 0) -> ModelHandle:
    """Construct the network; deterministic initialization given init_seed."""
    _, _, _, builder = _REGISTRY[spec.name]
    torch.manual_seed(init_seed)
    module, head_prefix = builder(spec.num_classes)
    if spec.pretrained_weights is not None:
        state = load_weights(spec.pretrained_weights)
        state = {k: v for k, v in state.items() if not k.startswith(head_prefix + ".")}
        own = module.state_dict()
        for key, tensor in state.items():
            if key not in own:
                raise ModelError(f"pretrained tensor {key!r} not in architecture {spec.name}")
            if tuple(own[key].shape) != tuple(tensor.shape):
                raise ModelError(
                    f"shape mismatch for {key!r}: weights {tuple(tensor.shape)} "
                    f"vs model {tuple(own[key].shape)}"
                )
        missing = module.load_state_dict(state, strict=False)
        del missing  # head keys are expected to stay freshly initialized
    module.eval()
    return ModelHandle(
        spec=spec,
        module=module,
        parameter_count=count_parameters(module),
        head_prefix=head_prefix,
    )


def count_parameters(model) -> int:
    """Exact count of trainable scalar parameters."""
    module = model.module if isinstance(model, ModelHandle) else model
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def forward(handle: ModelHandle, batch) -> torch.Tensor:
    """Evaluation-mode forward pass to a (B, num_classes) logit batch."""
    if isinstance(batch, np.ndarray):
        batch = torch.from_numpy(batch)
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ModelError(f"expected (B, 3, H, W) batch, got {tuple(batch.shape)}")
    handle.module.eval()
    with torch.no_grad():
        logits = handle.module(batch)
    if not torch.isfinite(logits).all():
        raise ModelError("non-finite logits (divergence upstream)")
    return logits
