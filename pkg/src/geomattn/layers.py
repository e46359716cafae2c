"""Neural building blocks on top of the autodiff core.

Each layer owns its parameter tensors and exposes them through
``named_parameters()`` / ``named_stats()`` with slash-separated hierarchical
names, which is also the naming scheme inside checkpoints. Layers are
callable; batch-norm layers additionally take the ``mode`` keyword.
"""

from __future__ import annotations

import numpy as np

from geomattn.autodiff import (
    RunningStats,
    Tensor,
    batch_norm,
    conv2d,
    l2_normalize,
)

__all__ = [
    "Conv2d",
    "BatchNorm",
    "ConvBnRelu",
    "ResidualBlock",
    "Linear",
    "CosineClassifier",
    "BNNeck",
]


class Module:
    """Minimal parameter-registry base: children are discovered by attribute."""

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[full] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix=full + "/"))
        return out

    def named_stats(self, prefix: str = "") -> dict[str, RunningStats]:
        out: dict[str, RunningStats] = {}
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, RunningStats):
                out[full] = value
            elif isinstance(value, Module):
                out.update(value.named_stats(prefix=full + "/"))
        return out


class Conv2d(Module):
    """Bias-free convolution (a BN layer always follows in this network)."""

    def __init__(self, cin: int, cout: int, k: int, stride: int, pad: int, rng: np.random.Generator):
        fan_in = cin * k * k
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, k, k)), requires_grad=True)
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, stride=self.stride, pad=self.pad)


class BatchNorm(Module):
    """Batch norm whose running stats start at (0, 1) so an untrained
    network can already run in eval mode. ``with_beta=False`` is the
    shift-free variant."""

    def __init__(self, c: int, with_beta: bool = True):
        self.gamma = Tensor(np.ones(c), requires_grad=True)
        self.beta = Tensor(np.zeros(c), requires_grad=True) if with_beta else None
        self.stats = RunningStats(c)

    def __call__(self, x: Tensor, mode: str = "train", update_running: bool | None = None) -> Tensor:
        return batch_norm(
            x, self.gamma, self.beta, self.stats, mode=mode, update_running=update_running
        )


class ConvBnRelu(Module):
    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator, k: int = 3):
        self.conv = Conv2d(cin, cout, k, stride=stride, pad=k // 2, rng=rng)
        self.bn = BatchNorm(cout)

    def __call__(self, x: Tensor, mode: str = "train", update_running: bool | None = None) -> Tensor:
        return self.bn(self.conv(x), mode=mode, update_running=update_running).relu()


class ResidualBlock(Module):
    """conv-BN-relu-conv-BN plus a skip path, relu after the addition.

    The skip is the identity when shapes match and a stride-matched 1x1
    convolution with its own BN otherwise.
    """

    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator):
        self.conv1 = Conv2d(cin, cout, 3, stride=stride, pad=1, rng=rng)
        self.bn1 = BatchNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, stride=1, pad=1, rng=rng)
        self.bn2 = BatchNorm(cout)
        if stride != 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, stride=stride, pad=0, rng=rng)
            self.proj_bn = BatchNorm(cout)
        else:
            self.proj = None
            self.proj_bn = None

    def __call__(self, x: Tensor, mode: str = "train", update_running: bool | None = None) -> Tensor:
        out = self.bn1(self.conv1(x), mode=mode, update_running=update_running).relu()
        out = self.bn2(self.conv2(out), mode=mode, update_running=update_running)
        if self.proj is not None:
            skip = self.proj_bn(self.proj(x), mode=mode, update_running=update_running)
        else:
            skip = x
        return (out + skip).relu()


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, with_bias: bool = True):
        self.weight = Tensor(rng.normal(0.0, 0.01, (din, dout)), requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True) if with_bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class CosineClassifier(Module):
    """Logits are scaled cosine similarities between rows and class weights."""

    def __init__(self, d: int, n_classes: int, scale: float, rng: np.random.Generator):
        self.weight = Tensor(rng.normal(0.0, 0.01, (n_classes, d)), requires_grad=True)
        self.scale = scale

    def __call__(self, feat: Tensor) -> Tensor:
        return l2_normalize(feat) @ l2_normalize(self.weight).T * self.scale


class BNNeck(Module):
    """Shift-free BN followed by a bias-free identity classifier."""

    def __init__(self, d: int, n_classes: int, rng: np.random.Generator):
        self.bn = BatchNorm(d, with_beta=False)
        self.fc = Linear(d, n_classes, rng=rng, with_bias=False)

    def __call__(
        self, feat: Tensor, mode: str = "train", update_running: bool | None = None
    ) -> tuple[Tensor, Tensor]:
        feat_bn = self.bn(feat, mode=mode, update_running=update_running)
        return feat_bn, self.fc(feat_bn)
