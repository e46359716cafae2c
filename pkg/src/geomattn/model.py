"""The three-branch network: global, attentional, and self-supervised paths.

The global branch runs a small stem (three stride-2 stages, so spatial size
drops by 8) whose output doubles as the "shallow" feature map, then two
stride-1 stages, global average pooling, and a BNNeck. The attentional branch
encodes the image with its own shallow encoder ``E``, turns the positive
activations into a spatial mask via the attention computing module, reweights
the shallow features with that mask, and runs an independent copy of the
deep stages plus its own BNNeck. The self-supervised branch reuses ``E``
(same tensors, shared storage) on rotated inputs and predicts the rotation
class through two residual blocks and a cosine classifier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from geomattn.acm import AcmConfig, AttentionMask, attention_mask
from geomattn.autodiff import RunningStats, Tensor, concat, global_avg_pool, l2_normalize
from geomattn.layers import BNNeck, ConvBnRelu, CosineClassifier, Module, ResidualBlock

__all__ = ["ArchConfig", "BranchOutput", "ThreeBranchNet"]

_N_ROTATION_CLASSES = 4
_POSITIVITY_EPS = 1e-6


@dataclass(frozen=True)
class ArchConfig:
    """Architecture hyperparameters; defaults target 64x64 RGB inputs."""

    num_identities: int = 16
    input_size: int = 64
    stage_widths: tuple[int, ...] = (16, 32, 64, 128, 128)
    attention_encoder_widths: tuple[int, ...] = (16, 32, 64)
    ssl_head_width: int = 128
    feature_dim: int = 128
    cosine_scale: float = 16.0
    K: int = 7

    def __post_init__(self):
        if self.input_size % 8 != 0:
            raise ValueError("input_size must be divisible by 8")
        if len(self.stage_widths) < 4:
            raise ValueError("need at least 3 downsampling stages plus one stride-1 stage")
        if len(self.attention_encoder_widths) != 3:
            raise ValueError("attention encoder needs exactly 3 stride-2 stages to reach /8")
        if self.feature_dim != self.stage_widths[-1]:
            raise ValueError("feature_dim must equal the last stage width")
        if self.num_identities < 2:
            raise ValueError("need at least 2 identities")

    def to_dict(self) -> dict:
        return {
            "num_identities": self.num_identities,
            "input_size": self.input_size,
            "stage_widths": list(self.stage_widths),
            "attention_encoder_widths": list(self.attention_encoder_widths),
            "ssl_head_width": self.ssl_head_width,
            "feature_dim": self.feature_dim,
            "cosine_scale": self.cosine_scale,
            "K": self.K,
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchConfig":
        return ArchConfig(
            num_identities=int(d["num_identities"]),
            input_size=int(d["input_size"]),
            stage_widths=tuple(int(v) for v in d["stage_widths"]),
            attention_encoder_widths=tuple(int(v) for v in d["attention_encoder_widths"]),
            ssl_head_width=int(d["ssl_head_width"]),
            feature_dim=int(d["feature_dim"]),
            cosine_scale=float(d["cosine_scale"]),
            K=int(d["K"]),
        )


@dataclass
class BranchOutput:
    feat_triplet: Tensor  # pre-BN, feeds the triplet loss
    feat_bn: Tensor  # post-BN, feeds the classifier and inference
    logits: Tensor


class _Stages(Module):
    """A plain sequence of conv-BN-relu stages."""

    def __init__(self, cin: int, widths, strides, rng):
        self.blocks: list[ConvBnRelu] = []
        for i, (w, s) in enumerate(zip(widths, strides)):
            block = ConvBnRelu(cin, w, stride=s, rng=rng)
            setattr(self, f"s{i}", block)  # registered for parameter discovery
            self.blocks.append(block)
            cin = w

    def __call__(self, x: Tensor, mode: str = "train", update_running: bool | None = None) -> Tensor:
        for block in self.blocks:
            x = block(x, mode=mode, update_running=update_running)
        return x


class _SslHead(Module):
    def __init__(self, cin: int, width: int, rng):
        self.block1 = ResidualBlock(cin, width, stride=2, rng=rng)
        self.block2 = ResidualBlock(width, width, stride=1, rng=rng)

    def __call__(self, x: Tensor, mode: str = "train", update_running: bool | None = None) -> Tensor:
        x = self.block1(x, mode=mode, update_running=update_running)
        return self.block2(x, mode=mode, update_running=update_running)


class ThreeBranchNet(Module):
    """Holds all parameters; branch forwards are methods.

    Construction order (and therefore parameter-name order) is fixed, so two
    nets built from the same seed are identical tensor for tensor.
    """

    def __init__(self, cfg: ArchConfig, rng: np.random.Generator):
        self.cfg = cfg
        n_down = 3
        down_widths = cfg.stage_widths[:n_down]
        flat_widths = cfg.stage_widths[n_down:]

        # global branch: stride-2 stem (output = shallow features), stride-1 deep part
        self.p1 = _Stages(3, down_widths, [2] * n_down, rng)
        self.p2 = _Stages(down_widths[-1], flat_widths, [1] * len(flat_widths), rng)
        self.neck_gb = BNNeck(cfg.feature_dim, cfg.num_identities, rng)

        # attention encoder, shared by the attentional and self-supervised paths
        self.encoder = _Stages(3, cfg.attention_encoder_widths, [2, 2, 2], rng)

        # attentional branch: independent copy of the deep stages + its own neck
        self.p2_att = _Stages(down_widths[-1], flat_widths, [1] * len(flat_widths), rng)
        self.neck_ab = BNNeck(cfg.feature_dim, cfg.num_identities, rng)

        # self-supervised head on top of the shared encoder
        self.ssl_head = _SslHead(cfg.attention_encoder_widths[-1], cfg.ssl_head_width, rng)
        self.rot_classifier = CosineClassifier(cfg.ssl_head_width, _N_ROTATION_CLASSES, cfg.cosine_scale, rng)

        self.acm_cfg = AcmConfig(K=cfg.K)

    # -- branch forwards -------------------------------------------------

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected [n,3,h,w] input, got {x.shape}")
        if x.shape[2] % 8 != 0 or x.shape[3] % 8 != 0:
            raise ValueError(f"spatial dims must be divisible by 8, got {x.shape[2]}x{x.shape[3]}")

    def global_branch_forward(
        self, x: Tensor, mode: str = "train", update_running: bool | None = None
    ) -> tuple[BranchOutput, Tensor]:
        self._check_input(x)
        shallow = self.p1(x, mode=mode, update_running=update_running)
        deep = self.p2(shallow, mode=mode, update_running=update_running)
        feat = global_avg_pool(deep)
        feat_bn, logits = self.neck_gb(feat, mode=mode, update_running=update_running)
        return BranchOutput(feat, feat_bn, logits), shallow

    def compute_attention(
        self, x: Tensor, mode: str = "train", update_running: bool | None = None,
        keep_intermediates: bool = False,
    ) -> AttentionMask:
        """Shared-encoder features -> strictly positive map -> normalized mask."""
        enc = self.encoder(x, mode=mode, update_running=update_running)
        L = enc.softplus() + _POSITIVITY_EPS
        return attention_mask(L, self.acm_cfg, keep_intermediates=keep_intermediates)

    def attention_branch_forward(
        self, x: Tensor, shallow: Tensor, mode: str = "train",
        update_running: bool | None = None, keep_intermediates: bool = False,
    ) -> tuple[BranchOutput, AttentionMask]:
        self._check_input(x)
        mask = self.compute_attention(
            x, mode=mode, update_running=update_running, keep_intermediates=keep_intermediates
        )
        weighted = self.apply_mask(shallow, mask.Q)
        deep = self.p2_att(weighted, mode=mode, update_running=update_running)
        feat = global_avg_pool(deep)
        feat_bn, logits = self.neck_ab(feat, mode=mode, update_running=update_running)
        return BranchOutput(feat, feat_bn, logits), mask

    @staticmethod
    def apply_mask(shallow: Tensor, q: Tensor) -> Tensor:
        """Broadcast the [n,h,w] mask over every channel of [n,c,h,w] features."""
        if q.shape[-2:] != shallow.shape[-2:]:
            raise ValueError(f"mask {q.shape[-2:]} does not match shallow features {shallow.shape[-2:]}")
        n, _, h, w = shallow.shape
        return shallow * q.reshape(n, 1, h, w)

    def ssl_branch_forward(
        self, x_rot: Tensor, mode: str = "train", update_running: bool | None = None
    ) -> Tensor:
        self._check_input(x_rot)
        enc = self.encoder(x_rot, mode=mode, update_running=update_running)
        head = self.ssl_head(enc, mode=mode, update_running=update_running)
        return self.rot_classifier(global_avg_pool(head))

    def extract_reid_feature(self, x: Tensor) -> Tensor:
        """Inference embedding: normalized concat of both post-BN features.

        Always runs in eval mode; the self-supervised branch stays inactive.
        """
        gb, shallow = self.global_branch_forward(x, mode="eval")
        ab, _ = self.attention_branch_forward(x, shallow, mode="eval")
        return l2_normalize(concat([gb.feat_bn, ab.feat_bn], axis=1))

    # -- bookkeeping ------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.named_parameters()

    def stats(self) -> dict[str, RunningStats]:
        return self.named_stats()

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()
