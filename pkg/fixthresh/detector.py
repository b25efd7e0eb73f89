from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from fixthresh.errors import ContractError, ImageIOError, MetricDomainError, ModelShapeError, TrainingError
from fixthresh.imaging import IMAGENET_STATS, ImageTensor, NormStats, normalize, resize_bicubic
from fixthresh.metrics import ScoreSet, auroc
from fixthresh.transforms import Condition, ConditionGrid, apply_condition_batch, highpass_fft

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


class BranchMode(str, Enum):
    CNN_ONLY = "cnn_only"
    VIT_ONLY = "vit_only"
    HYBRID = "hybrid"


@dataclass(frozen=True)
class HybridConfig:
    """
    Shape of the gated dual-branch detector.

    patch_size is measured in input pixels; the attention branch reads a
    vit_pool x vit_pool mean-pooled view, so each token covers
    (patch_size / vit_pool)^2 pooled pixels.
    """
    input_size: int = 64
    embed_dim: int = 32
    conv_channels: Tuple[int, ...] = (8, 16, 32)
    patch_size: int = 16
    vit_dim: int = 32
    attn_blocks: int = 1
    attn_heads: int = 2
    vit_pool: int = 2
    gate_hidden: Optional[int] = None
    freq_enabled: bool = False
    branch_mode: BranchMode = BranchMode.HYBRID
    in_channels: int = 3

    def __post_init__(self) -> None:
        object.__setattr__(self, "branch_mode", BranchMode(self.branch_mode))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.input_size % self.patch_size != 0:
            raise ContractError(f"input_size {self.input_size} is not divisible by patch_size {self.patch_size}")
        if self.vit_pool < 1 or self.patch_size % self.vit_pool != 0:
            raise ContractError(f"patch_size {self.patch_size} is not divisible by vit_pool {self.vit_pool}")
        if self.embed_dim < 2:
            raise ContractError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if not self.conv_channels or min(self.conv_channels) < 1:
            raise ContractError("conv_channels must list at least one positive width")
        if self.vit_dim % self.attn_heads != 0:
            raise ContractError(f"vit_dim {self.vit_dim} is not divisible by attn_heads {self.attn_heads}")
        if self.attn_blocks < 1:
            raise ContractError("attn_blocks must be >= 1")

    @property
    def cnn_dim(self) -> int:
        return self.conv_channels[-1]

    @property
    def gate_width(self) -> int:
        return self.gate_hidden if self.gate_hidden is not None else self.embed_dim

    @property
    def num_patches(self) -> int:
        return (self.input_size // self.patch_size) ** 2

    def to_dict(self) -> Dict[str, Any]:
        raw = asdict(self)
        raw["branch_mode"] = self.branch_mode.value
        raw["conv_channels"] = list(self.conv_channels)
        return raw

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "HybridConfig":
        return cls(**raw)


# Full-scale dimensions (ResNet-50 pooled 2048-D, ViT-B/16 768-D, shared 512-D).
FULL_SCALE_PRESET: Dict[str, Any] = {
    "input_size": 224,
    "embed_dim": 512,
    "conv_channels": (256, 1024, 2048),
    "patch_size": 16,
    "vit_dim": 768,
    "attn_blocks": 12,
    "attn_heads": 12,
    "vit_pool": 1,
}


@dataclass(frozen=True)
class TrainConfig:
    lr_new: float = 2e-4
    lr_backbone: float = 2e-5
    weight_decay: float = 1e-4
    max_epochs: int = 50
    patience: int = 5
    batch_size: int = 64
    lit_freeze_epochs: int = 2
    seed: int = 0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self) -> None:
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.lr_new <= 0 or self.lr_backbone <= 0 or self.weight_decay < 0:
            raise ContractError("learning rates must be > 0 and weight_decay >= 0")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ContractError("max_epochs and batch_size must be >= 1")
        if not 1 <= self.patience <= self.max_epochs:
            raise ContractError(f"patience must be in [1, max_epochs], got {self.patience}")
        if self.lit_freeze_epochs < 0:
            raise ContractError("lit_freeze_epochs must be >= 0")


@dataclass(frozen=True)
class GateOutput:
    """Per-image softmax weights of the two branches."""
    w_c: torch.Tensor
    w_v: torch.Tensor


# -------------------- Branches --------------------


class ConvBranch(nn.Module):
    """Conv3x3-ReLU-AvgPool stages followed by global average pooling."""

    def __init__(self, in_channels: int, channels: Sequence[int]) -> None:
        super().__init__()
        stages = []
        prev = in_channels
        for width in channels:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(prev, width, kernel_size=3, padding=1),
                    nn.ReLU(),
                    nn.AvgPool2d(2),
                )
            )
            prev = width
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for stage in self.stages:
            x = stage(x)
        return x.mean(dim=(2, 3))


class SelfAttention(nn.Module):
    """Multi-head scaled dot-product self-attention."""

    def __init__(self, dim: int, num_heads: int) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.o_proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        # [B, heads, N, head_dim]
        qry = self.q_proj(x).view(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        key = self.k_proj(x).view(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        val = self.v_proj(x).view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

        attn = (qry @ key.transpose(-2, -1)) * (self.head_dim ** -0.5)
        out = attn.softmax(dim=-1) @ val
        return self.o_proj(out.transpose(1, 2).reshape(b, n, c))


class EncoderBlock(nn.Module):
    """Pre-norm transformer block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, dim: int, num_heads: int) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def patchify(x: torch.Tensor, patch: int) -> torch.Tensor:
    """[B, C, H, W] -> [B, (H/patch)*(W/patch), C*patch*patch], row-major patch order."""
    b, c, h, w = x.shape
    patches = x.unfold(2, patch, patch).unfold(3, patch, patch)
    return patches.permute(0, 2, 3, 1, 4, 5).reshape(b, (h // patch) * (w // patch), c * patch * patch)


class PatchAttentionBranch(nn.Module):
    """Patchify, linear embed + learned positions, pre-norm blocks, token mean-pool."""

    def __init__(self, config: HybridConfig) -> None:
        super().__init__()
        self.pool = nn.AvgPool2d(config.vit_pool) if config.vit_pool > 1 else nn.Identity()
        self.token_patch = config.patch_size // config.vit_pool
        self.embed = nn.Linear(config.in_channels * self.token_patch ** 2, config.vit_dim)
        self.positions = nn.Parameter(torch.zeros(config.num_patches, config.vit_dim))
        self.blocks = nn.ModuleList(
            [EncoderBlock(config.vit_dim, config.attn_heads) for _ in range(config.attn_blocks)]
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.embed(patchify(self.pool(x), self.token_patch)) + self.positions
        for block in self.blocks:
            tokens = block(tokens)
        return tokens.mean(dim=1)


# -------------------- Fusion --------------------


def project(h: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """z = P h for a batch of feature vectors h [B, k] and P [d, k]."""
    if h.shape[-1] != p.shape[-1]:
        raise ModelShapeError(f"cannot project {h.shape[-1]}-D features with a {tuple(p.shape)} matrix")
    return h @ p.transpose(0, 1)


def gate(z_c: torch.Tensor, z_v: torch.Tensor, gate_mlp: nn.Module) -> GateOutput:
    """w = softmax(MLP([z_c; z_v]))."""
    if z_c.shape != z_v.shape:
        raise ModelShapeError(f"gate inputs differ in shape: {tuple(z_c.shape)} vs {tuple(z_v.shape)}")
    weights = gate_mlp(torch.cat([z_c, z_v], dim=-1)).softmax(dim=-1)
    return GateOutput(w_c=weights[..., 0], w_v=weights[..., 1])


def fuse(z_c: torch.Tensor, z_v: torch.Tensor, w: GateOutput) -> torch.Tensor:
    """Convex combination w_c z_c + w_v z_v, per image."""
    if z_c.shape != z_v.shape:
        raise ModelShapeError(f"fuse inputs differ in shape: {tuple(z_c.shape)} vs {tuple(z_v.shape)}")
    return w.w_c.unsqueeze(-1) * z_c + w.w_v.unsqueeze(-1) * z_v


class HybridDetector(nn.Module):
    """
    Desk-scale gated dual-branch detector.

    cnn_only and vit_only modes build a single branch and feed its projection
    straight to the head; hybrid fuses both through the gate.
    """

    def __init__(self, config: HybridConfig) -> None:
        super().__init__()
        self.config = config
        mode = config.branch_mode
        d = config.embed_dim

        if mode in (BranchMode.CNN_ONLY, BranchMode.HYBRID):
            self.cnn = ConvBranch(config.in_channels, config.conv_channels)
            self.proj_c = nn.Linear(config.cnn_dim, d, bias=False)
        if mode in (BranchMode.VIT_ONLY, BranchMode.HYBRID):
            self.vit = PatchAttentionBranch(config)
            self.proj_v = nn.Linear(config.vit_dim, d, bias=False)
        if mode is BranchMode.HYBRID:
            self.gate = nn.Sequential(
                nn.Linear(2 * d, config.gate_width),
                nn.GELU(),
                nn.Linear(config.gate_width, 2),
            )
        self.head = nn.Linear(d, 1)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        """He-uniform weights, zero biases, zero gate output layer (w starts at [0.5, 0.5])."""
        for module in self.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_uniform_(module.weight, nonlinearity="relu")
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
        if hasattr(self, "vit"):
            nn.init.normal_(self.vit.positions, std=0.02)
        if hasattr(self, "gate"):
            nn.init.zeros_(self.gate[-1].weight)
            nn.init.zeros_(self.gate[-1].bias)

    def trunk_parameters(self) -> List[nn.Parameter]:
        """Branch trunks (conv stages, patch embedding, positions, attention blocks)."""
        params: List[nn.Parameter] = []
        if hasattr(self, "cnn"):
            params.extend(self.cnn.parameters())
        if hasattr(self, "vit"):
            params.extend(self.vit.parameters())
        return params

    def new_parameters(self) -> List[nn.Parameter]:
        """Layers added on top of the trunks: projections, gate, head."""
        trunk = {id(p) for p in self.trunk_parameters()}
        return [p for p in self.parameters() if id(p) not in trunk]

    def _check_input(self, x: torch.Tensor) -> None:
        size = self.config.input_size
        expected = (self.config.in_channels, size, size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ModelShapeError(f"expected input [B, {expected[0]}, {size}, {size}], got {tuple(x.shape)}")

    def embed(self, x: torch.Tensor) -> Tuple[torch.Tensor, Optional[GateOutput]]:
        """Fused (or single-branch) embedding and the gate weights when gating."""
        self._check_input(x)
        mode = self.config.branch_mode
        if mode is BranchMode.CNN_ONLY:
            return project(self.cnn(x), self.proj_c.weight), None
        if mode is BranchMode.VIT_ONLY:
            return project(self.vit(x), self.proj_v.weight), None

        z_c = project(self.cnn(x), self.proj_c.weight)
        z_v = project(self.vit(x), self.proj_v.weight)
        weights = gate(z_c, z_v, self.gate)
        return fuse(z_c, z_v, weights), weights

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logits, shape [B]."""
        z, _ = self.embed(x)
        return self.head(z).squeeze(-1)


def build_model(config: HybridConfig, seed: int = 0) -> HybridDetector:
    torch.manual_seed(seed)
    return HybridDetector(config)


def forward(model: HybridDetector, x: torch.Tensor) -> torch.Tensor:
    """Scores in (0, 1): sigmoid(head(z~))."""
    return torch.sigmoid(model(x))


def loss(scores: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy, evaluated in the stable logit form."""
    if torch.any(scores <= 0) or torch.any(scores >= 1):
        raise ContractError("scores must lie strictly inside (0, 1)")
    return logit_loss(torch.logit(scores), labels)


def logit_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))


def gradients(model: HybridDetector, images: torch.Tensor, labels: torch.Tensor) -> Dict[str, torch.Tensor]:
    """Exact gradients of the mean loss w.r.t. every trainable parameter, by name."""
    named = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    value = logit_loss(model(images), labels)
    grads = torch.autograd.grad(value, [p for _, p in named])
    return {name: g for (name, _), g in zip(named, grads)}


# -------------------- Input preparation --------------------


def prepare_input(
    img: ImageTensor,
    config: HybridConfig,
    stats: NormStats = IMAGENET_STATS,
) -> np.ndarray:
    """
    Unit image -> model input [C, H, W]: resize to input_size, normalize and,
    for frequency-enhanced models, high-pass filter.

    The filter removes DC, so filtering after normalization equals filtering
    the unit image and scaling each channel by 1 / std.
    """
    if (img.height, img.width) != (config.input_size, config.input_size):
        img = resize_bicubic(img, config.input_size, config.input_size)
    x = normalize(img, stats)
    if config.freq_enabled:
        x = highpass_fft(x)
    return np.ascontiguousarray(x.data.transpose(2, 0, 1))


def to_batch(images: Sequence[ImageTensor], config: HybridConfig, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    if not images:
        raise ContractError("to_batch needs at least one image")
    return torch.from_numpy(np.stack([prepare_input(img, config) for img in images])).to(dtype)


@dataclass(frozen=True)
class LabeledBatch:
    """Prepared model inputs with labels and item ids."""
    images: torch.Tensor
    labels: torch.Tensor
    ids: Tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels) or len(self.ids) != len(self.labels):
            raise ContractError("images, labels and ids must have equal lengths")

    def __len__(self) -> int:
        return len(self.labels)


def make_batch(
    images: Sequence[ImageTensor],
    labels: Sequence[int],
    ids: Sequence[str],
    config: HybridConfig,
) -> LabeledBatch:
    return LabeledBatch(
        images=to_batch(images, config),
        labels=torch.as_tensor(list(labels), dtype=torch.float32),
        ids=tuple(ids),
    )


# -------------------- Training --------------------


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_auroc: float
    trunk_frozen: bool


@dataclass
class TrainResult:
    model: HybridDetector
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_auroc: float = float("nan")


class EarlyStopping:
    """Stop once the monitored metric has not improved for `patience` epochs."""

    def __init__(self, patience: int) -> None:
        self.patience = patience
        self.best = float("-inf")
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, metric: float) -> bool:
        """Record an epoch's metric; True when it is a new best."""
        if metric > self.best:
            self.best = metric
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def make_optimizer(model: HybridDetector, config: TrainConfig) -> torch.optim.AdamW:
    """AdamW with two groups: new layers at lr_new, branch trunks at lr_backbone."""
    return torch.optim.AdamW(
        [
            {"params": model.new_parameters(), "lr": config.lr_new},
            {"params": model.trunk_parameters(), "lr": config.lr_backbone},
        ],
        betas=config.betas,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )


def set_trunk_frozen(model: HybridDetector, frozen: bool) -> None:
    for p in model.trunk_parameters():
        p.requires_grad_(not frozen)


def train_step(
    model: HybridDetector,
    optimizer: torch.optim.Optimizer,
    images: torch.Tensor,
    labels: torch.Tensor,
) -> float:
    model.train()
    optimizer.zero_grad(set_to_none=True)
    value = logit_loss(model(images), labels)
    value.backward()
    optimizer.step()
    return float(value.detach())


@torch.no_grad()
def predict(model: HybridDetector, images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    """Scores for a prepared batch, in input order, as float64."""
    model.eval()
    chunks = [forward(model, images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    return torch.cat(chunks).double().numpy()


def _val_auroc(model: HybridDetector, val: LabeledBatch) -> float:
    scores = ScoreSet.from_lists(predict(model, val.images), val.labels.numpy().astype(int), val.ids)
    try:
        return auroc(scores)
    except MetricDomainError as exc:
        raise TrainingError(f"validation split must contain both classes: {exc}") from exc


def train(
    train_data: LabeledBatch,
    val_data: LabeledBatch,
    hybrid_config: HybridConfig,
    train_config: TrainConfig,
) -> TrainResult:
    """
    Train with AdamW (decoupled weight decay) and two learning-rate groups.

    Branch trunks receive no updates during the first lit_freeze_epochs epochs
    (light initial tuning), then train at lr_backbone. Training stops when
    validation AUROC has not improved for `patience` epochs and the best
    validation checkpoint is returned.

    Raises:
        TrainingError: if a split is empty or validation has a single class.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise TrainingError("train and validation splits must be non-empty")
    if set(train_data.ids) & set(val_data.ids):
        raise TrainingError("train and validation splits overlap")

    torch.use_deterministic_algorithms(True)
    model = build_model(hybrid_config, train_config.seed)
    if train_data.images.dtype != torch.float32:
        model = model.to(train_data.images.dtype)
    optimizer = make_optimizer(model, train_config)
    shuffler = torch.Generator().manual_seed(train_config.seed)

    result = TrainResult(model=model)
    stopper = EarlyStopping(train_config.patience)
    best_state = copy.deepcopy(model.state_dict())

    for epoch in range(1, train_config.max_epochs + 1):
        frozen = epoch <= train_config.lit_freeze_epochs
        set_trunk_frozen(model, frozen)

        order = torch.randperm(len(train_data), generator=shuffler)
        losses: List[float] = []
        for start in range(0, len(order), train_config.batch_size):
            idx = order[start : start + train_config.batch_size]
            losses.append(train_step(model, optimizer, train_data.images[idx], train_data.labels[idx]))

        val_auroc = _val_auroc(model, val_data)
        record = EpochRecord(epoch, float(np.mean(losses)), val_auroc, frozen)
        result.history.append(record)
        logger.info(
            "epoch %d: loss=%.4f val_auroc=%.4f%s",
            epoch, record.train_loss, val_auroc, " (trunk frozen)" if frozen else "",
        )

        if stopper.update(epoch, val_auroc):
            best_state = copy.deepcopy(model.state_dict())
        if stopper.should_stop:
            logger.info("early stop after epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break

    set_trunk_frozen(model, False)
    model.load_state_dict(best_state)
    result.best_epoch = stopper.best_epoch
    result.best_val_auroc = stopper.best
    return result


# -------------------- Scoring --------------------


def degrade_images(
    images: Sequence[ImageTensor],
    grid: ConditionGrid,
    batch_size: Optional[int] = None,
) -> Dict[Condition, List[ImageTensor]]:
    """Every image under every grid condition (unit range)."""
    return {cond: apply_condition_batch(images, cond, batch_size) for cond in grid}


def score_images(
    model: HybridDetector,
    images: Sequence[ImageTensor],
    labels: Sequence[int],
    ids: Sequence[str],
) -> ScoreSet:
    """Score already-degraded unit images; frequency enhancement follows the model config."""
    batch = to_batch(images, model.config, next(model.parameters()).dtype)
    return ScoreSet.from_lists(predict(model, batch), list(labels), list(ids))


def score_dataset(
    model: HybridDetector,
    images: Sequence[ImageTensor],
    labels: Sequence[int],
    ids: Sequence[str],
    grid: ConditionGrid,
) -> Dict[Condition, ScoreSet]:
    """ScoreSet per grid condition: degrade, (high-pass,) normalize, forward."""
    degraded = degrade_images(images, grid)
    return {cond: score_images(model, imgs, labels, ids) for cond, imgs in degraded.items()}


# -------------------- Checkpoints --------------------


def save_checkpoint(model: HybridDetector, path: Path, extra: Optional[Dict[str, Any]] = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "hybrid_config": model.config.to_dict(),
            "state_dict": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path: Path) -> HybridDetector:
    """
    Raises:
        ImageIOError: if the file is missing.
        ContractError: if the checkpoint format version is unknown.
    """
    if not path.exists():
        raise ImageIOError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ContractError(f"Unsupported checkpoint format: {payload.get('format_version')!r}")
    model = HybridDetector(HybridConfig.from_dict(payload["hybrid_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
