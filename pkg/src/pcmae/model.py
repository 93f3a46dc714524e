"""Dual-branch masked autoencoder over point-cloud patches.

One shared transformer stack encodes two masked views of the same cloud: a
globally random-masked view and a locally block-masked view.  The local
branch interleaves an edge-convolution enhancement block after each
transformer layer (configurable per variant), and each branch owns a small
decoder that reconstructs the hidden patches from mask tokens.  Variants
A-H toggle branch presence and enhancement placement.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import geometry
from .autodiff import Tensor
from .errors import ConfigError, UsageError
from .layers import LayerNorm, Linear, Module, TransformerBlock, parameter, trunc_normal
from .patchmask import MaskPlan, PatchSet, split

GLOBAL = "global"
LOCAL = "local"


@dataclass(frozen=True)
class Variant:
    """Branch presence and enhancement placement for one architecture."""

    global_branch: bool
    local_branch: bool
    enhance_global: bool
    enhance_local: bool

    @property
    def dual(self) -> bool:
        return self.global_branch and self.local_branch

    @property
    def any_enhance(self) -> bool:
        return self.enhance_global or self.enhance_local

    def uses_enhance(self, branch: str) -> bool:
        return self.enhance_global if branch == GLOBAL else self.enhance_local

    @property
    def finetune_branch(self) -> str:
        """Branch used for classification fine-tuning.

        The enhanced branch wins when exactly one branch carries the
        enhancement stack; otherwise the local branch when present, else
        the global branch.  Reproduces the per-variant fine-tune
        parameter counts.
        """
        if self.enhance_global and not self.enhance_local and self.global_branch:
            return GLOBAL
        if self.local_branch:
            return LOCAL
        return GLOBAL


VARIANTS: dict[str, Variant] = {
    "A": Variant(True, False, False, False),
    "B": Variant(False, True, False, False),
    "C": Variant(True, False, True, False),
    "D": Variant(False, True, False, True),
    "E": Variant(True, True, False, False),
    "F": Variant(True, True, True, False),
    "G": Variant(True, True, False, True),
    "H": Variant(True, True, True, True),
}


@dataclass
class ModelConfig:
    n_layers: int = 12
    embed_dim: int = 384
    heads: int = 6
    lem_k: int = 20
    lem_scale: float = 1.0
    decoder_depth: int = 4
    mask_ratio: float = 0.6
    patches: int = 64
    group_size: int = 32
    variant: str = "G"
    num_classes: int = 15
    lem_first: bool = False  # apply the enhancement before its block, not after

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected A..H")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        for name in ("n_layers", "heads", "lem_k", "decoder_depth", "patches",
                     "group_size", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if round(self.lem_scale * self.embed_dim) < 1:
            raise ConfigError(
                f"lem_scale {self.lem_scale} collapses the hidden width to zero"
            )
        visible = self.patches - int(round(self.mask_ratio * self.patches))
        if VARIANTS[self.variant].any_enhance and self.lem_k > visible:
            raise ConfigError(
                f"lem_k {self.lem_k} exceeds the {visible} patches visible "
                f"during pre-training"
            )

    @property
    def num_masked(self) -> int:
        return int(round(self.mask_ratio * self.patches))

    @property
    def enhance_hidden(self) -> int:
        return int(round(self.lem_scale * self.embed_dim))

    @staticmethod
    def toy(**overrides) -> "ModelConfig":
        """Desk-scale preset: trains in seconds, exercises every code path."""
        cfg = ModelConfig(
            n_layers=3, embed_dim=96, heads=3, lem_k=4, lem_scale=1.0,
            decoder_depth=2, mask_ratio=0.6, patches=16, group_size=16,
            variant="G", num_classes=6,
        )
        return replace(cfg, **overrides)

    @staticmethod
    def full(**overrides) -> "ModelConfig":
        """Full-scale preset: 12 layers at width 384, 64 patches of 32 points."""
        return replace(ModelConfig(), **overrides)


@dataclass
class TokenBatch:
    """Per-branch token sequence with the patch centers it came from."""

    tokens: Tensor  # (q, C)
    centers: np.ndarray  # (q, 3)
    branch: str

    def __post_init__(self):
        if self.tokens.data.shape[0] != self.centers.shape[0]:
            raise UsageError(
                f"token rows {self.tokens.data.shape[0]} != center rows "
                f"{self.centers.shape[0]}"
            )
        if self.branch not in (GLOBAL, LOCAL):
            raise UsageError(f"branch must be global or local, got {self.branch!r}")


class PatchEmbed(Module):
    """Two-stage permutation-invariant patch embedder.

    A shared per-point map lifts each of the m points, max-pool collapses
    the patch to one vector, and a second map produces the token.
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        # Norm-free feed-forward stack: fan-in scaling, as for the
        # classifier head, so point geometry survives to the token.
        self.point1 = Linear(3, 128, rng, std=(2.0 / 3) ** 0.5)
        self.point2 = Linear(128, 256, rng, std=(2.0 / 128) ** 0.5)
        self.patch1 = Linear(256, 512, rng, std=(2.0 / 256) ** 0.5)
        self.patch2 = Linear(512, dim, rng, std=(2.0 / 512) ** 0.5)

    def __call__(self, groups: Tensor) -> Tensor:
        if groups.data.ndim != 3 or groups.data.shape[-1] != 3:
            raise UsageError(f"expected (q, m, 3) groups, got {groups.data.shape}")
        h = self.point2(ad.gelu(self.point1(groups)))  # (q, m, 256)
        pooled = ad.max_over_axis(h, 1)  # (q, 256)
        return self.patch2(ad.gelu(self.patch1(pooled)))


class PosEncoder(Module):
    """Two-layer map from a 3D center to a C-dim positional code."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.fc1 = Linear(3, 128, rng, std=(2.0 / 3) ** 0.5)
        self.fc2 = Linear(128, dim, rng, std=(2.0 / 128) ** 0.5)

    def __call__(self, centers: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(centers)))


class EdgeConvBlock(Module):
    """Local enhancement: edge features over the K nearest patch tokens.

    For each token, gathers its K nearest neighbors by center distance
    (indices precomputed, self included), forms (center, neighbor - center)
    pairs, lifts them with one layer, max-pools over K and projects back,
    with a residual connection from the input tokens.
    """

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.expand = Linear(2 * dim, hidden, rng)
        self.reduce = Linear(hidden, dim, rng)

    def __call__(self, tokens: Tensor, neighbor_idx: np.ndarray) -> Tensor:
        q, k = neighbor_idx.shape
        if q != tokens.data.shape[0]:
            raise UsageError(
                f"neighbor table rows {q} != token rows {tokens.data.shape[0]}"
            )
        center = ad.gather_rows(tokens, np.repeat(np.arange(q), k))
        neighbor = ad.gather_rows(tokens, neighbor_idx.reshape(-1))
        pairs = ad.concat_axis([center, ad.sub(neighbor, center)], 1)  # (q*k, 2C)
        hidden = ad.gelu(self.expand(pairs))
        hidden = ad.reshape(hidden, (q, k, hidden.data.shape[-1]))
        pooled = ad.max_over_axis(hidden, 1)
        return ad.add(tokens, self.reduce(pooled))


class PatchDecoder(Module):
    """Reconstructs masked patches from visible tokens plus mask tokens."""

    def __init__(self, dim: int, depth: int, heads: int, group_size: int,
                 rng: np.random.Generator):
        self.mask_token = parameter(trunc_normal(rng, (1, dim)))
        self.pos_enc = PosEncoder(dim, rng)
        self.blocks = [TransformerBlock(dim, heads, rng) for _ in range(depth)]
        self.norm = LayerNorm(dim)
        self.head = Linear(dim, group_size * 3, rng)
        self.group_size = group_size

    def __call__(self, visible: TokenBatch, mask_centers: np.ndarray) -> Tensor:
        v = visible.tokens.data.shape[0]
        rp = mask_centers.shape[0]
        dim = visible.tokens.data.shape[1]
        dtype = visible.tokens.data.dtype
        mask_tok = ad.broadcast(self.mask_token, (rp, dim))
        seq = ad.concat_axis([visible.tokens, mask_tok], 0)
        all_centers = np.concatenate(
            [visible.centers, mask_centers]).astype(dtype, copy=False)
        seq = ad.add(seq, self.pos_enc(Tensor(all_centers)))
        for block in self.blocks:
            seq = block(seq)
        seq = self.norm(seq)
        tail = ad.slice_axis(seq, 0, v, v + rp)
        flat = self.head(tail)  # (rp, m*3)
        return ad.reshape(flat, (rp, self.group_size, 3))


class ClassifierHead(Module):
    """Pooled-token classifier: concat(mean, max) -> three layers -> logits."""

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator):
        # No residual path or norm in this stack, so transformer-scale init
        # would leave three stacked layers near-constant; scale by fan-in.
        self.fc1 = Linear(2 * dim, 256, rng, std=(2.0 / (2 * dim)) ** 0.5)
        self.fc2 = Linear(256, 256, rng, std=(2.0 / 256) ** 0.5)
        self.fc3 = Linear(256, num_classes, rng, std=(2.0 / 256) ** 0.5)

    def __call__(self, tokens: Tensor) -> Tensor:
        pooled = ad.concat_axis(
            [ad.mean_over_axis(tokens, 0), ad.max_over_axis(tokens, 0)], 0)
        h = ad.gelu(self.fc1(pooled))
        h = ad.gelu(self.fc2(h))
        logits = self.fc3(h)
        return ad.reshape(logits, (logits.data.shape[-1],))


class DualBranchMAE(Module):
    """The full model: shared encoder stack, per-branch decoders, classifier.

    The transformer blocks are single storage used by both branches; the
    enhancement stack likewise is one set of modules, applied to whichever
    branches the variant marks.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.variant = VARIANTS[config.variant]
        rng = np.random.default_rng(seed)
        dim = config.embed_dim
        self.embed = PatchEmbed(dim, rng)
        self.pos_enc = PosEncoder(dim, rng)
        self.blocks = [
            TransformerBlock(dim, config.heads, rng) for _ in range(config.n_layers)
        ]
        self.final_norm = LayerNorm(dim)
        self.enhancers = (
            [EdgeConvBlock(dim, config.enhance_hidden, rng)
             for _ in range(config.n_layers)]
            if self.variant.any_enhance else []
        )
        self.decoder_g = (
            PatchDecoder(dim, config.decoder_depth, config.heads,
                         config.group_size, rng)
            if self.variant.global_branch else None
        )
        self.decoder_l = (
            PatchDecoder(dim, config.decoder_depth, config.heads,
                         config.group_size, rng)
            if self.variant.local_branch else None
        )
        self.classifier = ClassifierHead(dim, config.num_classes, rng)

    # -- encoding ---------------------------------------------------------

    def tokenize(self, ps: PatchSet, branch: str) -> TokenBatch:
        """Embed patch groups and add positional codes of their centers."""
        groups = Tensor(ps.groups.astype(np.float32))
        centers = Tensor(ps.centers.astype(np.float32))
        tokens = ad.add(self.embed(groups), self.pos_enc(centers))
        return TokenBatch(tokens=tokens, centers=ps.centers, branch=branch)

    def encode(self, batch: TokenBatch) -> TokenBatch:
        """Run the shared stack; enhanced branches interleave edge blocks."""
        if not getattr(self.variant, f"{batch.branch}_branch"):
            raise ConfigError(
                f"variant {self.config.variant} has no {batch.branch} branch"
            )
        enhance = self.variant.uses_enhance(batch.branch) and self.enhancers
        if enhance:
            q = batch.tokens.data.shape[0]
            if self.config.lem_k > q:
                raise UsageError(
                    f"lem_k {self.config.lem_k} exceeds {q} available patches"
                )
            # Centers are constant through the stack, so one KNN serves all layers.
            neighbor_idx = geometry.knn(batch.centers, batch.centers, self.config.lem_k)
        x = batch.tokens
        for i, block in enumerate(self.blocks):
            if enhance and self.config.lem_first:
                x = self.enhancers[i](x, neighbor_idx)
            x = block(x)
            if enhance and not self.config.lem_first:
                x = self.enhancers[i](x, neighbor_idx)
        x = self.final_norm(x)
        return TokenBatch(tokens=x, centers=batch.centers, branch=batch.branch)

    # -- pre-training -----------------------------------------------------

    def reconstruct(self, ps: PatchSet, plan: MaskPlan, branch: str) -> tuple:
        """Encode the visible patches and predict the masked ones.

        Returns (prediction (rp, m, 3) tensor, target (rp, m, 3) array),
        both center-relative.
        """
        visible_ps, masked_ps = split(ps, plan)
        expected = ps.num_patches - self.config.num_masked
        if visible_ps.num_patches != expected:
            raise UsageError(
                f"visible patch count {visible_ps.num_patches} != expected "
                f"{expected} for mask_ratio {self.config.mask_ratio}"
            )
        encoded = self.encode(self.tokenize(visible_ps, branch))
        decoder = self.decoder_g if branch == GLOBAL else self.decoder_l
        pred = decoder(encoded, masked_ps.centers)
        return pred, masked_ps.groups.astype(np.float32)

    # -- fine-tuning ------------------------------------------------------

    def classify(self, ps: PatchSet) -> Tensor:
        """Logits for one cloud: full patch set through the fine-tune branch."""
        encoded = self.encode(self.tokenize(ps, self.variant.finetune_branch))
        return self.classifier(encoded.tokens)

    # -- bookkeeping ------------------------------------------------------

    def count_params(self, mode: str) -> int:
        return count_params(self, mode)

    def finetune_trainable(self, finetune_mode: str) -> dict[str, Tensor]:
        """Named tensors updated during fine-tuning under the given mode."""
        names = self.named_parameters()
        if finetune_mode == "full":
            keep_prefixes = ("embed.", "pos_enc.", "blocks.", "final_norm.",
                             "classifier.")
            if self.variant.uses_enhance(self.variant.finetune_branch):
                keep_prefixes += ("enhancers.",)
        elif finetune_mode == "lem_and_head":
            keep_prefixes = ("enhancers.", "classifier.")
        else:
            raise ConfigError(
                f"finetune_mode must be full or lem_and_head, got {finetune_mode!r}"
            )
        return {k: v for k, v in names.items() if k.startswith(keep_prefixes)}


def encoder_forward(model: DualBranchMAE, global_in: TokenBatch | None,
                    local_in: TokenBatch | None) -> tuple:
    """Encode both branch inputs with the shared stack; None passes through."""
    variant = model.variant
    if (global_in is None) == variant.global_branch:
        raise ConfigError(
            f"variant {model.config.variant}: global input "
            f"{'required' if variant.global_branch else 'not accepted'}"
        )
    if (local_in is None) == variant.local_branch:
        raise ConfigError(
            f"variant {model.config.variant}: local input "
            f"{'required' if variant.local_branch else 'not accepted'}"
        )
    out_g = model.encode(global_in) if global_in is not None else None
    out_l = model.encode(local_in) if local_in is not None else None
    return out_g, out_l


def chamfer_mean(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-patch set-to-set distance between predictions and targets.

    Equivalent to averaging chamfer_l2 over the rp patches; the
    nearest-neighbor assignments are found per patch, then offset into one
    flat gather so the tape stays small regardless of patch count.
    """
    if pred.data.shape != target.shape:
        raise UsageError(
            f"prediction shape {pred.data.shape} != target shape {target.shape}"
        )
    rp, m, _ = target.shape
    offsets = np.arange(rp, dtype=np.int64)[:, None] * m
    idx_xy = np.empty((rp, m), dtype=np.int64)
    idx_yx = np.empty((rp, m), dtype=np.int64)
    pred_np = pred.data
    for j in range(rp):
        idx_xy[j] = geometry.nearest_indices(pred_np[j], target[j])
        idx_yx[j] = geometry.nearest_indices(target[j], pred_np[j])
    target_flat = target.reshape(rp * m, 3)
    pred_flat = ad.reshape(pred, (rp * m, 3))
    d1 = ad.sub(pred_flat, Tensor(target_flat[(idx_xy + offsets).reshape(-1)]))
    d2 = ad.sub(Tensor(target_flat.copy()),
                ad.gather_rows(pred_flat, (idx_yx + offsets).reshape(-1)))
    t1 = ad.sum_all(ad.mul(d1, d1))
    t2 = ad.sum_all(ad.mul(d2, d2))
    return ad.scale(ad.add(t1, t2), 1.0 / (rp * m))


def pretrain_loss(pred_g, target_g, pred_l, target_l) -> Tensor:
    """Reconstruction loss: sum over active branches of their mean distance."""
    if pred_g is None and pred_l is None:
        raise UsageError("pretrain loss needs at least one branch")
    loss = None
    for pred, target in ((pred_g, target_g), (pred_l, target_l)):
        if pred is None:
            continue
        term = chamfer_mean(pred, target)
        loss = term if loss is None else ad.add(loss, term)
    return loss


def count_params(model: DualBranchMAE, mode: str) -> int:
    """Trainable scalar count for one training stage.

    pretrain: encoder stack (with enhancement when any branch uses it) plus
    the decoders of the active branches.  finetune: encoder as seen by the
    fine-tune branch plus the classifier head.
    """
    named = model.named_parameters()

    def total(prefixes) -> int:
        return sum(v.data.size for k, v in named.items()
                   if k.startswith(tuple(prefixes)))

    common = ["embed.", "pos_enc.", "blocks.", "final_norm."]
    if mode == "pretrain":
        groups = common + ["decoder_g.", "decoder_l."]
        if model.variant.any_enhance:
            groups.append("enhancers.")
    elif mode == "finetune":
        groups = common + ["classifier."]
        if model.variant.uses_enhance(model.variant.finetune_branch):
            groups.append("enhancers.")
    else:
        raise UsageError(f"mode must be pretrain or finetune, got {mode!r}")
    return total(groups)
