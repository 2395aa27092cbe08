"""The one-stage mutual gaze transformer.

Image -> CNN backbone -> 1x1 channel reduction -> flatten + 2D sine positions
-> transformer encoder (context feature) -> transformer decoder over N learned
mutual gaze queries -> five heads per query: three 3-way confidence heads
(person 1, person 2, gaze) and two 3-layer box MLPs.

Everything is sized by :class:`ModelConfig`, so the full-size network and
the tiny CPU variant used in tests share one code path.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class ModelConfig:
    d_model: int = 256
    num_queries: int = 100
    enc_layers: int = 6
    dec_layers: int = 6
    num_heads: int = 8
    ffn_dim: int = 2048
    dropout: float = 0.1
    backbone: str = "resnet50"  # resnet50 | resnet101 | resnet18 | tiny
    tiny_channels: tuple[int, ...] = (32, 64, 128)
    aux_loss: bool = True
    pos_temperature: float = 10000.0
    query_init_std: float = 0.02

    def __post_init__(self):
        self.tiny_channels = tuple(self.tiny_channels)
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if self.d_model % 4:
            raise ValueError("d_model must be a multiple of 4 for the 2D sine encoding")
        if self.num_queries < 1:
            raise ValueError("num_queries must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tiny_channels"] = list(self.tiny_channels)
        return d


# ---------------------------------------------------------------- backbones


class TinyBackbone(nn.Module):
    """Stride-2 conv stack with group norm, for training from scratch on small images."""

    def __init__(self, channels=(32, 64, 128), groups=8):
        super().__init__()
        layers, cin = [], 3
        for cout in channels:
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False), nn.GroupNorm(groups, cout),
                       nn.ReLU(inplace=True)]
            cin = cout
        layers += [nn.Conv2d(cin, cin, 3, padding=1, bias=False), nn.GroupNorm(groups, cin), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*layers)
        self.num_channels = cin
        self.stride = 2 ** len(channels)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x):
        return self.body(x)


class ResNetBackbone(nn.Module):
    """torchvision ResNet trunk up to ``layer4`` with frozen batch norm."""

    def __init__(self, name: str = "resnet50"):
        super().__init__()
        import torchvision
        from torchvision.ops import FrozenBatchNorm2d

        net = getattr(torchvision.models, name)(weights=None, norm_layer=FrozenBatchNorm2d)
        self.body = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3, net.layer4
        )
        self.num_channels = 512 if name in ("resnet18", "resnet34") else 2048
        self.stride = 32

    def forward(self, x):
        return self.body(x)


def build_backbone(cfg: ModelConfig) -> nn.Module:
    if cfg.backbone == "tiny":
        return TinyBackbone(cfg.tiny_channels)
    return ResNetBackbone(cfg.backbone)


# ---------------------------------------------------------------- positions


def sine_position_encoding(mask: torch.Tensor, d: int, temperature: float = 10000.0) -> torch.Tensor:
    """2D sine-cosine encoding ``[B, d, H, W]`` for a padding mask ``[B, H, W]``.

    The first ``d/2`` channels encode the row, the last ``d/2`` the column.
    Positions are counted over valid (unpadded) pixels and scaled to [0, 2pi].
    """
    half = d // 2
    not_mask = ~mask
    y = not_mask.cumsum(1, dtype=torch.float64)
    x = not_mask.cumsum(2, dtype=torch.float64)
    y = (y - 0.5) / (y[:, -1:, :].clamp(min=1)) * 2 * math.pi
    x = (x - 0.5) / (x[:, :, -1:].clamp(min=1)) * 2 * math.pi
    dim_t = torch.arange(half, dtype=torch.float64, device=mask.device)
    dim_t = temperature ** (2 * torch.div(dim_t, 2, rounding_mode="floor") / half)
    px = x[..., None] / dim_t
    py = y[..., None] / dim_t
    px = torch.stack((px[..., 0::2].sin(), px[..., 1::2].cos()), dim=4).flatten(3)
    py = torch.stack((py[..., 0::2].sin(), py[..., 1::2].cos()), dim=4).flatten(3)
    return torch.cat((py, px), dim=3).permute(0, 3, 1, 2)


def positional_encoding(h: int, w: int, d: int, temperature: float = 10000.0) -> torch.Tensor:
    """Encoding of an unpadded ``h x w`` grid, flattened row-major to ``[d, h*w]``."""
    mask = torch.zeros(1, h, w, dtype=torch.bool)
    return sine_position_encoding(mask, d, temperature)[0].flatten(1)


# ---------------------------------------------------------------- transformer


class EncoderLayer(nn.Module):
    def __init__(self, d, heads, ffn, dropout):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.linear1 = nn.Linear(d, ffn)
        self.linear2 = nn.Linear(ffn, d)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, src, pos, key_padding_mask=None):
        # query and key see the positions, the value is the bare embedding
        q = k = src + pos
        out, attn = self.self_attn(
            q, k, src, key_padding_mask=key_padding_mask, need_weights=True, average_attn_weights=False
        )
        src = self.norm1(src + self.dropout(out))
        out = self.linear2(self.dropout(F.relu(self.linear1(src))))
        return self.norm2(src + self.dropout(out)), attn


class DecoderLayer(nn.Module):
    def __init__(self, d, heads, ffn, dropout):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(d, heads, dropout=dropout, batch_first=True)
        self.linear1 = nn.Linear(d, ffn)
        self.linear2 = nn.Linear(ffn, d)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(dropout)

    def forward(self, tgt, queries, memory, pos, key_padding_mask=None):
        # first layer: tgt is zero, so Q = K = V = queries
        x = tgt + queries
        out, _ = self.self_attn(x, x, x, need_weights=False)
        tgt = self.norm1(tgt + self.dropout(out))
        out, attn = self.cross_attn(
            tgt + queries, memory + pos, memory,
            key_padding_mask=key_padding_mask, need_weights=True, average_attn_weights=False,
        )
        tgt = self.norm2(tgt + self.dropout(out))
        out = self.linear2(self.dropout(F.relu(self.linear1(tgt))))
        return self.norm3(tgt + self.dropout(out)), attn


class MLP(nn.Module):
    def __init__(self, d_in, hidden, d_out, num_layers):
        super().__init__()
        dims = [d_in] + [hidden] * (num_layers - 1)
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims, dims[1:] + [d_out]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


# ---------------------------------------------------------------- outputs


@dataclass
class HeadOutput:
    logits_h1: torch.Tensor
    logits_h2: torch.Tensor
    logits_gaze: torch.Tensor
    box_logits_a: torch.Tensor
    box_logits_b: torch.Tensor

    @property
    def boxes_a(self) -> torch.Tensor:
        return self.box_logits_a.sigmoid()

    @property
    def boxes_b(self) -> torch.Tensor:
        return self.box_logits_b.sigmoid()


@dataclass
class ForwardOutput:
    """Per-decoder-layer head outputs stacked on a leading layer axis."""

    logits_h1: torch.Tensor  # [L, B, N, 3]
    logits_h2: torch.Tensor
    logits_gaze: torch.Tensor
    box_logits_a: torch.Tensor  # [L, B, N, 4]
    box_logits_b: torch.Tensor
    enc_attn: torch.Tensor | None = field(default=None, repr=False)  # [B, heads, HW, HW], last layer
    dec_attn: torch.Tensor | None = field(default=None, repr=False)  # [B, heads, N, HW], last layer
    feature_size: tuple[int, int] = (0, 0)

    @property
    def num_layers(self) -> int:
        return self.logits_h1.shape[0]

    def layer(self, i: int) -> HeadOutput:
        return HeadOutput(
            self.logits_h1[i], self.logits_h2[i], self.logits_gaze[i], self.box_logits_a[i], self.box_logits_b[i]
        )

    def final(self) -> HeadOutput:
        return self.layer(self.num_layers - 1)


# ---------------------------------------------------------------- network


class MGTR(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.backbone = build_backbone(cfg)
        self.input_proj = nn.Conv2d(self.backbone.num_channels, d, kernel_size=1)
        enc = EncoderLayer(d, cfg.num_heads, cfg.ffn_dim, cfg.dropout)
        dec = DecoderLayer(d, cfg.num_heads, cfg.ffn_dim, cfg.dropout)
        self.encoder = nn.ModuleList(copy.deepcopy(enc) for _ in range(cfg.enc_layers))
        self.decoder = nn.ModuleList(copy.deepcopy(dec) for _ in range(cfg.dec_layers))
        self.decoder_norm = nn.LayerNorm(d)
        self.query_embed = nn.Embedding(cfg.num_queries, d)
        self.class_h1 = nn.Linear(d, 3)
        self.class_h2 = nn.Linear(d, 3)
        self.class_gaze = nn.Linear(d, 3)
        self.box_a = MLP(d, d, 4, 3)
        self.box_b = MLP(d, d, 4, 3)
        self._reset_parameters()

    def _reset_parameters(self):
        for module in (self.encoder, self.decoder):
            for p in module.parameters():
                if p.dim() > 1:
                    nn.init.xavier_uniform_(p)
        nn.init.normal_(self.query_embed.weight, std=self.cfg.query_init_std)

    def backbone_parameters(self):
        return self.backbone.parameters()

    def head_parameters(self):
        ids = {id(p) for p in self.backbone.parameters()}
        return (p for p in self.parameters() if id(p) not in ids)

    # -- stages

    def extract_features(self, images: torch.Tensor) -> torch.Tensor:
        stride = self.backbone.stride
        if images.shape[-1] < stride or images.shape[-2] < stride:
            raise ValueError(
                f"image {tuple(images.shape[-2:])} is smaller than the backbone stride {stride}"
            )
        return self.backbone(images)

    def reduce_and_flatten(self, features: torch.Tensor) -> torch.Tensor:
        """``[B, C, H, W] -> [B, H*W, d]``, spatial positions in row-major order."""
        return self.input_proj(features).flatten(2).transpose(1, 2)

    def encode(self, embedding, pos, key_padding_mask=None):
        attn = None
        for layer in self.encoder:
            embedding, attn = layer(embedding, pos, key_padding_mask)
        return embedding, attn

    def decode(self, context, pos, queries=None, key_padding_mask=None):
        """Returns per-layer output embeddings ``[L, B, N, d]`` and last cross-attention."""
        bsz = context.shape[0]
        if queries is None:
            queries = self.query_embed.weight
        if queries.dim() == 2:
            queries = queries.unsqueeze(0).expand(bsz, -1, -1)
        tgt = torch.zeros_like(queries)
        outs, attn = [], None
        for layer in self.decoder:
            tgt, attn = layer(tgt, queries, context, pos, key_padding_mask)
            outs.append(self.decoder_norm(tgt))
        return torch.stack(outs), attn

    def predict_heads(self, hs: torch.Tensor) -> HeadOutput:
        return HeadOutput(
            self.class_h1(hs), self.class_h2(hs), self.class_gaze(hs), self.box_a(hs), self.box_b(hs)
        )

    def forward(self, images: torch.Tensor, mask: torch.Tensor | None = None) -> ForwardOutput:
        """``images [B,3,H,W]``; ``mask [B,H,W]`` is True on padded pixels."""
        feats = self.extract_features(images)
        fh, fw = feats.shape[-2:]
        if mask is None:
            fmask = torch.zeros(feats.shape[0], fh, fw, dtype=torch.bool, device=feats.device)
        else:
            fmask = F.interpolate(mask[:, None].float(), size=(fh, fw)).bool()[:, 0]
        pos = sine_position_encoding(fmask, self.cfg.d_model, self.cfg.pos_temperature)
        pos = pos.to(feats.dtype).flatten(2).transpose(1, 2)
        kpm = fmask.flatten(1) if mask is not None else None
        emb = self.reduce_and_flatten(feats)
        context, enc_attn = self.encode(emb, pos, kpm)
        hs, dec_attn = self.decode(context, pos, key_padding_mask=kpm)
        heads = self.predict_heads(hs)
        return ForwardOutput(
            heads.logits_h1, heads.logits_h2, heads.logits_gaze, heads.box_logits_a, heads.box_logits_b,
            enc_attn=enc_attn, dec_attn=dec_attn, feature_size=(fh, fw),
        )


# ---------------------------------------------------------------- DETR weight import

_DETR_BACKBONE = {"conv1": "0", "bn1": "1", "layer1": "4", "layer2": "5", "layer3": "6", "layer4": "7"}


def detr_key_map(key: str) -> list[str]:
    """Target parameter names for one key of an official DETR state dict.

    Backbone, input projection, encoder/decoder layers, the final decoder norm
    and the query embeddings carry over by renaming; DETR's box MLP seeds both
    head-box MLPs. The 92-way class head has no counterpart and maps to nothing.
    """
    if key.startswith("backbone.0.body."):
        head, _, rest = key[len("backbone.0.body."):].partition(".")
        return [f"backbone.body.{_DETR_BACKBONE[head]}.{rest}"] if head in _DETR_BACKBONE else []
    if key.startswith("transformer.encoder.layers."):
        return ["encoder." + key[len("transformer.encoder.layers."):]]
    if key.startswith("transformer.decoder.layers."):
        return ["decoder." + key[len("transformer.decoder.layers."):].replace("multihead_attn", "cross_attn")]
    if key.startswith("transformer.decoder.norm."):
        return ["decoder_norm." + key.rsplit(".", 1)[1]]
    if key.startswith(("input_proj.", "query_embed.")):
        return [key]
    if key.startswith("bbox_embed."):
        rest = key[len("bbox_embed."):]
        return [f"box_a.{rest}", f"box_b.{rest}"]
    return []


def load_detr_weights(model: MGTR, state_dict: dict[str, torch.Tensor]) -> tuple[list[str], list[str]]:
    """Copy matching tensors from a DETR checkpoint into ``model``.

    Returns ``(loaded, skipped)`` target/source names. Tensors whose shape does
    not fit (other layer counts, query counts or widths) are skipped, not
    reshaped.
    """
    own = model.state_dict()
    loaded, skipped = [], []
    with torch.no_grad():
        for key, value in state_dict.items():
            targets = [t for t in detr_key_map(key) if t in own and own[t].shape == value.shape]
            if not targets:
                skipped.append(key)
            for t in targets:
                own[t].copy_(value)
                loaded.append(t)
    return loaded, skipped
