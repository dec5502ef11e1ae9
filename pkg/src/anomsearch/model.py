"""Three-encoder retrieval architecture with pose-aware fusion.

A shared transformer trunk encodes both the RGB image and the rasterized
keypoint heatmaps (each through its own input projection). The pose tokens,
layer-normalized, act as queries in a multi-head cross-attention over the
image tokens, and the attention output is added back onto the image tokens.
A text encoder and a cross encoder (with matching and masked-token heads)
complete the model.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .nn import (
    AttentionParams,
    CrossAttentionBlock,
    LayerNormParams,
    Linear,
    TransformerBlock,
    multi_head_attention,
)
from .tensor import Tensor, concat, gelu, l2_normalize, read_tensor, write_tensor

CLS_ID = 0
PAD_ID = 1
MASK_ID = 2
SEP_ID = 3
N_SPECIAL_TOKENS = 4


def config_hash(d):
    """Stable short hash of a JSON-able config mapping."""
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    keypoints: int = 17
    dim: int = 64
    heads: int = 4
    image_blocks: int = 2
    text_blocks: int = 2
    cross_blocks: int = 2
    ff_mult: int = 4
    vocab_size: int = 512
    max_text_len: int = 56
    proj_dim: int = 256
    tau: float = 0.07
    pose_enabled: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def n_patches(self):
        return self.grid * self.grid

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def hash(self):
        return config_hash(self.to_dict())


def patchify(pixels, patch_size):
    """[..., H, W, C] -> [..., L, patch_size*patch_size*C], row-major patches."""
    arr = np.asarray(pixels)
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    b, h, w, c = arr.shape
    g = h // patch_size
    arr = arr.reshape(b, g, patch_size, g, patch_size, c)
    arr = arr.transpose(0, 1, 3, 2, 4, 5).reshape(b, g * g, patch_size * patch_size * c)
    return arr[0] if squeeze else arr


def pool_global(token_feats, fc):
    """[AVG(patch rows), CLS row] -> linear -> unit norm.

    Row 0 is the CLS row; the remaining rows are patch/token features.
    """
    if token_feats.shape[-2] < 2:
        raise ValueError("pool_global needs at least one non-CLS token")
    cls_row = token_feats[..., 0, :]
    avg = token_feats[..., 1:, :].mean(axis=-2)
    return l2_normalize(fc(concat([avg, cls_row], axis=-1)))


class RetrievalModel:
    """Pose-aware image encoder, text encoder, and cross encoder."""

    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        cfg = config
        patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels
        pose_patch_dim = cfg.patch_size * cfg.patch_size * cfg.keypoints

        self.patch_proj = Linear(rng, patch_dim, cfg.dim)
        self.pose_proj = Linear(rng, pose_patch_dim, cfg.dim)
        self.pos_emb = Tensor(rng.normal(0, 0.02, size=(cfg.n_patches, cfg.dim)),
                              requires_grad=True)
        self.image_blocks = [TransformerBlock(rng, cfg.dim, cfg.heads, cfg.ff_mult)
                             for _ in range(cfg.image_blocks)]

        self.ln_pose = LayerNormParams(cfg.dim)
        self.pose_ca = AttentionParams(rng, cfg.dim, cfg.heads)

        self.token_emb = Tensor(rng.normal(0, 0.02, size=(cfg.vocab_size, cfg.dim)),
                                requires_grad=True)
        self.text_pos = Tensor(rng.normal(0, 0.02, size=(cfg.max_text_len, cfg.dim)),
                               requires_grad=True)
        self.text_blocks = [TransformerBlock(rng, cfg.dim, cfg.heads, cfg.ff_mult)
                            for _ in range(cfg.text_blocks)]

        self.cross_blocks = [CrossAttentionBlock(rng, cfg.dim, cfg.heads, cfg.ff_mult)
                             for _ in range(cfg.cross_blocks)]
        self.itm_head = _MLPHead(rng, cfg.dim, 2)
        self.mlm_head = _MLPHead(rng, cfg.dim, cfg.vocab_size)

        self.img_pool_fc = Linear(rng, 2 * cfg.dim, cfg.proj_dim)
        self.txt_pool_fc = Linear(rng, 2 * cfg.dim, cfg.proj_dim)

    # -- parameter registry --------------------------------------------------

    def parameters(self):
        params = {}
        params.update(self.patch_proj.parameters("image.patch_proj"))
        params.update(self.pose_proj.parameters("image.pose_proj"))
        params["image.pos_emb"] = self.pos_emb
        for i, blk in enumerate(self.image_blocks):
            params.update(blk.parameters(f"image.{i}"))
        params.update(self.ln_pose.parameters("fuse.ln_pose"))
        params.update(self.pose_ca.parameters("fuse.ca"))
        params["text.token_emb"] = self.token_emb
        params["text.pos_emb"] = self.text_pos
        for i, blk in enumerate(self.text_blocks):
            params.update(blk.parameters(f"text.{i}"))
        for i, blk in enumerate(self.cross_blocks):
            params.update(blk.parameters(f"cross.{i}"))
        params.update(self.itm_head.parameters("cross.itm_head"))
        params.update(self.mlm_head.parameters("cross.mlm_head"))
        params.update(self.img_pool_fc.parameters("pool.image_fc"))
        params.update(self.txt_pool_fc.parameters("pool.text_fc"))
        return params

    # -- encoders ------------------------------------------------------------

    def _trunk(self, embedded):
        x = embedded + self.pos_emb
        for blk in self.image_blocks:
            x = blk(x)
        cls_row = x.mean(axis=-2, keepdims=True)
        return concat([cls_row, x], axis=-2)

    def encode_image(self, pixels):
        """[B, H, W, C] pixels -> [B, 1+L, D] tokens (CLS = mean, prepended)."""
        patches = patchify(pixels, self.config.patch_size)
        return self._trunk(self.patch_proj(Tensor(patches)))

    def encode_pose(self, heatmaps):
        """Rasterized keypoint heatmaps through the shared trunk."""
        hm = np.asarray(heatmaps)
        if hm.shape[-3] != self.config.image_size or hm.shape[-2] != self.config.image_size:
            raise ValueError(
                f"pose grid {hm.shape[-3:-1]} does not match image size {self.config.image_size}"
            )
        patches = patchify(hm, self.config.patch_size)
        return self._trunk(self.pose_proj(Tensor(patches)))

    def fuse_pose(self, f_img, f_pose):
        """f_img + CA(q=LN(f_pose), k=f_img, v=f_img), token-aligned."""
        if f_img.shape[-2] != f_pose.shape[-2]:
            raise ValueError(
                f"token count mismatch: image {f_img.shape} vs pose {f_pose.shape}"
            )
        f_ca = multi_head_attention(self.ln_pose(f_pose), f_img, self.pose_ca)
        return f_img + f_ca

    def embed_images(self, pixels, heatmaps=None):
        """Fused visual tokens f_V for a batch of images (+ optional poses)."""
        f_img = self.encode_image(pixels)
        if self.config.pose_enabled and heatmaps is not None:
            return self.fuse_pose(f_img, self.encode_pose(heatmaps))
        return f_img

    def encode_text(self, tokens):
        """[B, L] int token ids -> [B, L, D]; row 0 is the CLS token."""
        ids = np.asarray(tokens)
        if ids.shape[-1] > self.config.max_text_len:
            raise ValueError(
                f"text length {ids.shape[-1]} exceeds max {self.config.max_text_len}"
            )
        x = T.embedding(self.token_emb, ids) + self.text_pos[: ids.shape[-1], :]
        for blk in self.text_blocks:
            x = blk(x)
        return x

    # -- pooling -------------------------------------------------------------

    def pool_image(self, f_v_tokens):
        return pool_global(f_v_tokens, self.img_pool_fc)

    def pool_text(self, f_t_tokens):
        return pool_global(f_t_tokens, self.txt_pool_fc)

    def image_embedding(self, pixels, heatmaps=None):
        return self.pool_image(self.embed_images(pixels, heatmaps))

    def text_embedding(self, tokens):
        return self.pool_text(self.encode_text(tokens))

    # -- cross encoder -------------------------------------------------------

    def cross_encode(self, f_v_tokens, tokens):
        """Returns (itm_logits [..., 2], mlm_logits [..., L, vocab])."""
        return self.cross_from_text(self.encode_text(tokens), f_v_tokens)

    def cross_from_text(self, f_t_tokens, f_v_tokens, want_itm=True, want_mlm=True):
        """Cross encoder on already-encoded text tokens (avoids re-encoding
        when the caller needs the text features for pooling as well).

        The heads can be disabled individually; the vocabulary-sized MLM
        projection is the single most expensive matmul in the model.
        """
        x = f_t_tokens
        for blk in self.cross_blocks:
            x = blk(x, f_v_tokens)
        itm_logits = self.itm_head(x[..., 0, :]) if want_itm else None
        mlm_logits = self.mlm_head(x) if want_mlm else None
        return itm_logits, mlm_logits

    def itm_probability(self, f_v_tokens, tokens):
        """Matching probability (softmax over the 2-way matching head)."""
        itm_logits, _ = self.cross_encode(f_v_tokens, tokens)
        return T.softmax(itm_logits, axis=-1)[..., 1]


class _MLPHead:
    def __init__(self, rng, dim, out_dim):
        self.lin1 = Linear(rng, dim, dim)
        self.lin2 = Linear(rng, dim, out_dim)

    def __call__(self, x):
        return self.lin2(gelu(self.lin1(x)))

    def parameters(self, prefix):
        return {**self.lin1.parameters(f"{prefix}.lin1"),
                **self.lin2.parameters(f"{prefix}.lin2")}


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, model, extra_arrays=None, extra_meta=None):
    """Write model weights (plus optional optimizer/bookkeeping arrays) as a
    directory of binary tensors with a JSON manifest."""
    os.makedirs(os.path.join(path, "tensors"), exist_ok=True)
    arrays = {name: p.data for name, p in model.parameters().items()}
    if extra_arrays:
        arrays.update(extra_arrays)
    entries = {}
    for i, name in enumerate(sorted(arrays)):
        fname = f"tensors/{i:04d}.cmpt"
        write_tensor(os.path.join(path, fname), arrays[name])
        entries[name] = {
            "file": fname,
            "shape": list(arrays[name].shape),
            "dtype": str(arrays[name].dtype),
        }
    manifest = {
        "format_version": 1,
        "config": model.config.to_dict(),
        "config_hash": model.config.hash(),
        "tensors": entries,
        "extra": extra_meta or {},
    }
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")


def load_checkpoint(path):
    """Returns (model, extra_arrays, extra_meta)."""
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    model = RetrievalModel(ModelConfig.from_dict(manifest["config"]), seed=0)
    params = model.parameters()
    extra = {}
    for name, entry in manifest["tensors"].items():
        arr = read_tensor(os.path.join(path, entry["file"]))
        if name in params:
            if tuple(arr.shape) != params[name].shape:
                raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}, "
                                 f"expected {params[name].shape}")
            params[name].data = arr.astype(params[name].data.dtype)
        else:
            extra[name] = arr
    return model, extra, manifest.get("extra", {})
