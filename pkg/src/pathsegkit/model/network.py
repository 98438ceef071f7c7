"""Text-prompted segmentation network: parameters, forward pass, loss, gradients.

The network follows a query-based decoder design: a learnable patch-embedding
image encoder and an embedding-table text encoder feed a joint interaction
block (queries cross-attend to image tokens, then self-attend jointly with
text tokens, then pass through a feed-forward block).  The refined queries
project into per-query mask embeddings (decoded against the pixel feature
grid into candidate mask logit grids) and class embeddings (matched to the
prompt's global text embedding by cosine similarity to select the output
mask).  Training minimizes lambda_bce * BCE + lambda_dice * soft-overlap
loss on the selected candidate, plus a small cosine alignment term.

Everything is float64 numpy with hand-written backward passes, so analytic
gradients can be validated against finite differences.
"""

from __future__ import annotations

import json
from typing import NamedTuple

import numpy as np

from ..errors import DimensionMismatch, IndivisibleDims, ShapeMismatch, ZeroVector
from .config import ModelConfig
from .layers import (
    linear,
    linear_backward,
    mlp2,
    mlp2_backward,
    mlp3,
    mlp3_backward,
    multihead_attention,
    multihead_attention_backward,
    upsample_bilinear,
    upsample_bilinear_backward,
)
from .text import Vocabulary

CHECKPOINT_VERSION = 1

Params = dict[str, np.ndarray]


def init_params(cfg: ModelConfig, vocab_size: int, seed: int | None = None) -> Params:
    """Fresh parameters: weights ~ U(-1/sqrt(d), 1/sqrt(d)), zero biases,
    queries ~ N(0, 0.02)."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    d, h, d_h = cfg.d, cfg.heads, cfg.head_dim
    bound = 1.0 / np.sqrt(d)

    def u(*shape):
        return rng.uniform(-bound, bound, size=shape)

    params: Params = {
        "queries": rng.normal(0.0, 0.02, size=(cfg.n_queries, d)),
        "img_w": u(cfg.patch * cfg.patch * 3, d),
        "img_b": np.zeros(d),
        "tok_emb": u(vocab_size, d),
        "pos_emb": u(cfg.max_prompt_len, d),
        "ffn_w1": u(d, cfg.ffn_hidden),
        "ffn_b1": np.zeros(cfg.ffn_hidden),
        "ffn_w2": u(cfg.ffn_hidden, d),
        "ffn_b2": np.zeros(d),
        "maskproj_w1": u(d, d),
        "maskproj_b1": np.zeros(d),
        "maskproj_w2": u(d, d),
        "maskproj_b2": np.zeros(d),
        "maskproj_w3": u(d, d),
        "maskproj_b3": np.zeros(d),
        "clsproj_w": u(d, d),
        "clsproj_b": np.zeros(d),
    }
    for prefix in ("cross", "self"):
        params[f"{prefix}_wq"] = u(h, d, d_h)
        params[f"{prefix}_wk"] = u(h, d, d_h)
        params[f"{prefix}_wv"] = u(h, d, d_h)
        params[f"{prefix}_wo"] = u(h * d_h, d)
    return params


def image_to_patches(image: np.ndarray, patch: int) -> np.ndarray:
    """Flatten non-overlapping patch x patch x 3 blocks into rows.

    uint8 input is scaled to [0, 1]; float input is taken as-is.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatch(f"expected HxWx3 image, got {image.shape}")
    h, w, _ = image.shape
    if h % patch or w % patch:
        raise IndivisibleDims(f"image {h}x{w} not divisible by patch size {patch}")
    x = image.astype(float)
    if np.issubdtype(image.dtype, np.integer):
        x = x / 255.0
    gh, gw = h // patch, w // patch
    blocks = x.reshape(gh, patch, gw, patch, 3).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(gh * gw, patch * patch * 3)


def encode_image(image: np.ndarray, params: Params, cfg: ModelConfig):
    """Patch-embed the image: returns (tokens (m, d), pixel map (gh, gw, d))."""
    patches = image_to_patches(image, cfg.patch)
    tokens = linear(patches, params["img_w"], params["img_b"])
    gh = image.shape[0] // cfg.patch
    gw = image.shape[1] // cfg.patch
    return tokens, tokens.reshape(gh, gw, cfg.d)


def encode_text(token_ids: list[int], params: Params, cfg: ModelConfig) -> np.ndarray:
    """Embed token ids with learned positional offsets; row L-1 is the
    prompt's global embedding."""
    if not token_ids:
        raise ValueError("prompt must contain at least one token")
    if len(token_ids) > cfg.max_prompt_len:
        raise ShapeMismatch(
            f"prompt has {len(token_ids)} tokens, max is {cfg.max_prompt_len}"
        )
    ids = np.asarray(token_ids, dtype=int)
    return params["tok_emb"][ids] + params["pos_emb"][: len(ids)]


def cross_attention(queries: np.ndarray, f_image: np.ndarray, params: Params) -> np.ndarray:
    """Image-enhanced queries: queries attend to image tokens (keys=values)."""
    out, _ = multihead_attention(
        queries, f_image,
        params["cross_wq"], params["cross_wk"], params["cross_wv"], params["cross_wo"],
    )
    return out


def self_attention(q_img: np.ndarray, f_text: np.ndarray, params: Params) -> np.ndarray:
    """Joint features: stacked [queries ; text] rows self-attend."""
    joint_in = np.vstack([q_img, f_text])
    out, _ = multihead_attention(
        joint_in, joint_in,
        params["self_wq"], params["self_wk"], params["self_wv"], params["self_wo"],
    )
    return out


def feed_forward(f_joint: np.ndarray, params: Params, cfg: ModelConfig) -> np.ndarray:
    """Rowwise two-layer MLP over the joint features."""
    out, _ = mlp2(
        f_joint, params["ffn_w1"], params["ffn_b1"], params["ffn_w2"], params["ffn_b2"],
        cfg.activation,
    )
    return out


def project_embeddings(q_sem: np.ndarray, params: Params, cfg: ModelConfig):
    """Mask embeddings (three-layer MLP) and class embeddings (one linear)."""
    e_mask, _ = mlp3(
        q_sem,
        params["maskproj_w1"], params["maskproj_b1"],
        params["maskproj_w2"], params["maskproj_b2"],
        params["maskproj_w3"], params["maskproj_b3"],
        cfg.activation,
    )
    e_cls = linear(q_sem, params["clsproj_w"], params["clsproj_b"])
    return e_mask, e_cls


def decode_candidate_masks(e_mask: np.ndarray, pixel_map: np.ndarray) -> np.ndarray:
    """Candidate logit grids: per-query dot products with pixel features."""
    if e_mask.shape[1] != pixel_map.shape[2]:
        raise ShapeMismatch(f"embeddings {e_mask.shape} vs pixel map {pixel_map.shape}")
    return np.einsum("nd,yxd->nyx", e_mask, pixel_map)


def cosine_similarities(e_cls: np.ndarray, global_text: np.ndarray) -> np.ndarray:
    e_norms = np.linalg.norm(e_cls, axis=1)
    t_norm = np.linalg.norm(global_text)
    if t_norm == 0.0 or np.any(e_norms == 0.0):
        raise ZeroVector("cosine similarity undefined for zero vectors")
    return (e_cls @ global_text) / (e_norms * t_norm)


def select_mask(e_cls: np.ndarray, global_text: np.ndarray) -> int:
    """Index of the class embedding most cosine-similar to the global text
    embedding; ties break to the lowest index."""
    return int(np.argmax(cosine_similarities(e_cls, global_text)))


class ForwardResult(NamedTuple):
    probabilities: np.ndarray  # (H, W) sigmoid of the selected upsampled logits
    candidates: np.ndarray  # (n, gh, gw) candidate mask logit grids
    selected: int
    cosines: np.ndarray  # (n,) similarity of each class embedding to the prompt


def forward_tape(image: np.ndarray, token_ids: list[int], params: Params, cfg: ModelConfig) -> dict:
    """Run the full forward pass, keeping every intermediate for backward."""
    patches = image_to_patches(image, cfg.patch)
    f_image = linear(patches, params["img_w"], params["img_b"])
    gh, gw = image.shape[0] // cfg.patch, image.shape[1] // cfg.patch
    pixel_map = f_image.reshape(gh, gw, cfg.d)

    ids = np.asarray(token_ids, dtype=int)
    f_text = encode_text(token_ids, params, cfg)

    q_img, cross_cache = multihead_attention(
        params["queries"], f_image,
        params["cross_wq"], params["cross_wk"], params["cross_wv"], params["cross_wo"],
    )
    joint_in = np.vstack([q_img, f_text])
    f_joint, self_cache = multihead_attention(
        joint_in, joint_in,
        params["self_wq"], params["self_wk"], params["self_wv"], params["self_wo"],
    )
    f_joint_ffn, ffn_cache = mlp2(
        f_joint, params["ffn_w1"], params["ffn_b1"], params["ffn_w2"], params["ffn_b2"],
        cfg.activation,
    )
    q_sem = f_joint_ffn[: cfg.n_queries]

    e_mask, mask_cache = mlp3(
        q_sem,
        params["maskproj_w1"], params["maskproj_b1"],
        params["maskproj_w2"], params["maskproj_b2"],
        params["maskproj_w3"], params["maskproj_b3"],
        cfg.activation,
    )
    e_cls = linear(q_sem, params["clsproj_w"], params["clsproj_b"])

    candidates = np.einsum("nd,yxd->nyx", e_mask, pixel_map)
    global_text = f_text[-1]
    cosines = cosine_similarities(e_cls, global_text)
    selected = int(np.argmax(cosines))
    up_logits = upsample_bilinear(candidates[selected], image.shape[:2])

    return {
        "patches": patches, "f_image": f_image, "pixel_map": pixel_map,
        "ids": ids, "f_text": f_text, "global_text": global_text,
        "cross_cache": cross_cache, "self_cache": self_cache,
        "ffn_cache": ffn_cache, "mask_cache": mask_cache,
        "q_sem": q_sem, "e_mask": e_mask, "e_cls": e_cls,
        "candidates": candidates, "cosines": cosines, "selected": selected,
        "up_logits": up_logits, "image_hw": image.shape[:2],
    }


def forward(image: np.ndarray, token_ids: list[int], params: Params, cfg: ModelConfig) -> ForwardResult:
    tape = forward_tape(image, token_ids, params, cfg)
    return ForwardResult(
        probabilities=_sigmoid(tape["up_logits"]),
        candidates=tape["candidates"],
        selected=tape["selected"],
        cosines=tape["cosines"],
    )


def segmentation_loss(gt_mask: np.ndarray, logits: np.ndarray, cfg: ModelConfig) -> float:
    """lambda_bce * mean BCE + lambda_dice * smoothed overlap loss on logits."""
    loss, _ = _segmentation_loss_grad(gt_mask, logits, cfg)
    return loss


def _segmentation_loss_grad(gt_mask: np.ndarray, logits: np.ndarray, cfg: ModelConfig):
    y = np.asarray(gt_mask, dtype=float)
    if y.shape != logits.shape:
        raise DimensionMismatch(f"mask {y.shape} vs logits {logits.shape}")
    n_px = y.size
    p = _sigmoid(logits)
    # elementwise BCE in stable form: softplus(z) - z*y
    bce = float(np.mean(np.logaddexp(0.0, logits) - logits * y))
    num = 2.0 * float((y * p).sum()) + cfg.eps
    den = float(y.sum() + p.sum()) + cfg.eps
    dice_loss = 1.0 - num / den
    loss = cfg.lambda_bce * bce + cfg.lambda_dice * dice_loss

    d_logits = cfg.lambda_bce * (p - y) / n_px
    d_p = (num - 2.0 * y * den) / (den * den)  # d(dice_loss)/dp
    d_logits += cfg.lambda_dice * d_p * p * (1.0 - p)
    return loss, d_logits


class LossBreakdown(NamedTuple):
    total: float
    segmentation: float
    alignment: float
    selected: int


def loss_and_grads(
    image: np.ndarray,
    token_ids: list[int],
    gt_mask: np.ndarray,
    params: Params,
    cfg: ModelConfig,
    tape: dict | None = None,
) -> tuple[LossBreakdown, Params]:
    """Training loss and gradients for every parameter tensor.

    The segmentation loss is applied to the candidate selected by the cosine
    match (treated as a fixed index), plus align_weight * (1 - cos) pulling
    the selected class embedding toward the prompt's global text embedding.
    """
    if tape is None:
        tape = forward_tape(image, token_ids, params, cfg)
    cfg_n = cfg.n_queries
    j = tape["selected"]
    gh, gw, _ = tape["pixel_map"].shape

    seg_loss, d_up = _segmentation_loss_grad(gt_mask, tape["up_logits"], cfg)

    e = tape["e_cls"][j]
    t = tape["global_text"]
    e_norm = np.linalg.norm(e)
    t_norm = np.linalg.norm(t)
    cos_j = float(e @ t / (e_norm * t_norm))
    align_loss = cfg.align_weight * (1.0 - cos_j)
    total = seg_loss + align_loss

    grads: Params = {}

    # selected candidate grid <- upsampled logits
    d_grid = upsample_bilinear_backward(d_up, (gh, gw))
    d_candidates = np.zeros_like(tape["candidates"])
    d_candidates[j] = d_grid

    d_e_mask = np.einsum("nyx,yxd->nd", d_candidates, tape["pixel_map"])
    d_pixel_map = np.einsum("nyx,nd->yxd", d_candidates, tape["e_mask"])

    # cosine alignment: gradients to e_cls[j] and the global text embedding
    d_cos = -cfg.align_weight
    d_e = d_cos * (t / (e_norm * t_norm) - cos_j * e / (e_norm * e_norm))
    d_t = d_cos * (e / (e_norm * t_norm) - cos_j * t / (t_norm * t_norm))
    d_e_cls = np.zeros_like(tape["e_cls"])
    d_e_cls[j] = d_e

    # projection heads back to the semantic queries
    d_q_sem_m, dm_w1, dm_b1, dm_w2, dm_b2, dm_w3, dm_b3 = mlp3_backward(
        d_e_mask, tape["mask_cache"]
    )
    grads["maskproj_w1"], grads["maskproj_b1"] = dm_w1, dm_b1
    grads["maskproj_w2"], grads["maskproj_b2"] = dm_w2, dm_b2
    grads["maskproj_w3"], grads["maskproj_b3"] = dm_w3, dm_b3
    d_q_sem_c, grads["clsproj_w"], grads["clsproj_b"] = linear_backward(
        d_e_cls, tape["q_sem"], params["clsproj_w"]
    )
    d_q_sem = d_q_sem_m + d_q_sem_c

    # feed-forward block (gradient only reaches the first n rows)
    d_f_joint_ffn = np.zeros_like(tape["ffn_cache"]["x"])  # (n+L, d)
    d_f_joint_ffn[:cfg_n] = d_q_sem
    d_f_joint, grads["ffn_w1"], grads["ffn_b1"], grads["ffn_w2"], grads["ffn_b2"] = mlp2_backward(
        d_f_joint_ffn, tape["ffn_cache"]
    )

    # joint self-attention (query and key/value are the same rows)
    d_zq, d_zkv, grads["self_wq"], grads["self_wk"], grads["self_wv"], grads["self_wo"] = (
        multihead_attention_backward(d_f_joint, tape["self_cache"])
    )
    d_joint_in = d_zq + d_zkv
    d_q_img = d_joint_in[:cfg_n]
    d_f_text = d_joint_in[cfg_n:].copy()
    d_f_text[-1] += d_t

    # cross-attention back to the learnable queries and image tokens
    d_queries, d_f_image, grads["cross_wq"], grads["cross_wk"], grads["cross_wv"], grads["cross_wo"] = (
        multihead_attention_backward(d_q_img, tape["cross_cache"])
    )
    grads["queries"] = d_queries
    d_f_image = d_f_image + d_pixel_map.reshape(-1, cfg.d)

    grads["img_w"] = tape["patches"].T @ d_f_image
    grads["img_b"] = d_f_image.sum(axis=0)

    d_tok = np.zeros_like(params["tok_emb"])
    np.add.at(d_tok, tape["ids"], d_f_text)
    grads["tok_emb"] = d_tok
    d_pos = np.zeros_like(params["pos_emb"])
    d_pos[: len(tape["ids"])] = d_f_text
    grads["pos_emb"] = d_pos

    return LossBreakdown(total, seg_loss, align_loss, j), grads


def save_checkpoint(path, params: Params, cfg: ModelConfig, vocab: Vocabulary) -> None:
    """Self-describing checkpoint: parameter arrays, config JSON, vocabulary."""
    payload = {f"param_{k}": v for k, v in params.items()}
    payload["config_json"] = np.array(json.dumps(cfg.to_dict()))
    payload["vocab"] = np.array(vocab.tokens)
    payload["format_version"] = np.array(CHECKPOINT_VERSION)
    np.savez(path, **payload)


def load_checkpoint(path) -> tuple[Params, ModelConfig, Vocabulary]:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        cfg = ModelConfig.from_dict(json.loads(str(data["config_json"])))
        vocab = Vocabulary(list(data["vocab"]))
        params = {
            k[len("param_"):]: data[k] for k in data.files if k.startswith("param_")
        }
    return params, cfg, vocab


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
