"""Projection heads and the per-pixel alignment loss.

The decoded pixel sequence is upsampled 4x (to the stride-4 grid), mapped
into a joint space shared with the projected sentence vector, and scored by
dot product. Training pulls the sentence embedding toward referent-pixel
embeddings and away from the rest; inference thresholds the sigmoid scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .neck import unflatten_seq, flatten_map

THRESHOLD = 0.35


@dataclass
class Projection:
    pixels: Tensor    # [N', D] embeddings on the stride-4 grid
    text: Tensor      # [D]
    grid: tuple       # (H/4, W/4)


class Projector:
    def __init__(self, store, width, text_width, joint_dim):
        self.w_v = store.uniform("proj.w_v", (width, joint_dim), width)
        self.b_v = store.zeros("proj.b_v", (joint_dim,))
        self.w_t = store.uniform("proj.w_t", (text_width, joint_dim), text_width)
        self.b_t = store.zeros("proj.b_t", (joint_dim,))

    def __call__(self, decoded, grid_hw, global_text) -> Projection:
        h, w = grid_hw
        up = ag.upsample4(unflatten_seq(decoded, h, w))
        pixels = ag.linear(flatten_map(up), self.w_v.tensor, self.b_v.tensor)
        text = ag.linear(global_text, self.w_t.tensor, self.b_t.tensor)
        return Projection(pixels=pixels, text=text, grid=(4 * h, 4 * w))


class BaselineHead:
    """Per-pixel linear scorer used when contrastive training is ablated;
    identical upsampling and masking path."""

    def __init__(self, store, width):
        self.w = store.uniform("baseline.w", (width, 1), width)
        self.b = store.zeros("baseline.b", (1,))

    def __call__(self, seq, grid_hw):
        h, w = grid_hw
        up = ag.upsample4(unflatten_seq(seq, h, w))
        logits = ag.linear(flatten_map(up), self.w.tensor, self.b.tensor)
        return ag.reshape(logits, (4 * h * 4 * w,)), (4 * h, 4 * w)


def alignment_logits(proj: Projection):
    """Per-pixel dot products with the projected sentence vector, [N']."""
    d = proj.text.data.shape[0]
    return ag.reshape(ag.matmul(proj.pixels, ag.reshape(proj.text, (d, 1))),
                      (proj.pixels.data.shape[0],))


def score_map(proj: Projection):
    """Sigmoid scores on the stride-4 grid."""
    with ag.no_grad():
        s = ag.sigmoid(alignment_logits(proj))
    return s.data.reshape(proj.grid)


def downsample_mask(mask, factor=4):
    """Nearest-neighbor reduction of a full-res binary mask, sampling each
    block at its center pixel."""
    h, w = mask.shape
    if h % factor or w % factor:
        raise ValueError(f"mask {h}x{w} not divisible by {factor}")
    off = factor // 2
    return mask[off::factor, off::factor]


def contrastive_loss(logits, gt_small):
    """Mean over the stride-4 grid of -log s on referent pixels and
    -log(1-s) elsewhere, in stable log-sigmoid form."""
    target = np.asarray(gt_small, dtype=np.float64).reshape(-1)
    if target.size != logits.data.shape[0]:
        raise ValueError(f"gt size {target.size} != logits {logits.data.shape[0]}")
    return ag.bce_with_logits(logits, target)


def predict_mask(scores, out_h, out_w, threshold=THRESHOLD):
    """Bilinear-upsample a score grid and binarize strictly above threshold."""
    with ag.no_grad():
        up = ag.bilinear_resize(Tensor(scores[None, :, :]), out_h, out_w)
    return up.data[0] > threshold
