"""Cross-modal neck: gate the stride-32 features with the sentence vector,
fold in the finer pyramid levels on the stride-16 grid, and flatten to the
pixel-token sequence consumed by the decoder."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .image_encoder import FeaturePyramid


def flatten_map(x):
    """[C,h,w] -> row-major [h*w, C]."""
    c, h, w = x.data.shape
    return ag.reshape(ag.transpose(x, (1, 2, 0)), (h * w, c))


def unflatten_seq(x, h, w):
    """[h*w, C] -> [C,h,w]; inverse of flatten_map."""
    n, c = x.data.shape
    if n != h * w:
        raise ValueError(f"sequence length {n} != grid {h}x{w}")
    return ag.transpose(ag.reshape(x, (h, w, c)), (2, 0, 1))


_coord_cache = {}


def coord_feature(h, w):
    """Two channels of x/y positions, each linearly spaced over [-1, 1]."""
    key = (h, w)
    if key not in _coord_cache:
        ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
        xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
        out = np.empty((2, h, w))
        out[0] = np.broadcast_to(xs[None, :], (h, w))
        out[1] = np.broadcast_to(ys[:, None], (h, w))
        _coord_cache[key] = out
    return _coord_cache[key]


class CrossModalNeck:
    def __init__(self, store, channels, text_width, width):
        if width % 2:
            raise ValueError(f"neck width {width} must be even")
        c2, c3, c4 = channels
        half = width // 2

        def conv1x1(name, c_in, c_out):
            k = store.uniform(f"neck.{name}.k", (c_out, c_in, 1, 1), c_in)
            b = store.zeros(f"neck.{name}.b", (c_out,))
            return k, b

        self.p_v4 = conv1x1("v4", c4, width)
        self.w_s = store.uniform("neck.s.w", (text_width, width), text_width)
        self.b_s = store.zeros("neck.s.b", (width,))
        self.p_m4 = conv1x1("m4", width, half)
        self.p_v3 = conv1x1("v3", c3, half)
        self.p_m3 = conv1x1("m3", width, half)
        self.p_v2 = conv1x1("v2", c2, half)
        self.p_agg = conv1x1("agg", 3 * width, width)
        self.k_fuse = store.uniform("neck.fuse.k", (width, width + 2, 3, 3), (width + 2) * 9)
        self.b_fuse = store.zeros("neck.fuse.b", (width,))

    def fuse_stage4(self, stride32, global_text):
        """Text-gated stage-4 features, upsampled to the stride-16 grid."""
        vis = ag.relu(ag.conv2d(stride32, self.p_v4[0].tensor, bias=self.p_v4[1].tensor))
        txt = ag.relu(ag.linear(global_text, self.w_s.tensor, self.b_s.tensor))
        gated = ag.mul(vis, ag.reshape(txt, (txt.data.shape[0], 1, 1)))
        return ag.upsample2(gated)

    def fuse_lower(self, m4, stride16, stride8):
        """Fold the stride-16 and (pooled) stride-8 levels in, at width C."""
        a = ag.relu(ag.conv2d(m4, self.p_m4[0].tensor, bias=self.p_m4[1].tensor))
        b = ag.relu(ag.conv2d(stride16, self.p_v3[0].tensor, bias=self.p_v3[1].tensor))
        m3 = ag.concat([a, b], axis=0)
        pooled = ag.avgpool2(stride8)
        c = ag.relu(ag.conv2d(m3, self.p_m3[0].tensor, bias=self.p_m3[1].tensor))
        d = ag.relu(ag.conv2d(pooled, self.p_v2[0].tensor, bias=self.p_v2[1].tensor))
        m2 = ag.concat([c, d], axis=0)
        return m3, m2

    def aggregate_and_flatten(self, m2, m3, m4):
        """1x1-aggregate the three fused maps, append coordinates, 3x3-fuse,
        and flatten row-major to the pixel-token sequence."""
        grids = {t.data.shape[1:] for t in (m2, m3, m4)}
        assert len(grids) == 1, f"fused maps disagree on grid: {grids}"
        agg = ag.conv2d(ag.concat([m2, m3, m4], axis=0),
                        self.p_agg[0].tensor, bias=self.p_agg[1].tensor)
        h, w = agg.data.shape[1:]
        coords = Tensor(coord_feature(h, w))
        fused = ag.conv2d(ag.concat([agg, coords], axis=0),
                          self.k_fuse.tensor, stride=1, padding=1, bias=self.b_fuse.tensor)
        return agg, flatten_map(fused)

    def __call__(self, pyr: FeaturePyramid, global_text):
        m4 = self.fuse_stage4(pyr.stride32, global_text)
        m3, m2 = self.fuse_lower(m4, pyr.stride16, pyr.stride8)
        _, seq = self.aggregate_and_flatten(m2, m3, m4)
        grid = m4.data.shape[1:]
        return seq, grid
