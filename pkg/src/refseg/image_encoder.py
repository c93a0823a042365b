"""Mini convolutional backbone emitting the stride-8/16/32 feature pyramid."""

from __future__ import annotations

from dataclasses import dataclass

from . import autograd as ag
from .autograd import Tensor
from .errors import DataError


@dataclass
class FeaturePyramid:
    stride8: Tensor    # [C2, H/8,  W/8]
    stride16: Tensor   # [C3, H/16, W/16]
    stride32: Tensor   # [C4, H/32, W/32]


class ImageEncoder:
    """Stem of two stride-2 convs, then three stages of stride-2 + stride-1
    convs (all 3x3 + ReLU), tapping each stage's output."""

    def __init__(self, store, channels=(16, 32, 64)):
        c2, c3, c4 = channels
        stem = max(c2 // 2, 4)
        self.convs = []

        def conv(name, c_in, c_out, stride):
            k = store.uniform(f"backbone.{name}.k", (c_out, c_in, 3, 3), c_in * 9)
            b = store.zeros(f"backbone.{name}.b", (c_out,))
            self.convs.append((name, k, b, stride))

        conv("stem1", 3, stem, 2)
        conv("stem2", stem, stem, 2)
        conv("stage2a", stem, c2, 2)
        conv("stage2b", c2, c2, 1)
        conv("stage3a", c2, c3, 2)
        conv("stage3b", c3, c3, 1)
        conv("stage4a", c3, c4, 2)
        conv("stage4b", c4, c4, 1)

    def __call__(self, img: Tensor) -> FeaturePyramid:
        c, h, w = img.data.shape
        if c != 3:
            raise DataError(f"expected 3 channels, got {c}")
        if h % 32 or w % 32:
            raise DataError(f"image {h}x{w} not divisible by 32")
        x = img
        taps = {}
        for name, k, b, stride in self.convs:
            x = ag.relu(ag.conv2d(x, k.tensor, stride=stride, padding=1, bias=b.tensor))
            if name.endswith("b"):
                taps[name] = x
        return FeaturePyramid(stride8=taps["stage2b"], stride16=taps["stage3b"],
                              stride32=taps["stage4b"])
