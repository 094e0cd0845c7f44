"""Layer-by-layer tracers for the built-in ImageNet classifiers.

Each tracer walks the published architecture, tracking spatial size, and emits
one ``LayerSpec`` per parameterized layer (convolution or fully connected).
Parameter counts include biases, or the affine scale/shift of a following
batch-norm. FLOPs count multiply-accumulates of conv/fc layers only:
forward = 2 * MACs, backward = 2 * forward, so ``flops_per_sample = 6 * MACs``.

The JSON descriptors under ``networks/`` are frozen output of this module
(``python -m dpflow.costmodel.architectures``); tests check the two agree.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

from .model import LayerSpec, NetworkSpec

FLOPS_PER_MAC = 6  # 2 forward + 4 backward

# per-network strong-scaling batch sizes used in the experiments
DEFAULT_BATCH = {"alexnet": 256, "googlenet": 256, "inceptionv3": 128, "resnet50": 64}


def _out(size: int, k: int, stride: int, pad: int, ceil_mode: bool = False) -> int:
    span = size + 2 * pad - k
    steps = math.ceil(span / stride) if ceil_mode else span // stride
    return steps + 1


class _Tracer:
    def __init__(self, channels: int, size: int):
        self.c = channels
        self.h = self.w = size
        self.layers: list[LayerSpec] = []

    def conv(self, name, cout, k, stride=1, pad=0, groups=1, bn=False, src=None):
        """Append a conv layer. ``src`` = (c, h, w) to branch from; returns (c, h, w)."""
        c, h, w = src if src is not None else (self.c, self.h, self.w)
        kh, kw = (k, k) if isinstance(k, int) else k
        ph, pw = (pad, pad) if isinstance(pad, int) else pad
        oh = _out(h, kh, stride, ph)
        ow = _out(w, kw, stride, pw)
        weights = cout * (c // groups) * kh * kw
        macs = oh * ow * weights
        extra = 2 * cout if bn else cout
        self.layers.append(LayerSpec(name, FLOPS_PER_MAC * macs, weights + extra))
        if src is None:
            self.c, self.h, self.w = cout, oh, ow
        return cout, oh, ow

    def pool(self, k, stride, pad=0, ceil_mode=False):
        self.h = _out(self.h, k, stride, pad, ceil_mode)
        self.w = _out(self.w, k, stride, pad, ceil_mode)

    def fc(self, name, nout, nin=None):
        nin = nin if nin is not None else self.c * self.h * self.w
        self.layers.append(LayerSpec(name, FLOPS_PER_MAC * nin * nout, nin * nout + nout))
        self.c, self.h, self.w = nout, 1, 1

    @property
    def state(self):
        return self.c, self.h, self.w


def alexnet() -> NetworkSpec:
    # two-tower grouping of the original network; 227x227 crops
    t = _Tracer(3, 227)
    t.conv("conv1", 96, 11, stride=4)
    t.pool(3, 2)
    t.conv("conv2", 256, 5, pad=2, groups=2)
    t.pool(3, 2)
    t.conv("conv3", 384, 3, pad=1)
    t.conv("conv4", 384, 3, pad=1, groups=2)
    t.conv("conv5", 256, 3, pad=1, groups=2)
    t.pool(3, 2)
    t.fc("fc6", 4096)
    t.fc("fc7", 4096)
    t.fc("fc8", 1000)
    return NetworkSpec("alexnet", t.layers, DEFAULT_BATCH["alexnet"])


_GOOGLENET_MODULES = [
    # name, 1x1, 3x3 reduce, 3x3, 5x5 reduce, 5x5, pool proj
    ("3a", 64, 96, 128, 16, 32, 32),
    ("3b", 128, 128, 192, 32, 96, 64),
    ("pool", ),
    ("4a", 192, 96, 208, 16, 48, 64),
    ("4b", 160, 112, 224, 24, 64, 64),
    ("4c", 128, 128, 256, 24, 64, 64),
    ("4d", 112, 144, 288, 32, 64, 64),
    ("4e", 256, 160, 320, 32, 128, 128),
    ("pool", ),
    ("5a", 256, 160, 320, 32, 128, 128),
    ("5b", 384, 192, 384, 48, 128, 128),
]


def googlenet() -> NetworkSpec:
    # main tower only; auxiliary classifiers omitted
    t = _Tracer(3, 224)
    t.conv("conv1/7x7_s2", 64, 7, stride=2, pad=3)
    t.pool(3, 2, ceil_mode=True)
    t.conv("conv2/3x3_reduce", 64, 1)
    t.conv("conv2/3x3", 192, 3, pad=1)
    t.pool(3, 2, ceil_mode=True)
    for row in _GOOGLENET_MODULES:
        if row[0] == "pool":
            t.pool(3, 2, ceil_mode=True)
            continue
        name, n1, r3, n3, r5, n5, pp = row
        x = t.state
        p = f"inception_{name}"
        t.conv(f"{p}/1x1", n1, 1, src=x)
        c = t.conv(f"{p}/3x3_reduce", r3, 1, src=x)
        t.conv(f"{p}/3x3", n3, 3, pad=1, src=c)
        c = t.conv(f"{p}/5x5_reduce", r5, 1, src=x)
        t.conv(f"{p}/5x5", n5, 5, pad=2, src=c)
        t.conv(f"{p}/pool_proj", pp, 1, src=x)
        t.c = n1 + n3 + n5 + pp
    t.h = t.w = 1  # 7x7 average pool
    t.fc("loss3/classifier", 1000)
    return NetworkSpec("googlenet", t.layers, DEFAULT_BATCH["googlenet"])


def inceptionv3(size: int = 224) -> NetworkSpec:
    # batch-normalized convs without bias; auxiliary head omitted
    t = _Tracer(3, size)

    def bconv(name, cout, k, stride=1, pad=0, src=None):
        return t.conv(name, cout, k, stride=stride, pad=pad, bn=True, src=src)

    bconv("Conv2d_1a_3x3", 32, 3, stride=2)
    bconv("Conv2d_2a_3x3", 32, 3)
    bconv("Conv2d_2b_3x3", 64, 3, pad=1)
    t.pool(3, 2)
    bconv("Conv2d_3b_1x1", 80, 1)
    bconv("Conv2d_4a_3x3", 192, 3)
    t.pool(3, 2)

    def block_a(name, pool_features):
        x = t.state
        bconv(f"{name}/b1x1", 64, 1, src=x)
        c = bconv(f"{name}/b5x5_1", 48, 1, src=x)
        bconv(f"{name}/b5x5_2", 64, 5, pad=2, src=c)
        c = bconv(f"{name}/b3x3dbl_1", 64, 1, src=x)
        c = bconv(f"{name}/b3x3dbl_2", 96, 3, pad=1, src=c)
        bconv(f"{name}/b3x3dbl_3", 96, 3, pad=1, src=c)
        bconv(f"{name}/bpool", pool_features, 1, src=x)
        t.c = 64 + 64 + 96 + pool_features

    def block_b(name):
        x = t.state
        _, h, w = bconv(f"{name}/b3x3", 384, 3, stride=2, src=x)
        c = bconv(f"{name}/b3x3dbl_1", 64, 1, src=x)
        c = bconv(f"{name}/b3x3dbl_2", 96, 3, pad=1, src=c)
        bconv(f"{name}/b3x3dbl_3", 96, 3, stride=2, src=c)
        t.c, t.h, t.w = 384 + 96 + x[0], h, w

    def block_c(name, c7):
        x = t.state
        bconv(f"{name}/b1x1", 192, 1, src=x)
        c = bconv(f"{name}/b7x7_1", c7, 1, src=x)
        c = bconv(f"{name}/b7x7_2", c7, (1, 7), pad=(0, 3), src=c)
        bconv(f"{name}/b7x7_3", 192, (7, 1), pad=(3, 0), src=c)
        c = bconv(f"{name}/b7x7dbl_1", c7, 1, src=x)
        c = bconv(f"{name}/b7x7dbl_2", c7, (7, 1), pad=(3, 0), src=c)
        c = bconv(f"{name}/b7x7dbl_3", c7, (1, 7), pad=(0, 3), src=c)
        c = bconv(f"{name}/b7x7dbl_4", c7, (7, 1), pad=(3, 0), src=c)
        bconv(f"{name}/b7x7dbl_5", 192, (1, 7), pad=(0, 3), src=c)
        bconv(f"{name}/bpool", 192, 1, src=x)
        t.c = 768

    def block_d(name):
        x = t.state
        c = bconv(f"{name}/b3x3_1", 192, 1, src=x)
        _, h, w = bconv(f"{name}/b3x3_2", 320, 3, stride=2, src=c)
        c = bconv(f"{name}/b7x7x3_1", 192, 1, src=x)
        c = bconv(f"{name}/b7x7x3_2", 192, (1, 7), pad=(0, 3), src=c)
        c = bconv(f"{name}/b7x7x3_3", 192, (7, 1), pad=(3, 0), src=c)
        bconv(f"{name}/b7x7x3_4", 192, 3, stride=2, src=c)
        t.c, t.h, t.w = 320 + 192 + x[0], h, w

    def block_e(name):
        x = t.state
        bconv(f"{name}/b1x1", 320, 1, src=x)
        c = bconv(f"{name}/b3x3_1", 384, 1, src=x)
        bconv(f"{name}/b3x3_2a", 384, (1, 3), pad=(0, 1), src=c)
        bconv(f"{name}/b3x3_2b", 384, (3, 1), pad=(1, 0), src=c)
        c = bconv(f"{name}/b3x3dbl_1", 448, 1, src=x)
        c = bconv(f"{name}/b3x3dbl_2", 384, 3, pad=1, src=c)
        bconv(f"{name}/b3x3dbl_3a", 384, (1, 3), pad=(0, 1), src=c)
        bconv(f"{name}/b3x3dbl_3b", 384, (3, 1), pad=(1, 0), src=c)
        bconv(f"{name}/bpool", 192, 1, src=x)
        t.c = 320 + 768 + 768 + 192

    block_a("Mixed_5b", 32)
    block_a("Mixed_5c", 64)
    block_a("Mixed_5d", 64)
    block_b("Mixed_6a")
    for name, c7 in (("Mixed_6b", 128), ("Mixed_6c", 160), ("Mixed_6d", 160), ("Mixed_6e", 192)):
        block_c(name, c7)
    block_d("Mixed_7a")
    block_e("Mixed_7b")
    block_e("Mixed_7c")
    t.h = t.w = 1  # global average pool
    t.fc("fc", 1000)
    return NetworkSpec("inceptionv3", t.layers, DEFAULT_BATCH["inceptionv3"])


def resnet50() -> NetworkSpec:
    # v1.5 layout: stride on the 3x3 conv of each downsampling bottleneck
    t = _Tracer(3, 224)
    t.conv("conv1", 64, 7, stride=2, pad=3, bn=True)
    t.pool(3, 2, pad=1)
    for stage, (width, blocks, stride) in enumerate(
        [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)], start=1
    ):
        for b in range(blocks):
            s = stride if b == 0 else 1
            x = t.state
            p = f"layer{stage}.{b}"
            c = t.conv(f"{p}.conv1", width, 1, bn=True, src=x)
            c = t.conv(f"{p}.conv2", width, 3, stride=s, pad=1, bn=True, src=c)
            out = t.conv(f"{p}.conv3", 4 * width, 1, bn=True, src=c)
            if b == 0:
                t.conv(f"{p}.downsample", 4 * width, 1, stride=s, bn=True, src=x)
            t.c, t.h, t.w = out
    t.h = t.w = 1
    t.fc("fc", 1000)
    return NetworkSpec("resnet50", t.layers, DEFAULT_BATCH["resnet50"])


BUILDERS = {
    "alexnet": alexnet,
    "googlenet": googlenet,
    "inceptionv3": inceptionv3,
    "resnet50": resnet50,
}


def write_descriptors(directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, build in BUILDERS.items():
        spec = build()
        (directory / f"{name}.json").write_text(json.dumps(spec.to_dict(), indent=1) + "\n")


if __name__ == "__main__":
    write_descriptors(Path(__file__).parent / "networks")
