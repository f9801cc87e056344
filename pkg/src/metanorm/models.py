"""Small trainable architectures plus an architecture-level parameter
accountant for increment-ratio reporting.

Models are built from ``LayerSpec`` plans with shape inference at build time;
ResNet variants exist only as ``ArchTable`` entries for counting, never
instantiated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .errors import ShapeError
from .ilm import count_ilm_params, ilm_forward, init_ilm_params
from .norms import AffineParams, PartitionScheme, RunningStats, norm_layer_forward


@dataclass
class NormOptions:
    """Which normalizer a norm site uses and how ILM wraps it."""

    kind: str = "gn"  # bn | ln | in | gn | ilm+ln | ilm+in | ilm+gn
    groups: int = 32
    key_group_size: int = 16
    embed_dim_rule: str = "n_over_16_min_1"
    act_mu: str = "tanh"
    act_gamma: str = "sigmoid"
    epsilon: float = 1e-5

    VALID = ("bn", "ln", "in", "gn", "ilm+ln", "ilm+in", "ilm+gn")

    def __post_init__(self):
        if self.kind not in self.VALID:
            raise ValueError(f"unknown norm kind {self.kind!r}")

    @property
    def ilm(self) -> bool:
        return self.kind.startswith("ilm+")

    @property
    def base_kind(self) -> str:
        return self.kind.split("+")[-1]

    def scheme(self, channels: int) -> PartitionScheme:
        base = self.base_kind
        if base == "bn":
            return PartitionScheme.batch()
        if base == "ln":
            return PartitionScheme.layer()
        if base == "in":
            return PartitionScheme.instance()
        # clamp so the group count always divides the channel width at
        # desk-scale channel plans (16/32/64)
        return PartitionScheme.group(math.gcd(self.groups, channels))


@dataclass
class LayerSpec:
    kind: str  # conv2d | fully_connected | relu | avg_pool | max_pool | norm | residual_block | global_avg_pool | flatten
    options: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# layers


def _he_conv(rng, out_c, in_c, k, dtype):
    fan_in = in_c * k * k
    w = rng.standard_normal((out_c, in_c, k, k)) * math.sqrt(2.0 / fan_in)
    return Variable(w.astype(dtype), requires_grad=True)


class Conv2d:
    def __init__(self, in_c, out_c, kernel, stride, padding, rng, dtype):
        self.stride = stride
        self.padding = padding
        self.weight = _he_conv(rng, out_c, in_c, kernel, dtype)

    def forward(self, x, mode):
        return ad.conv2d(x, self.weight, stride=self.stride, padding=self.padding)

    def params(self):
        return {"weight": self.weight}


class Linear:
    def __init__(self, in_f, out_f, rng, dtype):
        w = rng.standard_normal((in_f, out_f)) * math.sqrt(2.0 / in_f)
        self.weight = Variable(w.astype(dtype), requires_grad=True)
        self.bias = Variable(np.zeros(out_f, dtype=dtype), requires_grad=True)

    def forward(self, x, mode):
        return ad.matmul(x, self.weight) + self.bias

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


class ReLU:
    def forward(self, x, mode):
        return ad.relu(x)

    def params(self):
        return {}


class AvgPool:
    def __init__(self, kernel):
        self.kernel = kernel

    def forward(self, x, mode):
        return ad.avg_pool2d(x, self.kernel)

    def params(self):
        return {}


class MaxPool:
    def __init__(self, kernel):
        self.kernel = kernel

    def forward(self, x, mode):
        return ad.max_pool2d(x, self.kernel)

    def params(self):
        return {}


class GlobalAvgPool:
    def forward(self, x, mode):
        return ad.avg_pool2d(x, x.shape[2])

    def params(self):
        return {}


class Flatten:
    def forward(self, x, mode):
        b = x.shape[0]
        return ad.reshape(x, (b, int(np.prod(x.shape[1:]))))

    def params(self):
        return {}


class NormLayer:
    """One normalization site, plain or ILM-wrapped."""

    def __init__(self, channels, opts: NormOptions, rng, dtype):
        self.channels = channels
        self.opts = opts
        self.scheme = opts.scheme(channels)
        kgs = opts.key_group_size if channels % opts.key_group_size == 0 else channels
        self.key_group_size = kgs
        if opts.ilm:
            self.ilm_params = init_ilm_params(
                channels, kgs, rng, embed_dim_rule=opts.embed_dim_rule,
                act_mu=opts.act_mu, act_gamma=opts.act_gamma, dtype=dtype,
            )
            self.affine = None
            self.running = None
        else:
            self.ilm_params = None
            self.affine = AffineParams.init(channels, dtype=dtype)
            self.running = RunningStats() if self.scheme.kind == "batch" else None

    def forward(self, x, mode):
        if self.ilm_params is not None:
            return ilm_forward(x, self.scheme, self.ilm_params, self.key_group_size,
                               epsilon=self.opts.epsilon)
        return norm_layer_forward(x, self.scheme, self.affine, mode=mode,
                                  running=self.running, epsilon=self.opts.epsilon)

    def params(self):
        if self.ilm_params is not None:
            return dict(self.ilm_params.variables)
        return {"omega": self.affine.omega, "beta": self.affine.beta}


class ResidualBlock:
    """conv-norm-relu-conv-norm plus a (projected) shortcut, then relu."""

    def __init__(self, in_c, out_c, opts: NormOptions, rng, dtype):
        self.conv1 = Conv2d(in_c, out_c, 3, 1, 1, rng, dtype)
        self.norm1 = NormLayer(out_c, opts, rng, dtype)
        self.conv2 = Conv2d(out_c, out_c, 3, 1, 1, rng, dtype)
        self.norm2 = NormLayer(out_c, opts, rng, dtype)
        if in_c != out_c:
            self.proj = Conv2d(in_c, out_c, 1, 1, 0, rng, dtype)
            self.proj_norm = NormLayer(out_c, opts, rng, dtype)
        else:
            self.proj = None
            self.proj_norm = None

    def forward(self, x, mode):
        h = ad.relu(self.norm1.forward(self.conv1.forward(x, mode), mode))
        h = self.norm2.forward(self.conv2.forward(h, mode), mode)
        shortcut = x
        if self.proj is not None:
            shortcut = self.proj_norm.forward(self.proj.forward(x, mode), mode)
        return ad.relu(h + shortcut)

    def params(self):
        out = {}
        for name, sub in [("conv1", self.conv1), ("norm1", self.norm1),
                          ("conv2", self.conv2), ("norm2", self.norm2),
                          ("proj", self.proj), ("proj_norm", self.proj_norm)]:
            if sub is None:
                continue
            for k, v in sub.params().items():
                out[f"{name}.{k}"] = v
        return out


# ---------------------------------------------------------------------------
# model


class Model:
    def __init__(self, layers: list, name: str = "model"):
        self.layers = layers  # list of (name, layer)
        self.name = name

    def forward(self, x, mode: str = "train"):
        if not isinstance(x, Variable):
            x = Variable(np.asarray(x))
        for _, layer in self.layers:
            x = layer.forward(x, mode)
        return x

    def parameters(self) -> dict:
        out = {}
        for lname, layer in self.layers:
            for pname, var in layer.params().items():
                out[f"{lname}.{pname}"] = var
        return out

    def zero_grads(self):
        for v in self.parameters().values():
            v.zero_grad()

    def norm_sites(self) -> list:
        """(site name, channel width) for every normalization site, in order."""
        sites = []
        for lname, layer in self.layers:
            if isinstance(layer, NormLayer):
                sites.append((lname, layer.channels))
            elif isinstance(layer, ResidualBlock):
                sites.append((f"{lname}.norm1", layer.norm1.channels))
                sites.append((f"{lname}.norm2", layer.norm2.channels))
                if layer.proj_norm is not None:
                    sites.append((f"{lname}.proj_norm", layer.proj_norm.channels))
        return sites

    def arch_table(self) -> "ArchTable":
        sites = []
        for lname, layer in self.layers:
            sites.extend(_layer_sites(lname, layer))
        return ArchTable(name=self.name, sites=sites)


def _layer_sites(lname, layer):
    if isinstance(layer, Conv2d):
        return [(lname, "conv", layer.weight.shape)]
    if isinstance(layer, Linear):
        return [(lname, "fc", (layer.weight.shape[0], layer.weight.shape[1]))]
    if isinstance(layer, NormLayer):
        return [(lname, "norm", layer.channels)]
    if isinstance(layer, ResidualBlock):
        out = []
        for sub_name, sub in [("conv1", layer.conv1), ("norm1", layer.norm1),
                              ("conv2", layer.conv2), ("norm2", layer.norm2),
                              ("proj", layer.proj), ("proj_norm", layer.proj_norm)]:
            if sub is not None:
                out.extend(_layer_sites(f"{lname}.{sub_name}", sub))
        return out
    return []


def build_model(specs: list[LayerSpec], input_shape, opts: NormOptions, seed: int,
                dtype=np.float64, name: str = "model") -> Model:
    """Materialize a layer plan with shape inference; deterministic per seed."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    layers = []
    flat = None
    for i, spec in enumerate(specs):
        lname = f"{i:02d}_{spec.kind}"
        o = spec.options
        if spec.kind == "conv2d":
            layer = Conv2d(c, o["out_channels"], o.get("kernel", 3), o.get("stride", 1),
                           o.get("padding", 1), rng, dtype)
            h = (h + 2 * layer.padding - o.get("kernel", 3)) // layer.stride + 1
            w = (w + 2 * layer.padding - o.get("kernel", 3)) // layer.stride + 1
            c = o["out_channels"]
        elif spec.kind == "norm":
            layer = NormLayer(c, o.get("opts", opts), rng, dtype)
        elif spec.kind == "relu":
            layer = ReLU()
        elif spec.kind == "avg_pool":
            k = o["kernel"]
            if h % k or w % k:
                raise ShapeError(f"avg_pool {k} does not tile {h}x{w}")
            layer = AvgPool(k)
            h, w = h // k, w // k
        elif spec.kind == "max_pool":
            k = o["kernel"]
            if h % k or w % k:
                raise ShapeError(f"max_pool {k} does not tile {h}x{w}")
            layer = MaxPool(k)
            h, w = h // k, w // k
        elif spec.kind == "residual_block":
            layer = ResidualBlock(c, o["out_channels"], o.get("opts", opts), rng, dtype)
            c = o["out_channels"]
        elif spec.kind == "global_avg_pool":
            layer = GlobalAvgPool()
            h = w = 1
        elif spec.kind == "flatten":
            layer = Flatten()
            flat = c * h * w
        elif spec.kind == "fully_connected":
            if flat is None:
                raise ShapeError("fully_connected requires a preceding flatten")
            layer = Linear(flat, o["out_dim"], rng, dtype)
            flat = o["out_dim"]
        else:
            raise ValueError(f"unknown layer kind {spec.kind!r}")
        layers.append((lname, layer))
    return Model(layers, name=name)


def micro_cnn_plan() -> list[LayerSpec]:
    """Desk-scale residual micro-net for 3x32x32 inputs."""
    return [
        LayerSpec("conv2d", {"out_channels": 16, "kernel": 3, "stride": 1, "padding": 1}),
        LayerSpec("norm"),
        LayerSpec("relu"),
        LayerSpec("max_pool", {"kernel": 4}),
        LayerSpec("residual_block", {"out_channels": 32}),
        LayerSpec("max_pool", {"kernel": 2}),
        LayerSpec("residual_block", {"out_channels": 64}),
        LayerSpec("global_avg_pool"),
        LayerSpec("flatten"),
        LayerSpec("fully_connected", {"out_dim": 10}),
    ]


def build_micro_cnn(opts: NormOptions, seed: int = 0, classes: int = 10,
                    dtype=np.float64) -> Model:
    plan = micro_cnn_plan()
    plan[-1] = LayerSpec("fully_connected", {"out_dim": classes})
    return build_model(plan, (3, 32, 32), opts, seed, dtype=dtype, name="micro_cnn")


# ---------------------------------------------------------------------------
# architecture tables


@dataclass
class ArchTable:
    """Ordered parameter sites of a named architecture, for counting only.

    Sites are (name, kind, payload): conv payload is the weight shape,
    fc payload is (in, out) with bias, norm payload is the channel width.
    """

    name: str
    sites: list

    def norm_channels(self) -> list[int]:
        return [payload for _, kind, payload in self.sites if kind == "norm"]


_RESNET_CFGS = {
    "resnet18": ("basic", [2, 2, 2, 2]),
    "resnet34": ("basic", [3, 4, 6, 3]),
    "resnet50": ("bottleneck", [3, 4, 6, 3]),
    "resnet101": ("bottleneck", [3, 4, 23, 3]),
    "resnet152": ("bottleneck", [3, 8, 36, 3]),
}


def resnet_arch_table(name: str, classes: int = 1000) -> ArchTable:
    """Standard block plan including downsample-shortcut norm sites."""
    if name not in _RESNET_CFGS:
        raise ValueError(f"unknown architecture {name!r}")
    block, depths = _RESNET_CFGS[name]
    expansion = 1 if block == "basic" else 4
    sites = [("stem.conv", "conv", (64, 3, 7, 7)), ("stem.norm", "norm", 64)]
    in_c = 64
    for stage, (planes, depth) in enumerate(zip([64, 128, 256, 512], depths)):
        out_c = planes * expansion
        for b in range(depth):
            pre = f"stage{stage + 1}.block{b + 1}"
            if block == "basic":
                sites += [
                    (f"{pre}.conv1", "conv", (planes, in_c, 3, 3)),
                    (f"{pre}.norm1", "norm", planes),
                    (f"{pre}.conv2", "conv", (planes, planes, 3, 3)),
                    (f"{pre}.norm2", "norm", planes),
                ]
            else:
                sites += [
                    (f"{pre}.conv1", "conv", (planes, in_c, 1, 1)),
                    (f"{pre}.norm1", "norm", planes),
                    (f"{pre}.conv2", "conv", (planes, planes, 3, 3)),
                    (f"{pre}.norm2", "norm", planes),
                    (f"{pre}.conv3", "conv", (out_c, planes, 1, 1)),
                    (f"{pre}.norm3", "norm", out_c),
                ]
            if b == 0 and in_c != out_c:
                sites += [
                    (f"{pre}.downsample.conv", "conv", (out_c, in_c, 1, 1)),
                    (f"{pre}.downsample.norm", "norm", out_c),
                ]
            in_c = out_c
    sites.append(("fc", "fc", (512 * expansion, classes)))
    return ArchTable(name=name, sites=sites)


def count_parameters(model_or_arch, ilm: bool = False, key_group_size: int = 16,
                     embed_dim_rule: str = "n_over_16_min_1"):
    """(total, norm_extra, ratio) with ratio = extra / count-without-ILM.

    Counting an instantiated Model sums live parameter arrays; counting an
    ArchTable is pure arithmetic over the site list. The two paths agree
    exactly for the same architecture and options.
    """
    if isinstance(model_or_arch, Model):
        total = sum(int(v.value.size) for v in model_or_arch.parameters().values())
        extra = 0
        for lname, layer in model_or_arch.layers:
            norms = [layer] if isinstance(layer, NormLayer) else (
                [layer.norm1, layer.norm2] + ([layer.proj_norm] if layer.proj_norm else [])
                if isinstance(layer, ResidualBlock) else [])
            for nl in norms:
                if nl.ilm_params is not None:
                    extra += sum(int(nl.ilm_params.variables[k].value.size)
                                 for k in ("w1", "w2", "w3"))
        return total, extra, extra / (total - extra)
    arch = model_or_arch
    base = 0
    extra = 0
    for _, kind, payload in arch.sites:
        if kind == "conv":
            base += int(np.prod(payload))
        elif kind == "fc":
            fin, fout = payload
            base += fin * fout + fout
        elif kind == "norm":
            c = payload
            base += 2 * c  # affine parameters exist with or without ILM
            if ilm:
                kgs = key_group_size if c % key_group_size == 0 else c
                e, _ = count_ilm_params(c, kgs, embed_dim_rule)
                extra += e
    total = base + extra
    return total, extra, extra / base
