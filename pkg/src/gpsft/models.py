"""Model zoo: MLP, small CNN, and a tiny transformer encoder.

Parameters live in an ordered name -> Tensor dict. Names follow
"<block>.<local>.<kind>" with kind one of weight/bias/gamma/beta; the
first dot-separated component is the block label used for grouping.
Each parameter carries a flags byte: bit 0 marks the classifier head,
bit 1 marks tensors that importance selection never picks (biases,
norm affines, and the head bias). Selectable means flags == 0.

A "neuron" is one output unit of a weight tensor: a column of a 2-d
linear weight, or one output channel of a conv kernel.
"""

import dataclasses
import math

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError
from .rng import substream

FLAG_HEAD = 1
FLAG_NEVER_SELECT = 2

ARCHS = ("mlp", "cnn", "tiny-transformer")


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    arch: str
    input_shape: tuple
    classes: int
    hidden: tuple = (64, 64)
    channels: tuple = (8, 16)
    dim: int = 16
    heads: int = 4
    tokens: int = 4
    blocks: int = 1
    mlp_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(v) for v in self.hidden))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.arch == "cnn":
            if len(self.input_shape) != 3:
                raise ConfigError("cnn input_shape must be (channels, height, width)")
            if not self.channels:
                raise ConfigError("cnn needs at least one conv channel count")
        else:
            if len(self.input_shape) != 1:
                raise ConfigError(f"{self.arch} input_shape must be (features,)")
        if self.arch == "mlp" and not self.hidden:
            raise ConfigError("mlp needs at least one hidden layer")
        if self.arch == "tiny-transformer":
            if self.dim % self.heads != 0:
                raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
            if self.input_shape[0] % self.tokens != 0:
                raise ConfigError(
                    f"input width {self.input_shape[0]} not divisible by tokens {self.tokens}"
                )
            if self.blocks < 1:
                raise ConfigError("transformer needs at least one block")


def neuron_matrix(arr):
    """View a selectable weight as (neurons, connections)."""
    if arr.ndim == 2:
        return arr.T
    if arr.ndim == 4:
        return arr.reshape(arr.shape[0], -1)
    raise DimensionError(f"no neuron structure for rank-{arr.ndim} tensor")


@dataclasses.dataclass(frozen=True)
class NeuronEntry:
    """One neuron: a named matrix's output unit and its connection slots."""

    matrix: str
    neuron: int
    indices: np.ndarray  # flat indices into the matrix, ascending


def enumerate_neurons(model):
    """List every neuron of the selectable weights, in parameter order.

    A 2-d weight (fan_in, fan_out) contributes one neuron per column;
    a conv kernel (C_out, C_in, kh, kw) one per output channel. The
    flat index sets partition each selectable tensor exactly.
    """
    entries = []
    for name in model.selectable_names():
        arr = model.params[name].data
        if arr.ndim == 2:
            fan_in, fan_out = arr.shape
            for j in range(fan_out):
                entries.append(NeuronEntry(name, j, np.arange(fan_in) * fan_out + j))
        elif arr.ndim == 4:
            block = arr.shape[1] * arr.shape[2] * arr.shape[3]
            for c in range(arr.shape[0]):
                entries.append(NeuronEntry(name, c, np.arange(c * block, (c + 1) * block)))
        else:
            raise DimensionError(f"selectable tensor {name} has no neuron structure")
    return entries


class Model:
    def __init__(self, spec, params, flags):
        self.spec = spec
        self.params = params
        self.flags = flags

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def selectable_names(self):
        return [n for n, f in self.flags.items() if f == 0]

    def selectable_count(self):
        return sum(self.params[n].data.size for n in self.selectable_names())

    def clone(self):
        params = {
            name: ad.Tensor(p.data.copy(), requires_grad=True)
            for name, p in self.params.items()
        }
        return Model(self.spec, params, dict(self.flags))

    def embed(self, x):
        """Forward pass up to the pre-head feature vector z."""
        x = np.asarray(x, dtype=np.float64)
        if self.spec.arch == "mlp":
            return self._embed_mlp(self._as_flat(x))
        if self.spec.arch == "cnn":
            return self._embed_cnn(self._as_image(x))
        return self._embed_transformer(self._as_flat(x))

    def forward(self, x):
        """Full forward pass; returns (logits, embedding z)."""
        z = self.embed(x)
        logits = ad.add(ad.matmul(z, self.params["head.weight"]), self.params["head.bias"])
        return logits, z

    # ------------------------------------------------------------ internals

    def _as_flat(self, x):
        d = self.spec.input_shape[0]
        if x.ndim != 2 or x.shape[1] != d:
            raise DimensionError(f"expected (batch, {d}) input, got {x.shape}")
        return ad.Tensor(x)

    def _as_image(self, x):
        c, h, w = self.spec.input_shape
        if x.ndim == 2 and x.shape[1] == c * h * w:
            x = x.reshape(x.shape[0], c, h, w)
        if x.ndim != 4 or x.shape[1:] != (c, h, w):
            raise DimensionError(f"expected (batch, {c}, {h}, {w}) input, got {x.shape}")
        return ad.Tensor(x)

    def _embed_mlp(self, h):
        for i in range(len(self.spec.hidden)):
            w = self.params[f"layer{i}.weight"]
            b = self.params[f"layer{i}.bias"]
            h = ad.activation(ad.add(ad.matmul(h, w), b), "relu")
        return h

    def _embed_cnn(self, h):
        for i in range(len(self.spec.channels)):
            k = self.params[f"conv{i}.weight"]
            b = self.params[f"conv{i}.bias"]
            h = ad.activation(ad.add_channel_bias(ad.conv2d(h, k, stride=2, padding=1), b), "relu")
        n = h.shape[0]
        return ad.reshape(h, (n, int(np.prod(h.shape[1:]))))

    def _linear3(self, t, wname):
        b, tk, d = t.shape
        w = self.params[wname + ".weight"]
        h = ad.add(ad.matmul(ad.reshape(t, (b * tk, d)), w), self.params[wname + ".bias"])
        return ad.reshape(h, (b, tk, w.shape[1]))

    def _embed_transformer(self, x):
        s = self.spec
        b = x.shape[0]
        dtok = s.input_shape[0] // s.tokens
        dh = s.dim // s.heads
        h = self._linear3(ad.reshape(x, (b, s.tokens, dtok)), "embed")
        for i in range(s.blocks):
            pre = f"block{i}"
            a = ad.layer_norm(
                h, self.params[f"{pre}.norm1.gamma"], self.params[f"{pre}.norm1.beta"]
            )
            q = self._heads_split(self._linear3(a, f"{pre}.attn.q"), b, dh)
            k = self._heads_split(self._linear3(a, f"{pre}.attn.k"), b, dh)
            v = self._heads_split(self._linear3(a, f"{pre}.attn.v"), b, dh)
            scores = ad.scale(ad.bmm(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
            ctx = ad.bmm(ad.activation(scores, "softmax"), v)
            ctx = self._heads_merge(ctx, b)
            h = ad.add(h, self._linear3(ctx, f"{pre}.attn.o"))
            m = ad.layer_norm(
                h, self.params[f"{pre}.norm2.gamma"], self.params[f"{pre}.norm2.beta"]
            )
            m = ad.activation(self._linear3(m, f"{pre}.mlp.fc1"), "gelu")
            m = self._linear3(m, f"{pre}.mlp.fc2")
            h = ad.add(h, m)
        h = ad.layer_norm(h, self.params["final_norm.gamma"], self.params["final_norm.beta"])
        return ad.mean_axis(h, 1)

    def _heads_split(self, t, b, dh):
        # (B, T, dim) -> (B*H, T, dh)
        s = self.spec
        t = ad.reshape(t, (b, s.tokens, s.heads, dh))
        t = ad.transpose(t, (0, 2, 1, 3))
        return ad.reshape(t, (b * s.heads, s.tokens, dh))

    def _heads_merge(self, t, b):
        # (B*H, T, dh) -> (B, T, dim)
        s = self.spec
        t = ad.reshape(t, (b, s.heads, s.tokens, s.dim // s.heads))
        t = ad.transpose(t, (0, 2, 1, 3))
        return ad.reshape(t, (b, s.tokens, s.dim))


def _glorot(seed, name, fan_in, fan_out, shape):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return substream(seed, "init", name).uniform(-limit, limit, shape)


def build_model(spec):
    """Initialize a fresh model from its spec (deterministic in spec.seed)."""
    params = {}
    flags = {}

    def weight(name, fan_in, fan_out, shape, flag=0):
        params[name] = ad.Tensor(_glorot(spec.seed, name, fan_in, fan_out, shape), True)
        flags[name] = flag

    def fixed(name, values, flag):
        params[name] = ad.Tensor(values, True)
        flags[name] = flag

    if spec.arch == "mlp":
        dims = (spec.input_shape[0],) + spec.hidden
        for i in range(len(spec.hidden)):
            weight(f"layer{i}.weight", dims[i], dims[i + 1], (dims[i], dims[i + 1]))
            fixed(f"layer{i}.bias", np.zeros(dims[i + 1]), FLAG_NEVER_SELECT)
        feat = dims[-1]
    elif spec.arch == "cnn":
        ci, h, w = spec.input_shape
        for i, co in enumerate(spec.channels):
            weight(f"conv{i}.weight", ci * 9, co * 9, (co, ci, 3, 3))
            fixed(f"conv{i}.bias", np.zeros(co), FLAG_NEVER_SELECT)
            ci = co
            h = (h + 2 - 3) // 2 + 1
            w = (w + 2 - 3) // 2 + 1
            if h < 1 or w < 1:
                raise ConfigError("input too small for the conv stack")
        feat = ci * h * w
    else:
        dtok = spec.input_shape[0] // spec.tokens
        weight("embed.weight", dtok, spec.dim, (dtok, spec.dim))
        fixed("embed.bias", np.zeros(spec.dim), FLAG_NEVER_SELECT)
        for i in range(spec.blocks):
            pre = f"block{i}"
            fixed(f"{pre}.norm1.gamma", np.ones(spec.dim), FLAG_NEVER_SELECT)
            fixed(f"{pre}.norm1.beta", np.zeros(spec.dim), FLAG_NEVER_SELECT)
            for proj in ("q", "k", "v", "o"):
                weight(f"{pre}.attn.{proj}.weight", spec.dim, spec.dim, (spec.dim, spec.dim))
                fixed(f"{pre}.attn.{proj}.bias", np.zeros(spec.dim), FLAG_NEVER_SELECT)
            fixed(f"{pre}.norm2.gamma", np.ones(spec.dim), FLAG_NEVER_SELECT)
            fixed(f"{pre}.norm2.beta", np.zeros(spec.dim), FLAG_NEVER_SELECT)
            wide = spec.dim * spec.mlp_ratio
            weight(f"{pre}.mlp.fc1.weight", spec.dim, wide, (spec.dim, wide))
            fixed(f"{pre}.mlp.fc1.bias", np.zeros(wide), FLAG_NEVER_SELECT)
            weight(f"{pre}.mlp.fc2.weight", wide, spec.dim, (wide, spec.dim))
            fixed(f"{pre}.mlp.fc2.bias", np.zeros(spec.dim), FLAG_NEVER_SELECT)
        fixed("final_norm.gamma", np.ones(spec.dim), FLAG_NEVER_SELECT)
        fixed("final_norm.beta", np.zeros(spec.dim), FLAG_NEVER_SELECT)
        feat = spec.dim

    weight("head.weight", feat, spec.classes, (feat, spec.classes), FLAG_HEAD)
    fixed("head.bias", np.zeros(spec.classes), FLAG_HEAD | FLAG_NEVER_SELECT)
    return Model(spec, params, flags)
