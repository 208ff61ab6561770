"""Gradient-importance snapshots and selection-mask construction.

The importance signal is the gradient of a selection loss over one
full pass of the selection set, summed batch by batch. Masks pick
connections by |gradient| at neuron, layer, or network granularity,
with random and weight-magnitude schemes as controls, plus bias-only
and head-only pseudo-strategies so every baseline runs through the
same masked-training path.

Tie-breaking everywhere: the lower flat index wins.
"""

import dataclasses
import math

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, InputError, NumericError
from .models import FLAG_HEAD, FLAG_NEVER_SELECT, enumerate_neurons
from .data import balanced_batches, shuffled_batches
from .rng import substream

STRATEGIES = (
    "neuron-topk",
    "net-topfrac",
    "layer-topfrac",
    "net-random",
    "neuron-random",
    "magnitude",
    "bias-only",
    "linear-only",
)
FULL = "full"  # pseudo-strategy: every non-head parameter trainable
LOSS_KINDS = ("scl", "ce-with-head")


@dataclasses.dataclass(frozen=True)
class SelectionConfig:
    strategy: str
    k: int = 1
    p: float = 0.05
    tau: float = 0.07
    loss: str = "scl"
    seed: int = 0
    batch_size: int = 32

    def __post_init__(self):
        if self.strategy not in STRATEGIES + (FULL,):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.k < 1:
            raise ConfigError(f"K must be >= 1, got {self.k}")
        if not 0.0 < self.p <= 1.0:
            raise ConfigError(f"p must be in (0, 1], got {self.p}")
        if self.tau <= 0.0:
            raise ConfigError(f"tau must be positive, got {self.tau}")


@dataclasses.dataclass
class GradientSnapshot:
    buffers: dict  # selectable matrix name -> accumulated gradient array
    loss_kind: str
    dataset_id: str
    batch_count: int
    seed: int


@dataclasses.dataclass
class SelectionMask:
    buffers: dict  # matrix name -> uint8 mask, same shape as the weight
    strategy: str
    k: int = 0
    p: float = 0.0
    seed: int = 0
    snapshot_id: str = ""

    def popcount(self):
        return int(sum(int(b.sum()) for b in self.buffers.values()))


# ---------------------------------------------------------------- loss


def scl_loss(z, labels, tau):
    """Supervised contrastive loss over an embedding batch.

    Embeddings are L2-normalized internally; each anchor is pulled
    toward its same-class partners against all other batch members.
    Anchors without a same-class partner contribute zero.
    """
    if tau <= 0.0:
        raise ConfigError(f"tau must be positive, got {tau}")
    y = np.asarray(labels)
    b = z.data.shape[0]
    if b < 2:
        raise InputError(f"contrastive loss needs a batch of >= 2, got {b}")
    if y.shape != (b,):
        raise InputError(f"labels shape {y.shape} does not match batch {b}")

    zn = ad.l2_normalize_rows(z)
    sim = ad.scale(ad.matmul(zn, ad.transpose(zn)), 1.0 / tau)

    s = sim.data
    offdiag = ~np.eye(b, dtype=bool)
    positives = (y[:, None] == y[None, :]) & offdiag
    pcount = positives.sum(axis=1)
    active = pcount > 0
    denom = np.maximum(pcount, 1)

    shifted = np.where(offdiag, s, -np.inf)
    rowmax = shifted.max(axis=1, keepdims=True)
    ex = np.exp(shifted - rowmax)
    exsum = ex.sum(axis=1, keepdims=True)
    lse = rowmax[:, 0] + np.log(exsum[:, 0])

    per_anchor = np.where(active, -(positives * s).sum(axis=1) / denom + lse, 0.0)
    value = per_anchor.sum()

    softmax = ex / exsum
    dsim = np.where(active[:, None], softmax - positives / denom[:, None], 0.0)

    out = ad.Tensor(value)
    if sim.requires_grad:
        out.requires_grad = True
        out._parents = (sim,)

        def backprop(gout):
            ad._accum(sim, dsim * float(gout))

        out._backprop = backprop
    return out


def accumulate_gradients(model, dataset, config):
    """One full pass over the selection set; per-batch gradients summed."""
    if dataset.n < 1:
        raise InputError("selection dataset is empty")
    names = model.selectable_names()
    buffers = {n: np.zeros_like(model.params[n].data) for n in names}
    leaves = [model.params[n] for n in names]
    if config.loss == "scl":
        batches = balanced_batches(dataset, config.batch_size, config.seed)
    else:
        batches = shuffled_batches(dataset, config.batch_size, config.seed)
    for idx in batches:
        model.zero_grad()
        xb, yb = dataset.x[idx], dataset.y[idx]
        if config.loss == "scl":
            loss = scl_loss(model.embed(xb), yb, config.tau)
        else:
            logits, _ = model.forward(xb)
            loss = ad.softmax_cross_entropy(logits, yb, reduction="sum")
        ad.backward(loss, leaves=leaves)
        for n in names:
            buffers[n] += model.params[n].grad
    model.zero_grad()
    for n in names:
        if not np.isfinite(buffers[n]).all():
            raise NumericError(f"non-finite accumulated gradient in {n}")
    return GradientSnapshot(buffers, config.loss, dataset.tag, len(batches), config.seed)


# ---------------------------------------------------------------- selectors


def _check_map(buffers, neuron_map):
    covered = {n: 0 for n in buffers}
    for entry in neuron_map:
        if entry.matrix not in buffers:
            raise ContractError(f"neuron map names unknown matrix {entry.matrix!r}")
        size = buffers[entry.matrix].size
        if len(entry.indices) == 0 or entry.indices.max() >= size:
            raise ContractError(f"neuron map indices out of range for {entry.matrix!r}")
        covered[entry.matrix] += len(entry.indices)
    for n, c in covered.items():
        if c != buffers[n].size:
            raise ContractError(f"neuron map does not partition {n!r} ({c} of {buffers[n].size})")


def _zeros_like(buffers):
    return {n: np.zeros(b.shape, dtype=np.uint8) for n, b in buffers.items()}


def _topk_rows(values, neuron_map, k, out):
    for entry in neuron_map:
        vals = np.abs(values[entry.matrix].flat[entry.indices])
        take = min(k, vals.shape[0])
        order = np.argsort(-vals, kind="stable")[:take]
        out[entry.matrix].flat[entry.indices[order]] = 1


def select_neuron_topk(snapshot, neuron_map, k):
    """Per neuron, the min(K, fan_in) connections with largest |gradient|."""
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    _check_map(snapshot.buffers, neuron_map)
    mask = _zeros_like(snapshot.buffers)
    _topk_rows(snapshot.buffers, neuron_map, k, mask)
    return SelectionMask(mask, "neuron-topk", k=k, seed=snapshot.seed,
                         snapshot_id=snapshot.dataset_id)


def select_magnitude(model, neuron_map, k):
    """Like neuron-topk but ranked by |weight| instead of |gradient|."""
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    values = {n: model.params[n].data for n in model.selectable_names()}
    _check_map(values, neuron_map)
    mask = _zeros_like(values)
    _topk_rows(values, neuron_map, k, mask)
    return SelectionMask(mask, "magnitude", k=k)


def _flatten(buffers):
    names = list(buffers)
    sizes = [buffers[n].size for n in names]
    starts = np.cumsum([0] + sizes[:-1])
    mags = np.concatenate([np.abs(buffers[n]).ravel() for n in names])
    return names, mags, starts


def _scatter_flat(mask, names, starts, flats):
    which = np.searchsorted(starts, flats, side="right") - 1
    for flat, w in zip(flats, which):
        mask[names[w]].flat[flat - starts[w]] = 1


def _net_topcount(snapshot, count):
    names, mags, starts = _flatten(snapshot.buffers)
    mask = _zeros_like(snapshot.buffers)
    order = np.argsort(-mags, kind="stable")[:count]
    _scatter_flat(mask, names, starts, order)
    return mask


def select_net_topfrac(snapshot, p):
    """The ceil(p * N_selectable) globally largest-|gradient| parameters."""
    if not 0.0 < p <= 1.0:
        raise ConfigError(f"p must be in (0, 1], got {p}")
    total = sum(b.size for b in snapshot.buffers.values())
    count = math.ceil(p * total)
    mask = _net_topcount(snapshot, min(count, total))
    return SelectionMask(mask, "net-topfrac", p=p, seed=snapshot.seed,
                         snapshot_id=snapshot.dataset_id)


def select_layer_topfrac(snapshot, p):
    """Per weight matrix, the ceil(p * size) largest-|gradient| entries."""
    if not 0.0 < p <= 1.0:
        raise ConfigError(f"p must be in (0, 1], got {p}")
    mask = _zeros_like(snapshot.buffers)
    for n, buf in snapshot.buffers.items():
        count = min(math.ceil(p * buf.size), buf.size)
        order = np.argsort(-np.abs(buf).ravel(), kind="stable")[:count]
        mask[n].flat[order] = 1
    return SelectionMask(mask, "layer-topfrac", p=p, seed=snapshot.seed,
                         snapshot_id=snapshot.dataset_id)


def select_random(model, neuron_map, scheme, budget, seed):
    """Uniform random controls: K per neuron, or a flat count netwide."""
    values = {n: model.params[n].data for n in model.selectable_names()}
    _check_map(values, neuron_map)
    mask = _zeros_like(values)
    gen = substream(seed, "random-selection")
    if scheme == "neuron-random":
        if budget < 1:
            raise ConfigError(f"K must be >= 1, got {budget}")
        for entry in neuron_map:
            take = min(budget, len(entry.indices))
            picks = gen.sample_without_replacement(len(entry.indices), take)
            mask[entry.matrix].flat[entry.indices[picks]] = 1
        return SelectionMask(mask, "neuron-random", k=budget, seed=seed)
    if scheme == "net-random":
        names, _, starts = _flatten(values)
        total = sum(v.size for v in values.values())
        if not 0 <= budget <= total:
            raise ConfigError(f"budget {budget} exceeds {total} selectable parameters")
        picks = gen.sample_without_replacement(total, budget)
        _scatter_flat(mask, names, starts, picks)
        return SelectionMask(mask, "net-random", k=budget, seed=seed)
    raise ConfigError(f"unknown random scheme {scheme!r}")


def bias_mask(model):
    """All-ones mask over the non-head bias vectors (bias-tuning baseline)."""
    buffers = {
        n: np.ones(model.params[n].data.shape, dtype=np.uint8)
        for n, f in model.flags.items()
        if n.endswith(".bias") and not f & FLAG_HEAD
    }
    return SelectionMask(buffers, "bias-only")


def linear_mask():
    """Empty mask: only the head trains (linear-probing baseline)."""
    return SelectionMask({}, "linear-only")


def full_mask(model):
    """All-ones mask over every non-head parameter (full fine-tuning)."""
    buffers = {
        n: np.ones(model.params[n].data.shape, dtype=np.uint8)
        for n, f in model.flags.items()
        if not f & FLAG_HEAD
    }
    return SelectionMask(buffers, FULL)


def neuron_budget(neuron_map, k):
    """Parameter count a neuron-topk selection at K would produce."""
    return sum(min(k, len(entry.indices)) for entry in neuron_map)


def build_mask(model, config, snapshot=None, budget=None):
    """Build the mask a SelectionConfig describes.

    `budget` overrides the parameter count for net-random (defaults to
    the neuron-topk count at config.k, the matched-budget convention).
    """
    strategy = config.strategy
    if strategy in ("neuron-topk", "net-topfrac", "layer-topfrac") and snapshot is None:
        raise ContractError(f"{strategy} needs a gradient snapshot")
    neuron_map = enumerate_neurons(model)
    if strategy == "neuron-topk":
        return select_neuron_topk(snapshot, neuron_map, config.k)
    if strategy == "net-topfrac":
        return select_net_topfrac(snapshot, config.p)
    if strategy == "layer-topfrac":
        return select_layer_topfrac(snapshot, config.p)
    if strategy == "neuron-random":
        return select_random(model, neuron_map, strategy, config.k, config.seed)
    if strategy == "net-random":
        count = neuron_budget(neuron_map, config.k) if budget is None else budget
        return select_random(model, neuron_map, strategy, count, config.seed)
    if strategy == "magnitude":
        return select_magnitude(model, neuron_map, config.k)
    if strategy == "bias-only":
        return bias_mask(model)
    if strategy == "linear-only":
        return linear_mask()
    if strategy == FULL:
        return full_mask(model)
    raise ConfigError(f"unknown strategy {strategy!r}")
