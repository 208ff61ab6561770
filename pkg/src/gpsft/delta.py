"""Binary persistence: checkpoints, masks, sparse deltas, mask stats.

Three little-endian container formats (magic, version, then payload):

  GPSW  checkpoint: tensor count; per tensor name, flags byte, rank,
        u64 dims, raw f64 data.
  GPSM  mask: strategy byte, budget (u32 K or f64 p by strategy), u64
        seed, matrix count; per matrix name, rank, dims, bit-packed
        rows. Pseudo-strategies (bias-only, linear-only, full) store
        no matrices; their buffers are rebuilt from the model.
  GPSD  delta: u64 digest of the base checkpoint stream, entry count,
        name table, (name id, flat index, value) entries, then the
        dense head tensors in checkpoint format.

A delta stores absolute values at exactly the mask==1 positions, so
applying it is idempotent and the entry count equals the mask
popcount; a tuned model that drifted anywhere else is rejected with
an integrity error before anything is written.
"""

import dataclasses
import struct

import numpy as np

from . import autodiff as ad
from .errors import (
    CompatibilityError,
    ContractError,
    FormatError,
    IntegrityError,
)
from .models import FLAG_HEAD, Model, build_model
from .rng import fnv1a64
from .selection import FULL, STRATEGIES, SelectionMask, bias_mask, full_mask, linear_mask

CHECKPOINT_MAGIC = b"GPSW"
MASK_MAGIC = b"GPSM"
DELTA_MAGIC = b"GPSD"
FORMAT_VERSION = 1

STRATEGY_CODES = {name: i for i, name in enumerate(STRATEGIES + (FULL,))}
CODE_STRATEGIES = {i: name for name, i in STRATEGY_CODES.items()}
_FRAC_STRATEGIES = ("net-topfrac", "layer-topfrac")
_PSEUDO_STRATEGIES = ("bias-only", "linear-only", FULL)


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.at = 0
        self.path = path

    def take(self, n, what):
        if self.at + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated while reading {what}")
        out = self.buf[self.at : self.at + n]
        self.at += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def name(self, what="name"):
        (n,) = self.unpack("H", what)
        return self.take(n, what).decode("utf-8")

    def done(self):
        if self.at != len(self.buf):
            raise FormatError(f"{self.path}: {len(self.buf) - self.at} trailing bytes")


def _pack_name(name):
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _pack_tensor(name, flags, arr):
    parts = [_pack_name(name), struct.pack("<BB", flags, arr.ndim)]
    parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def _read_tensor(r):
    name = r.name()
    flags, rank = r.unpack("BB", f"{name} header")
    dims = r.unpack(f"{rank}Q", f"{name} dims") if rank else ()
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(r.take(count * 8, f"{name} data"), dtype="<f8").reshape(dims)
    return name, flags, data.astype(np.float64)


# ---------------------------------------------------------------- checkpoints


def checkpoint_bytes(model):
    """Serialize a model to the checkpoint byte stream."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(model.params))]
    for name, p in model.params.items():
        parts.append(_pack_tensor(name, model.flags[name], p.data))
    return b"".join(parts)


def checkpoint_digest(model):
    """64-bit FNV-1a digest of the checkpoint byte stream."""
    return fnv1a64(checkpoint_bytes(model))


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path, spec):
    """Load a checkpoint into the structure its ModelSpec defines.

    The file carries names, flags, and tensors but not the
    architecture, so the caller supplies the spec; any disagreement is
    reported at the first offending tensor.
    """
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), str(path))
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    version, count = r.unpack("II", "header")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    expected = build_model(spec)
    if count != len(expected.params):
        raise FormatError(
            f"{path}: {count} tensors but spec defines {len(expected.params)}"
        )
    params = {}
    flags = {}
    for expected_name in expected.params:
        name, f, data = _read_tensor(r)
        if name != expected_name:
            raise FormatError(f"{path}: tensor {name!r} where spec expects {expected_name!r}")
        if data.shape != expected.params[name].data.shape:
            raise FormatError(
                f"{path}: tensor {name!r} has shape {data.shape}, "
                f"spec expects {expected.params[name].data.shape}"
            )
        if f != expected.flags[name]:
            raise FormatError(f"{path}: tensor {name!r} flags {f} do not match spec")
        params[name] = ad.Tensor(data.copy(), requires_grad=True)
        flags[name] = f
    r.done()
    return Model(spec, params, flags)


# ---------------------------------------------------------------- masks


def save_mask(mask, path):
    if mask.strategy not in STRATEGY_CODES:
        raise ContractError(f"cannot serialize strategy {mask.strategy!r}")
    parts = [MASK_MAGIC, struct.pack("<IB", FORMAT_VERSION, STRATEGY_CODES[mask.strategy])]
    if mask.strategy in _FRAC_STRATEGIES:
        parts.append(struct.pack("<d", mask.p))
    else:
        parts.append(struct.pack("<I", mask.k))
    parts.append(struct.pack("<Q", mask.seed & (1 << 64) - 1))
    buffers = {} if mask.strategy in _PSEUDO_STRATEGIES else mask.buffers
    parts.append(struct.pack("<I", len(buffers)))
    for name, buf in buffers.items():
        parts.append(_pack_name(name))
        parts.append(struct.pack(f"<B{buf.ndim}Q", buf.ndim, *buf.shape))
        parts.append(np.packbits(buf.ravel().astype(np.uint8), bitorder="little").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_mask(path, model=None):
    """Read a GPSM file; pseudo-strategy buffers need the model to rebuild."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), str(path))
    if r.take(4, "magic") != MASK_MAGIC:
        raise FormatError(f"{path}: not a mask file (bad magic)")
    version, code = r.unpack("IB", "header")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported mask version {version}")
    if code not in CODE_STRATEGIES:
        raise FormatError(f"{path}: unknown strategy code {code}")
    strategy = CODE_STRATEGIES[code]
    k, p = 0, 0.0
    if strategy in _FRAC_STRATEGIES:
        (p,) = r.unpack("d", "p")
    else:
        (k,) = r.unpack("I", "K")
    (seed,) = r.unpack("Q", "seed")
    (count,) = r.unpack("I", "matrix count")
    buffers = {}
    for _ in range(count):
        name = r.name()
        (rank,) = r.unpack("B", f"{name} rank")
        dims = r.unpack(f"{rank}Q", f"{name} dims")
        size = int(np.prod(dims)) if dims else 1
        packed = np.frombuffer(r.take((size + 7) // 8, f"{name} bits"), dtype=np.uint8)
        bits = np.unpackbits(packed, count=size, bitorder="little")
        buffers[name] = bits.reshape(dims).astype(np.uint8)
    r.done()
    if strategy in _PSEUDO_STRATEGIES and model is not None:
        rebuilt = {
            "bias-only": bias_mask,
            "linear-only": lambda m: linear_mask(),
            FULL: full_mask,
        }[strategy](model)
        buffers = rebuilt.buffers
    if model is not None:
        for name, buf in buffers.items():
            if name not in model.params:
                raise ContractError(f"{path}: mask names unknown parameter {name!r}")
            if buf.shape != model.params[name].data.shape:
                raise ContractError(
                    f"{path}: mask for {name} has shape {buf.shape}, "
                    f"model has {model.params[name].data.shape}"
                )
    return SelectionMask(buffers, strategy, k=k, p=p, seed=seed)


# ---------------------------------------------------------------- deltas


@dataclasses.dataclass
class SparseDelta:
    base_digest: int
    entries: list  # (matrix name, flat index, value), sorted
    head: dict  # head tensor name -> array


def export_delta(base, tuned, mask):
    """Collect the mask==1 values of a tuned model as a sparse overlay.

    Raises an integrity error if the tuned model differs from the base
    anywhere outside the mask and the head; that means the masked
    training contract was broken upstream.
    """
    if list(base.params) != list(tuned.params):
        raise ContractError("base and tuned models have different parameter sets")
    for name, p in base.params.items():
        if p.data.shape != tuned.params[name].data.shape:
            raise ContractError(f"base and tuned disagree on shape of {name}")
    entries = []
    head = {}
    for name, p in base.params.items():
        t = tuned.params[name].data
        if base.flags[name] & FLAG_HEAD:
            head[name] = t.copy()
            continue
        buf = mask.buffers.get(name)
        if buf is None:
            if not np.array_equal(p.data, t):
                raise IntegrityError(f"unmasked parameter {name} changed during tuning")
            continue
        frozen = buf == 0
        if not np.array_equal(p.data[frozen], t[frozen]):
            raise IntegrityError(f"mask==0 entries of {name} changed during tuning")
        flat = t.ravel()
        for i in np.flatnonzero(buf.ravel()):
            entries.append((name, int(i), float(flat[i])))
    return SparseDelta(checkpoint_digest(base), entries, head)


def apply_delta(base, delta):
    """Overlay a sparse delta on its base model; returns a new model."""
    if checkpoint_digest(base) != delta.base_digest:
        raise CompatibilityError(
            f"delta was built for base {delta.base_digest:#018x}, "
            f"got {checkpoint_digest(base):#018x}"
        )
    tuned = base.clone()
    for name, idx, value in delta.entries:
        if name not in tuned.params:
            raise FormatError(f"delta names unknown parameter {name!r}")
        arr = tuned.params[name].data
        if not 0 <= idx < arr.size:
            raise FormatError(f"delta index {idx} out of range for {name} ({arr.size})")
        arr.flat[idx] = value
    for name, values in delta.head.items():
        if name not in tuned.params or not tuned.flags[name] & FLAG_HEAD:
            raise FormatError(f"delta head block names non-head tensor {name!r}")
        if values.shape != tuned.params[name].data.shape:
            raise FormatError(f"delta head tensor {name} has shape {values.shape}")
        tuned.params[name].data[...] = values
    return tuned


def save_delta(delta, path):
    names = []
    ids = {}
    for name, _, _ in delta.entries:
        if name not in ids:
            ids[name] = len(names)
            names.append(name)
    parts = [
        DELTA_MAGIC,
        struct.pack(
            "<IQQ", FORMAT_VERSION, delta.base_digest & (1 << 64) - 1, len(delta.entries)
        ),
        struct.pack("<I", len(names)),
    ]
    parts.extend(_pack_name(n) for n in names)
    for name, idx, value in delta.entries:
        parts.append(struct.pack("<IQd", ids[name], idx, value))
    parts.append(struct.pack("<I", len(delta.head)))
    for name, arr in delta.head.items():
        parts.append(_pack_tensor(name, FLAG_HEAD, arr))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_delta(path):
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), str(path))
    if r.take(4, "magic") != DELTA_MAGIC:
        raise FormatError(f"{path}: not a delta file (bad magic)")
    version, digest, n_entries = r.unpack("IQQ", "header")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported delta version {version}")
    (n_names,) = r.unpack("I", "name count")
    names = [r.name() for _ in range(n_names)]
    entries = []
    last = None
    for _ in range(n_entries):
        nid, idx, value = r.unpack("IQd", "entry")
        if nid >= len(names):
            raise FormatError(f"{path}: entry references name id {nid} of {len(names)}")
        key = (nid, idx)
        if last is not None and key <= last:
            raise FormatError(f"{path}: entries not strictly sorted at {names[nid]}[{idx}]")
        last = key
        entries.append((names[nid], int(idx), float(value)))
    (n_head,) = r.unpack("I", "head count")
    head = {}
    for _ in range(n_head):
        name, _, data = _read_tensor(r)
        head[name] = data
    r.done()
    return SparseDelta(digest, entries, head)


# ---------------------------------------------------------------- mask stats


def _block_of(name):
    return name.split(".", 1)[0]


def mask_overlap(a, b):
    """Pairwise overlap of two masks over the same parameter set."""
    if set(a.buffers) != set(b.buffers):
        raise ContractError("masks cover different parameter sets")
    per_matrix = {}
    per_block = {}
    shared = only_a = only_b = 0
    for name, ba in a.buffers.items():
        bb = b.buffers[name]
        if ba.shape != bb.shape:
            raise ContractError(f"masks disagree on shape of {name}")
        both = int(np.sum((ba == 1) & (bb == 1)))
        sa = int(np.sum((ba == 1) & (bb == 0)))
        sb = int(np.sum((ba == 0) & (bb == 1)))
        per_matrix[name] = {"shared": both, "only_a": sa, "only_b": sb}
        blk = per_block.setdefault(_block_of(name), {"shared": 0, "only_a": 0, "only_b": 0})
        blk["shared"] += both
        blk["only_a"] += sa
        blk["only_b"] += sb
        shared += both
        only_a += sa
        only_b += sb
    union = shared + only_a + only_b
    return {
        "jaccard": shared / union if union else 1.0,
        "shared": shared,
        "only_a": only_a,
        "only_b": only_b,
        "union": union,
        "per_matrix": per_matrix,
        "per_block": per_block,
    }


def mask_distribution(mask, model=None):
    """Selected-parameter counts grouped by block, with fractions."""
    counts = {}
    for name, buf in mask.buffers.items():
        counts[_block_of(name)] = counts.get(_block_of(name), 0) + int(buf.sum())
    total = sum(counts.values())
    out = {
        "total": total,
        "blocks": {
            blk: {"count": c, "fraction": c / total if total else 0.0}
            for blk, c in counts.items()
        },
    }
    if model is not None:
        for blk in out["blocks"]:
            selectable = sum(
                model.params[n].data.size
                for n in model.selectable_names()
                if _block_of(n) == blk
            )
            out["blocks"][blk]["selectable"] = selectable
    return out
