"""Run configuration: a flat key=value text format.

One file drives a whole run. Lines are `key = value`, blank lines and
`#` comments are ignored, and unknown keys are rejected so a typo
cannot silently fall back to a default. Per-stage seeds (model.seed,
data.seed, select.seed, train.seed) inherit the global `seed` unless
set explicitly. Every command rewrites the fully resolved
configuration next to its outputs so a run can be replayed from the
output directory alone.
"""

from .data import GENERATORS, SynthSpec, load_csv, load_idx, standardize, stratified_split, synth_task
from .errors import ConfigError
from .models import ARCHS, ModelSpec
from .selection import FULL, LOSS_KINDS, STRATEGIES, SelectionConfig
from .training import OPTIMIZERS, TrainConfig

SOURCES = ("synth", "idx", "csv")
REPORT_KINDS = ("distribution", "overlap")


def _parse_bool(text):
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_ints(text):
    return tuple(int(p) for p in text.split(",") if p.strip()) if text.strip() else ()


def _parse_strs(text):
    return tuple(p.strip() for p in text.split(",") if p.strip()) if text.strip() else ()


def _parse_dims(text):
    return tuple(int(p) for p in text.split("x"))


def _fmt(key, value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ("x" if key == "model.input" else ",").join(str(v) for v in value)
    return str(value)


# key -> (parser, default); default None means "inherit the global seed"
SCHEMA = {
    "seed": (int, 0),
    "out": (str, "run"),
    "base": (str, ""),
    "mask": (str, ""),
    "ckpt": (str, ""),
    "model.arch": (str, "mlp"),
    "model.input": (_parse_dims, (16,)),
    "model.classes": (int, 4),
    "model.hidden": (_parse_ints, (64, 64)),
    "model.channels": (_parse_ints, (8, 16)),
    "model.dim": (int, 16),
    "model.heads": (int, 4),
    "model.tokens": (int, 4),
    "model.blocks": (int, 1),
    "model.mlp_ratio": (int, 4),
    "model.seed": (int, None),
    "data.source": (str, "synth"),
    "data.generator": (str, "gaussian-blobs"),
    "data.dim": (int, 16),
    "data.classes": (int, 4),
    "data.per_class": (int, 100),
    "data.noise": (float, 0.0),
    "data.seed": (int, None),
    "data.images": (str, ""),
    "data.labels": (str, ""),
    "data.csv": (str, ""),
    "data.label_col": (int, -1),
    "data.header": (_parse_bool, False),
    "data.split": (str, "test"),
    "select.strategy": (str, "neuron-topk"),
    "select.k": (int, 1),
    "select.p": (float, 0.05),
    "select.tau": (float, 0.07),
    "select.loss": (str, "scl"),
    "select.seed": (int, None),
    "select.batch_size": (int, 32),
    "train.optimizer": (str, "adam"),
    "train.lr": (float, 0.01),
    "train.weight_decay": (float, 0.0),
    "train.epochs": (int, 50),
    "train.warmup_epochs": (int, 5),
    "train.batch_size": (int, 32),
    "train.seed": (int, None),
    "train.freeze_head": (_parse_bool, False),
    "compare.strategies": (
        _parse_strs,
        ("neuron-topk", "neuron-random", "net-random", "magnitude"),
    ),
    "compare.ks": (_parse_ints, ()),
    "compare.seeds": (int, 1),
    "report.kind": (str, "distribution"),
    "report.masks": (_parse_strs, ()),
}
_SEED_KEYS = ("model.seed", "data.seed", "select.seed", "train.seed")


def parse_config(path):
    """Read raw key=value pairs; positioned errors for anything off."""
    raw = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {text!r}")
            key, _, value = text.partition("=")
            key = key.strip()
            if key not in SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            if key in raw:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            raw[key] = (value.strip(), lineno)
    return raw


def resolve(raw, overrides=None, path="<config>"):
    """Typed config dict with defaults filled and overrides applied."""
    cfg = {}
    for key, (parser, default) in SCHEMA.items():
        if key in raw:
            text, lineno = raw[key]
            try:
                cfg[key] = parser(text)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
        else:
            cfg[key] = default
    if overrides:
        for key, value in overrides.items():
            if value is not None:
                cfg[key] = value
    for key in _SEED_KEYS:
        if cfg[key] is None:
            cfg[key] = cfg["seed"]
    _validate(cfg)
    return cfg


def _validate(cfg):
    checks = (
        ("model.arch", ARCHS),
        ("data.source", SOURCES),
        ("data.generator", GENERATORS),
        ("select.strategy", STRATEGIES + (FULL,)),
        ("select.loss", LOSS_KINDS),
        ("train.optimizer", OPTIMIZERS),
        ("data.split", ("train", "val", "test")),
        ("report.kind", REPORT_KINDS),
    )
    for key, allowed in checks:
        if cfg[key] not in allowed:
            raise ConfigError(f"{key} must be one of {allowed}, got {cfg[key]!r}")
    for strategy in cfg["compare.strategies"]:
        if strategy not in STRATEGIES + (FULL,):
            raise ConfigError(f"compare.strategies contains unknown strategy {strategy!r}")


def load_config(path, overrides=None):
    return resolve(parse_config(path), overrides, path=str(path))


def resolved_text(cfg):
    return "".join(f"{key} = {_fmt(key, cfg[key])}\n" for key in SCHEMA)


def write_resolved(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(resolved_text(cfg))


# ---------------------------------------------------------- factory helpers


def model_spec(cfg):
    return ModelSpec(
        arch=cfg["model.arch"],
        input_shape=cfg["model.input"],
        classes=cfg["model.classes"],
        hidden=cfg["model.hidden"],
        channels=cfg["model.channels"],
        dim=cfg["model.dim"],
        heads=cfg["model.heads"],
        tokens=cfg["model.tokens"],
        blocks=cfg["model.blocks"],
        mlp_ratio=cfg["model.mlp_ratio"],
        seed=cfg["model.seed"],
    )


def selection_config(cfg, strategy=None, k=None):
    return SelectionConfig(
        strategy=cfg["select.strategy"] if strategy is None else strategy,
        k=cfg["select.k"] if k is None else k,
        p=cfg["select.p"],
        tau=cfg["select.tau"],
        loss=cfg["select.loss"],
        seed=cfg["select.seed"],
        batch_size=cfg["select.batch_size"],
    )


def train_config(cfg):
    return TrainConfig(
        optimizer=cfg["train.optimizer"],
        base_lr=cfg["train.lr"],
        weight_decay=cfg["train.weight_decay"],
        epochs=cfg["train.epochs"],
        warmup_epochs=cfg["train.warmup_epochs"],
        batch_size=cfg["train.batch_size"],
        seed=cfg["train.seed"],
    )


def load_task(cfg):
    """Build (train, val, test) from whichever data source is configured."""
    source = cfg["data.source"]
    if source == "synth":
        spec = SynthSpec(
            generator=cfg["data.generator"],
            dim=cfg["data.dim"],
            classes=cfg["data.classes"],
            per_class=cfg["data.per_class"],
            noise=cfg["data.noise"],
            seed=cfg["data.seed"],
        )
        return synth_task(spec)
    if source == "idx":
        if not cfg["data.images"] or not cfg["data.labels"]:
            raise ConfigError("data.source=idx needs data.images and data.labels")
        whole = load_idx(cfg["data.images"], cfg["data.labels"])
        return stratified_split(whole, cfg["data.seed"])
    if not cfg["data.csv"]:
        raise ConfigError("data.source=csv needs data.csv")
    whole = load_csv(cfg["data.csv"], cfg["data.label_col"], cfg["data.header"])
    return standardize(*stratified_split(whole, cfg["data.seed"]))
