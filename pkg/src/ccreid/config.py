"""Run configuration: flat `key = value` files with full validation.

Every key has a typed default; unknown keys, unparsable values, and
out-of-range values are rejected at load time with the key and line
number.  `#` starts a comment.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .backbone import BackboneConfig
from .contrast import SamplingConfig


class ConfigError(Exception):
    """A configuration file or value is invalid."""


def _parse_int(text: str) -> int:
    return int(text, 10)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> tuple:
    items = [p.strip() for p in text.split(",") if p.strip()]
    return tuple(int(p, 10) for p in items)


def _parse_str(text: str) -> str:
    return text


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    stage_channels: tuple = (8, 16, 32, 64)
    downsample_stages: tuple = (1, 2, 3)
    shared_from_stage: int = 2
    input_h: int = 64
    input_w: int = 32
    h_k: int = 3
    w_k: int = 3
    stride_v: int = 1
    stride_h: int = 1
    edge_snap: bool = False
    loss_lambda: float = 0.1
    loss_clamp: float = 1e-12
    data_seed: int = 7
    train_ids: int = 32
    test_ids: int = 8
    per_modality: int = 20
    pad: int = 4
    flip_prob: float = 0.5
    epochs: int = 60
    lr: float = 0.1
    lr_drop_epoch: int = 0      # 0 means epochs // 2
    momentum: float = 0.9
    batch_identities: int = 32  # identities per batch (N)
    neg_ratio: int = 3          # negative pairs per positive (r)
    train_seed: int = 1
    iters_per_epoch: int = 8
    checkpoint_every: int = 0   # 0 means final checkpoint only
    eval_mode: str = "simplified"
    dataset_path: str = "data/desk.cmds"
    checkpoint_path: str = "runs/model.ckpt"
    report_dir: str = "runs/report"

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            stage_channels=tuple(self.stage_channels),
            downsample_stages=tuple(self.downsample_stages),
            shared_from_stage=self.shared_from_stage,
            input_shape=(3, self.input_h, self.input_w),
        )

    def sampling_config(self) -> SamplingConfig:
        return SamplingConfig(h_k=self.h_k, w_k=self.w_k,
                              stride_v=self.stride_v, stride_h=self.stride_h,
                              edge_snap=self.edge_snap)

    def drop_epoch(self) -> int:
        return self.lr_drop_epoch if self.lr_drop_epoch else self.epochs // 2

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch: base, then x0.1 after the drop."""
        return self.lr if epoch <= self.drop_epoch() else self.lr * 0.1


# key -> (attribute, parser, range description, validator)
_SCHEMA = {
    "model.stage_channels": ("stage_channels", _parse_int_list,
                             "non-empty list of channels >= 1",
                             lambda v: len(v) >= 1 and all(c >= 1 for c in v)),
    "model.downsample_stages": ("downsample_stages", _parse_int_list,
                                "list of stage indices >= 0",
                                lambda v: all(s >= 0 for s in v)),
    "model.shared_from_stage": ("shared_from_stage", _parse_int, ">= 0",
                                lambda v: v >= 0),
    "model.input_h": ("input_h", _parse_int, ">= 1", lambda v: v >= 1),
    "model.input_w": ("input_w", _parse_int, ">= 1", lambda v: v >= 1),
    "ccn.h_k": ("h_k", _parse_int, ">= 1", lambda v: v >= 1),
    "ccn.w_k": ("w_k", _parse_int, ">= 1", lambda v: v >= 1),
    "ccn.stride_v": ("stride_v", _parse_int, ">= 1", lambda v: v >= 1),
    "ccn.stride_h": ("stride_h", _parse_int, ">= 1", lambda v: v >= 1),
    "ccn.edge_snap": ("edge_snap", _parse_bool, "true/false", lambda v: True),
    "loss.lambda": ("loss_lambda", _parse_float, ">= 0", lambda v: v >= 0),
    "loss.clamp": ("loss_clamp", _parse_float, "in (0, 1)", lambda v: 0 < v < 1),
    "data.seed": ("data_seed", _parse_int, ">= 0", lambda v: v >= 0),
    "data.train_ids": ("train_ids", _parse_int, ">= 1", lambda v: v >= 1),
    "data.test_ids": ("test_ids", _parse_int, ">= 1", lambda v: v >= 1),
    "data.per_modality": ("per_modality", _parse_int, ">= 1", lambda v: v >= 1),
    "data.pad": ("pad", _parse_int, ">= 0", lambda v: v >= 0),
    "data.flip_prob": ("flip_prob", _parse_float, "in [0, 1]",
                       lambda v: 0 <= v <= 1),
    "train.epochs": ("epochs", _parse_int, ">= 1", lambda v: v >= 1),
    "train.lr": ("lr", _parse_float, "> 0", lambda v: v > 0),
    "train.lr_drop_epoch": ("lr_drop_epoch", _parse_int, ">= 0", lambda v: v >= 0),
    "train.momentum": ("momentum", _parse_float, "in [0, 1)",
                       lambda v: 0 <= v < 1),
    "train.batch_identities": ("batch_identities", _parse_int, ">= 1",
                               lambda v: v >= 1),
    "train.neg_ratio": ("neg_ratio", _parse_int, ">= 0", lambda v: v >= 0),
    "train.seed": ("train_seed", _parse_int, ">= 0", lambda v: v >= 0),
    "train.iters_per_epoch": ("iters_per_epoch", _parse_int, ">= 1",
                              lambda v: v >= 1),
    "train.checkpoint_every": ("checkpoint_every", _parse_int, ">= 0",
                               lambda v: v >= 0),
    "eval.mode": ("eval_mode", _parse_str, "simplified/full/both",
                  lambda v: v in ("simplified", "full", "both")),
    "paths.dataset": ("dataset_path", _parse_str, "path", lambda v: bool(v)),
    "paths.checkpoint": ("checkpoint_path", _parse_str, "path", lambda v: bool(v)),
    "paths.report": ("report_dir", _parse_str, "path", lambda v: bool(v)),
}

_ATTR_TO_KEY = {attr: key for key, (attr, *_rest) in _SCHEMA.items()}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        seen.add(key)
        attr, parser, expected, check = _SCHEMA[key]
        try:
            parsed = parser(value)
        except ValueError:
            raise ConfigError(
                f"{source}:{lineno}: cannot parse '{key}' value {value!r}") from None
        if not check(parsed):
            raise ConfigError(
                f"{source}:{lineno}: '{key}' = {value} out of range (expected {expected})")
        setattr(cfg, attr, parsed)
    validate_config(cfg, source)
    return cfg


def validate_config(cfg: RunConfig, source: str = "<config>") -> None:
    """Cross-field checks that single-key validators cannot express."""
    try:
        bb = cfg.backbone_config()
        bb.validate()
        _, h_f, w_f = bb.output_shape()
        cfg.sampling_config().validate(h_f, w_f)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if cfg.lr_drop_epoch > cfg.epochs:
        raise ConfigError(
            f"{source}: 'train.lr_drop_epoch' = {cfg.lr_drop_epoch} exceeds "
            f"'train.epochs' = {cfg.epochs}")
    if cfg.batch_identities > cfg.train_ids:
        raise ConfigError(
            f"{source}: 'train.batch_identities' = {cfg.batch_identities} exceeds "
            f"'data.train_ids' = {cfg.train_ids}")


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fp:
            text = fp.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, source=str(path))


def save_config(cfg: RunConfig, path) -> None:
    lines = ["# run configuration"]
    for f in fields(RunConfig):
        key = _ATTR_TO_KEY[f.name]
        lines.append(f"{key} = {_fmt(getattr(cfg, f.name))}")
    with open(path, "w", encoding="utf-8") as fp:
        fp.write("\n".join(lines) + "\n")


def describe_keys() -> str:
    """One line per key: name, default, accepted range."""
    cfg = RunConfig()
    rows = []
    for key, (attr, _parser, expected, _check) in _SCHEMA.items():
        rows.append(f"  {key} = {_fmt(getattr(cfg, attr))}  ({expected})")
    return "\n".join(rows)
