"""Run configuration: line-oriented config files plus flag overrides.

The accepted format is UTF-8 ``key = value`` lines with ``#`` comments and
dotted section keys, for example::

    # desk-scale run
    data.num_identities = 20
    optim.lr0 = 1e-3
    weights.lambda_rot = 1.0

Sections map straight onto the library's config dataclasses (``data``,
``arch``, ``optim``, ``train``, ``weights``, ``augment``, ``eval``) plus a
``run`` section for command-level bookkeeping (seed, paths). Precedence is
command-line flag over file value over preset default. ``format_config``
writes the fully-resolved state back out in the same format, so the echo
file a command leaves behind is itself a valid input that reproduces the
run.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, replace

from geomattn.data import AugmentConfig, SyntheticSpec
from geomattn.evaluation import EvalConfig
from geomattn.losses import LossWeights
from geomattn.model import ArchConfig
from geomattn.optim import OptimConfig, TrainConfig, preset

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config_file",
    "format_config",
    "resolve_run_config",
    "ENV_SEED",
]

ENV_SEED = "GEOMATTN_SEED"


class ConfigError(Exception):
    pass


def parse_config_file(path) -> dict[str, str]:
    """Read ``key = value`` lines into a flat dict of strings."""
    flat: dict[str, str] = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        flat[key] = value
    return flat


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(flat: dict[str, str]) -> str:
    return "".join(f"{key} = {flat[key]}\n" for key in sorted(flat))


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _coerce(field_type: str, text: str, key: str):
    text = text.strip()
    try:
        if field_type == "int":
            return int(text)
        if field_type == "float":
            return float(text)
        if field_type == "str":
            return text
        if field_type == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if field_type.startswith("tuple["):
            inner = field_type[len("tuple[") : -1]
            elem = inner.split(",", 1)[0].strip()
            parts = [p for p in text.split(",") if p.strip() != ""]
            return tuple(_coerce(elem, p, key) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc
    raise ConfigError(f"cannot parse values of type {field_type} (key {key})")


def _build(cls, base, overrides: dict[str, str], section: str):
    """Apply string overrides for one section onto a dataclass instance."""
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    updates = {}
    for name, text in overrides.items():
        if name not in types:
            known = ", ".join(sorted(types))
            raise ConfigError(f"unknown key {section}.{name} (known: {known})")
        updates[name] = _coerce(types[name], text, f"{section}.{name}")
    try:
        return replace(base, **updates) if updates else base
    except (ValueError, NotImplementedError) as exc:
        raise ConfigError(f"invalid {section} config: {exc}") from exc


def _section(flat: dict[str, str], name: str) -> dict[str, str]:
    prefix = name + "."
    return {k[len(prefix) :]: v for k, v in flat.items() if k.startswith(prefix)}


@dataclass
class RunConfig:
    command: str
    out_dir: str
    seed: int
    synthetic: bool
    data_dir: str | None
    spec: SyntheticSpec
    arch: ArchConfig
    train: TrainConfig
    eval: EvalConfig
    explicit: frozenset[str]  # keys set by file or flag, not defaulted

    def to_flat(self) -> dict[str, str]:
        flat: dict[str, str] = {
            "run.command": self.command,
            "run.out_dir": self.out_dir,
            "run.seed": str(self.seed),
            "run.synthetic": _format_value(self.synthetic),
            "train.preset": "none",
        }
        if self.data_dir is not None:
            flat["run.data_dir"] = self.data_dir
        for section, obj in (
            ("data", self.spec),
            ("arch", self.arch),
            ("optim", self.train.optim),
            ("weights", self.train.weights),
            ("augment", self.train.augment),
            ("eval", self.eval),
        ):
            for f in dataclasses.fields(obj):
                flat[f"{section}.{f.name}"] = _format_value(getattr(obj, f.name))
        for name in ("P", "K", "tau", "smoothing_eps", "seed", "checkpoint_every"):
            flat[f"train.{name}"] = _format_value(getattr(self.train, name))
        return flat

    def echo(self) -> str:
        return format_config(self.to_flat())


def _resolve_seed(flat: dict[str, str], env: dict) -> int:
    if "run.seed" in flat:
        try:
            return int(flat["run.seed"])
        except ValueError as exc:
            raise ConfigError(f"bad value for run.seed: {exc}") from exc
    if ENV_SEED in env:
        try:
            return int(env[ENV_SEED])
        except ValueError as exc:
            raise ConfigError(f"bad value for ${ENV_SEED}: {exc}") from exc
    return 0


def resolve_run_config(
    command: str,
    config_path: str | None,
    flag_overrides: dict[str, str],
    env: dict | None = None,
) -> RunConfig:
    """Merge preset defaults, the config file, and flag overrides.

    ``flag_overrides`` uses the same dotted keys as the file and wins over
    it. The preset named by ``train.preset`` (default ``desk``) supplies the
    baseline TrainConfig.
    """
    env = dict(os.environ) if env is None else env
    flat: dict[str, str] = {}
    if config_path is not None:
        flat.update(parse_config_file(config_path))
    flat.update(flag_overrides)

    preset_name = flat.get("train.preset", "desk")
    if preset_name == "none":
        base_train = TrainConfig()
    else:
        try:
            base_train = preset(preset_name)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    seed = _resolve_seed(flat, env)
    spec = _build(SyntheticSpec, SyntheticSpec(), _section(flat, "data"), "data")
    if "data.rng_seed" not in flat:
        spec = replace(spec, rng_seed=seed)

    # The architecture follows the data unless keys are pinned explicitly.
    arch_overrides = _section(flat, "arch")
    arch = _build(ArchConfig, ArchConfig(), arch_overrides, "arch")
    if "num_identities" not in arch_overrides:
        arch = replace(arch, num_identities=spec.num_identities)
    if "input_size" not in arch_overrides:
        arch = replace(arch, input_size=spec.image_size)

    optim = _build(OptimConfig, base_train.optim, _section(flat, "optim"), "optim")
    weights = _build(LossWeights, base_train.weights, _section(flat, "weights"), "weights")
    augment = _build(AugmentConfig, base_train.augment, _section(flat, "augment"), "augment")
    train_section = {
        k: v for k, v in _section(flat, "train").items() if k != "preset"
    }
    train_cfg = _build(TrainConfig, base_train, train_section, "train")
    train_cfg = replace(
        train_cfg, optim=optim, weights=weights, augment=augment
    )
    if "train.seed" not in flat:
        train_cfg = replace(train_cfg, seed=seed)
    eval_cfg = _build(EvalConfig, EvalConfig(), _section(flat, "eval"), "eval")

    synthetic = flat.get("run.synthetic", "false").lower() in _TRUE
    return RunConfig(
        command=command,
        out_dir=flat.get("run.out_dir", "."),
        seed=seed,
        synthetic=synthetic,
        data_dir=flat.get("run.data_dir"),
        spec=spec,
        arch=arch,
        train=train_cfg,
        eval=eval_cfg,
        explicit=frozenset(flat),
    )
