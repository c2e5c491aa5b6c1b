"""Run configuration: INI-backed sections with deterministic round-tripping.

Every field carries a default, so an empty file (or no file) is a valid
configuration. Values are written in a canonical form, which makes the
serialized text — and therefore its hash — stable across load/save cycles.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import types
from dataclasses import dataclass, field, fields
from typing import get_args, get_origin, get_type_hints

from .errors import InputError
from .exchange import CostSchedule
from .trainer import TrainConfig


@dataclass
class DataSection:
    """Where prices come from and where the aligned panel is cached."""

    source: str = "prices.csv"
    cache: str = "panel.npz"
    universe: list = field(default_factory=list)  # empty = packaged list


@dataclass
class GridSection:
    """Lookback length (in periods) and trading-period size (in days)."""

    periods_window: int = 50
    days_per_period: int = 5


@dataclass
class CostsSection:
    commission_rate: float = 0.0005
    cash_lending_rate_annual: float = 0.03
    stock_lending_rate_annual: float = 0.03
    days_per_year: int = 252


@dataclass
class TrainSection:
    lambda1: float = 0.2
    lambda2: float = 0.002
    lambda3: float = 1.0
    learning_rate: float = 1e-05
    minibatch: int = 128
    target_step: int = 1080
    total_steps: int = 300000
    clip_norm: float | None = 1000.0


@dataclass
class PolicySection:
    depth: int = 6
    head_hidden: int = 3712
    tau: float = 1.0
    attn_scale: float = 1.0
    mlp_hidden: int | None = None


@dataclass
class AblationSection:
    """Variant switches; all off reproduces the full agent."""

    positional_encoding: bool = False  # V1
    maximize_rho: bool = False         # V3
    softmax_head: bool = False         # V4
    one_day_period: bool = False       # V5


@dataclass
class WindowsSection:
    train_start: str = "2018-01-01"
    train_end: str = "2020-12-31"
    backtest_start: str = "2021-01-01"
    backtest_days: int = 120


@dataclass
class RunSection:
    seed: int = 0
    output_dir: str = "runs"
    initial_amount: float = 100000000.0


_SECTIONS = [
    ("data", DataSection),
    ("grid", GridSection),
    ("costs", CostsSection),
    ("train", TrainSection),
    ("policy", PolicySection),
    ("ablation", AblationSection),
    ("windows", WindowsSection),
    ("run", RunSection),
]

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _parser_for(tp):
    """Build a string→value parser for one annotated field type."""
    origin = get_origin(tp)
    if origin is types.UnionType:  # e.g. float | None
        inner = [a for a in get_args(tp) if a is not type(None)]
        if len(inner) != 1:
            raise TypeError(f"unsupported union {tp}")
        base = _parser_for(inner[0])

        def parse_opt(raw: str):
            return None if raw.strip().lower() in ("none", "") else base(raw)
        return parse_opt
    if origin is list or tp is list:
        return lambda raw: [x.strip() for x in raw.split(",") if x.strip()]
    if tp is bool:
        def parse_bool(raw: str):
            low = raw.strip().lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise InputError(f"not a boolean: {raw!r}")
        return parse_bool
    if tp is int:
        return lambda raw: int(raw.strip())
    if tp is float:
        return lambda raw: float(raw.strip())
    if tp is str:
        return lambda raw: raw.strip()
    raise TypeError(f"unsupported config field type {tp}")


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return str(value)


def _field_parsers(section_cls) -> dict:
    hints = get_type_hints(section_cls)
    return {f.name: _parser_for(hints[f.name]) for f in fields(section_cls)}


_PARSERS = {name: _field_parsers(cls) for name, cls in _SECTIONS}

# ablation flag -> variant tag, in reporting order
_VARIANT_TAGS = [
    ("positional_encoding", "V1"),
    ("maximize_rho", "V3"),
    ("softmax_head", "V4"),
    ("one_day_period", "V5"),
]


@dataclass
class RunConfig:
    """Everything a run needs, grouped by concern."""

    data: DataSection = field(default_factory=DataSection)
    grid: GridSection = field(default_factory=GridSection)
    costs: CostsSection = field(default_factory=CostsSection)
    train: TrainSection = field(default_factory=TrainSection)
    policy: PolicySection = field(default_factory=PolicySection)
    ablation: AblationSection = field(default_factory=AblationSection)
    windows: WindowsSection = field(default_factory=WindowsSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self):
        self.validate()

    # ----------------------------------------------------------------- checks
    def validate(self):
        w = self.windows
        if w.train_end > w.backtest_start:
            raise InputError(
                f"training window ends {w.train_end}, after the backtest "
                f"start {w.backtest_start}")
        if w.train_start >= w.train_end:
            raise InputError("train_start must precede train_end")
        if w.backtest_days < 1:
            raise InputError("backtest_days must be positive")
        if self.grid.periods_window < 1 or self.grid.days_per_period < 1:
            raise InputError("grid dimensions must be positive")
        if self.run.initial_amount <= 0:
            raise InputError("initial_amount must be positive")
        if self.run.seed < 0:
            raise InputError("seed must be non-negative")

    # ------------------------------------------------------------ derivations
    @property
    def effective_days_per_period(self) -> int:
        """Period length after ablation: the one-day variant forces 1."""
        return 1 if self.ablation.one_day_period else self.grid.days_per_period

    def variant_label(self) -> str:
        tags = [tag for flag, tag in _VARIANT_TAGS if getattr(self.ablation, flag)]
        return "BDA" if not tags else "BDA-" + "+".join(tags)

    def build_cost_schedule(self) -> CostSchedule:
        c = self.costs
        return CostSchedule(
            commission_rate=c.commission_rate,
            cash_lending_rate_annual=c.cash_lending_rate_annual,
            stock_lending_rate_annual=c.stock_lending_rate_annual,
            period_days=self.effective_days_per_period,
            days_per_year=c.days_per_year,
        )

    def build_train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            lambda1=t.lambda1, lambda2=t.lambda2, lambda3=t.lambda3,
            learning_rate=t.learning_rate, minibatch=t.minibatch,
            target_step=t.target_step, total_steps=t.total_steps,
            seed=self.run.seed, clip_norm=t.clip_norm,
        )

    # ---------------------------------------------------------- serialization
    def to_mapping(self) -> dict:
        """Nested dict of native values (JSON-safe), section by section."""
        out = {}
        for name, _cls in _SECTIONS:
            sec = getattr(self, name)
            out[name] = {f.name: getattr(sec, f.name) for f in fields(sec)}
        return out

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RunConfig":
        kwargs = {}
        for name, sec_cls in _SECTIONS:
            raw = dict(mapping.get(name, {}))
            allowed = {f.name for f in fields(sec_cls)}
            unknown = set(raw) - allowed
            if unknown:
                raise InputError(f"unknown keys in [{name}]: {sorted(unknown)}")
            kwargs[name] = sec_cls(**raw)
        extra = set(mapping) - {name for name, _ in _SECTIONS}
        if extra:
            raise InputError(f"unknown config sections: {sorted(extra)}")
        return cls(**kwargs)

    def to_ini(self) -> str:
        buf = io.StringIO()
        for name, _cls in _SECTIONS:
            sec = getattr(self, name)
            buf.write(f"[{name}]\n")
            for f in fields(sec):
                buf.write(f"{f.name} = {_format_value(getattr(sec, f.name))}\n")
            buf.write("\n")
        return buf.getvalue()

    def save_ini(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_ini())

    @classmethod
    def from_ini_text(cls, text: str, overrides: dict | None = None) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise InputError(f"bad config syntax: {exc}") from exc
        raw: dict = {name: {} for name, _ in _SECTIONS}
        for section in parser.sections():
            if section not in raw:
                raise InputError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                if key not in _PARSERS[section]:
                    raise InputError(f"unknown key {key!r} in [{section}]")
                raw[section][key] = value
        for dotted, value in (overrides or {}).items():
            if "." not in dotted:
                raise InputError(f"override {dotted!r} must look like section.key")
            section, key = dotted.split(".", 1)
            if section not in raw or key not in _PARSERS[section]:
                raise InputError(f"unknown override target {dotted!r}")
            raw[section][key] = str(value)
        kwargs = {}
        for name, sec_cls in _SECTIONS:
            parsed = {key: _PARSERS[name][key](val) for key, val in raw[name].items()}
            kwargs[name] = sec_cls(**parsed)
        return cls(**kwargs)

    @classmethod
    def from_ini(cls, path, overrides: dict | None = None) -> "RunConfig":
        try:
            with open(path) as fh:
                text = fh.read()
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}") from None
        return cls.from_ini_text(text, overrides)

    @classmethod
    def default(cls, overrides: dict | None = None) -> "RunConfig":
        return cls.from_ini_text("", overrides)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()
