"""Run configuration: defaults, presets, JSON round-trip and validation."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields

logger = logging.getLogger(__name__)

TOGGLE_ORDER = ("qci", "cci", "qp", "cp", "cg", "dp")


@dataclass(frozen=True)
class Toggles:
    qci: bool = True
    cci: bool = True
    qp: bool = True
    cp: bool = True
    cg: bool = True
    dp: bool = False
    gold_first: bool = False

    @property
    def bitmap(self) -> str:
        return "".join("1" if getattr(self, k) else "0" for k in TOGGLE_ORDER)

    @property
    def label(self) -> str:
        on = [k.upper() for k in TOGGLE_ORDER if getattr(self, k)]
        return "+".join(on) if on else "none"

    @classmethod
    def from_bitmap(cls, bits: str, gold_first: bool = False) -> "Toggles":
        if len(bits) != len(TOGGLE_ORDER) or set(bits) - {"0", "1"}:
            raise ValueError(f"toggle bitmap must be {len(TOGGLE_ORDER)} binary digits ({','.join(TOGGLE_ORDER)})")
        return cls(**{k: b == "1" for k, b in zip(TOGGLE_ORDER, bits)}, gold_first=gold_first)

    def replace(self, **kw) -> "Toggles":
        return Toggles(**{**asdict(self), **kw})


# best settings per dataset for the re-ranking depth and loss weight
PRESETS = {
    "wiki27k": {"K": 20, "lam": 0.1, "kind": "curated", "qp": False, "cp": False, "dp": True},
    "fb15k-237-n": {"K": 20, "lam": 0.1, "kind": "curated", "qp": False, "cp": False, "dp": True},
    "reverb20k": {"K": 30, "lam": 0.3, "kind": "open"},
    "reverb45k": {"K": 30, "lam": 1.0, "kind": "open"},
}

# published dataset statistics: entities, relations, train, valid, test
PUBLISHED_COUNTS = {
    "wiki27k": (27122, 62, 74793, 10121, 10122),
    "fb15k-237-n": (13104, 93, 87282, 7041, 8226),
    "reverb20k": (11065, 11058, 15499, 1550, 2325),
    "reverb45k": (27008, 21623, 35970, 3598, 5395),
}

K_CHOICES = (10, 20, 30)
LAMBDA_GRID = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset_dir: str = ""
    kind: str = "curated"
    K: int = 10
    lam: float = 0.1
    K_q: int = 3
    K_c: int = 3
    theta: float = 0.8
    d: int = 32
    d_r: int = 32
    rr_hidden: int | None = None
    kge_epochs: int = 100
    rr_epochs: int = 3
    batch: int = 16
    kge_batch: int = 128
    lr_kge: float = 0.005
    lr_rr: float = 1e-4
    rr_optimizer: str = "sgd"
    seed: int = 0
    toggles: Toggles = field(default_factory=Toggles)
    out_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        if self.kind not in ("curated", "open"):
            raise ConfigError(f"kind must be 'curated' or 'open', got {self.kind!r}")
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if self.K not in K_CHOICES:
            logger.warning("K=%d is outside the usual choices %s", self.K, K_CHOICES)
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"theta must lie in [0, 1], got {self.theta}")
        for name in ("K_q", "K_c", "d", "d_r", "batch", "kge_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.rr_hidden is not None and self.rr_hidden < 1:
            raise ConfigError("rr_hidden must be positive")
        if self.rr_optimizer not in ("sgd", "adam"):
            raise ConfigError(f"rr_optimizer must be 'sgd' or 'adam', got {self.rr_optimizer!r}")
        for name in ("kge_epochs", "rr_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["toggles"] = asdict(self.toggles)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        if "lambda" in raw:
            if "lam" in raw:
                raise ConfigError("give either 'lambda' or 'lam', not both")
            raw["lam"] = raw.pop("lambda")
        known = {f.name for f in fields(cls)}
        preset = raw.pop("preset", None)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        toggles = raw.pop("toggles", {}) or {}
        if not isinstance(toggles, dict):
            raise ConfigError("toggles must be an object")
        tkeys = {f.name for f in fields(Toggles)}
        bad = set(toggles) - tkeys
        if bad:
            raise ConfigError(f"unknown toggle keys: {sorted(bad)}")
        base = {}
        tbase = {}
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
            for k, v in PRESETS[preset].items():
                (tbase if k in tkeys else base)[k] = v
        cfg = cls(**{**base, **raw}, toggles=Toggles(**{**tbase, **toggles}))
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
