"""Run configuration: an INI file with optional sections, overridable from flags.

Example::

    [data]
    path = ratings.tsv
    format = auto            ; auto | tsv | csv
    positive_rule = all      ; all | >=X | >X
    ratios = 0.6, 0.2, 0.2

    [run]
    seed = 0
    out = runs/ciao

    [neighbors]
    K_u = 15
    K_v = 15
    l_u = 64
    l_v = 64
    weight_mode = paper      ; paper | common | none
    neighbor_mode = semantic ; semantic | cooccurrence
    line_epochs = 50
    line_negatives = 5
    accelerated = false

    [model]
    backend = hyperbolic     ; hyperbolic | euclidean
    dim = 64
    layers = 1               ; defaults to 2 for the euclidean backend
    tau = 0.1
    c = 1.0
    r = 2.0
    t = 1.0
    lr = 0.001
    lr_layers =              ; empty: same as lr
    batch = 1024
    epochs = 100
    patience = 10
    ablate =                 ; comma list of no_semantic, no_history, uniform_attention

    [eval]
    ks = 2, 5, 10, 20, 50, 100
    n_negatives = 1000
    repeats = 1
    n_bins = 4
    n_groups = 4
    sample_n = 400
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import HyperParams
from .neighbors import WEIGHT_MODES

ABLATIONS = ("no_semantic", "no_history", "uniform_attention")
NEIGHBOR_MODES = ("semantic", "cooccurrence")
BACKENDS = ("hyperbolic", "euclidean")


class ConfigError(ValueError):
    pass


@dataclass
class NeighborConfig:
    K_u: int = 15
    K_v: int = 15
    l_u: int = 64
    l_v: int = 64
    weight_mode: str = "paper"
    neighbor_mode: str = "semantic"
    line_epochs: int = 50
    line_negatives: int = 5
    accelerated: bool = False


@dataclass
class EvalConfig:
    ks: tuple = (2, 5, 10, 20, 50, 100)
    n_negatives: int = 1000
    repeats: int = 1
    n_bins: int = 4
    n_groups: int = 4
    sample_n: int = 400


@dataclass
class RunConfig:
    path: str = ""
    format: str = "auto"
    positive_rule: str = "all"
    ratios: tuple = (0.6, 0.2, 0.2)
    seed: int = 0
    out: str = "hncr-out"
    neighbors: NeighborConfig = field(default_factory=NeighborConfig)
    model: dict = field(default_factory=dict)
    ablate: tuple = ()
    eval: EvalConfig = field(default_factory=EvalConfig)

    def hyperparams(self) -> HyperParams:
        m = dict(self.model)
        m.update(K_u=self.neighbors.K_u, K_v=self.neighbors.K_v, seed=self.seed)
        for flag in self.ablate:
            m[flag] = True
        return HyperParams.from_dict(m)

    @property
    def variant(self) -> str:
        name = self.hyperparams().variant
        if self.neighbors.neighbor_mode == "cooccurrence":
            name += "-C"
        name += {"paper": "", "common": "-N", "none": "-0"}[self.neighbors.weight_mode]
        return name

    def validate(self) -> "RunConfig":
        nb = self.neighbors
        if nb.weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"weight_mode must be one of {WEIGHT_MODES}, got {nb.weight_mode!r}")
        if nb.neighbor_mode not in NEIGHBOR_MODES:
            raise ConfigError(f"neighbor_mode must be one of {NEIGHBOR_MODES}, got {nb.neighbor_mode!r}")
        if self.model.get("backend", "hyperbolic") not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}")
        bad = set(self.ablate) - set(ABLATIONS)
        if bad:
            raise ConfigError(f"unknown ablation(s) {sorted(bad)}; choose from {ABLATIONS}")
        if min(nb.K_u, nb.K_v) < 0 or min(nb.l_u, nb.l_v) < 1:
            raise ConfigError("neighbor counts must be >= 0 and latent sizes >= 1")
        if self.eval.repeats < 1 or any(k < 1 for k in self.eval.ks):
            raise ConfigError("repeats and every K must be positive")
        try:
            self.hyperparams()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model settings: {exc}") from exc
        return self


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(" ", "").split(",") if x)


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.replace(" ", "").split(",") if x)


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off", ""):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_MODEL_TYPES = {f.name: f.type for f in fields(HyperParams)}


def _model_value(key: str, text: str):
    kind = str(_MODEL_TYPES[key])
    if text.strip() == "" and "None" in kind:
        return None
    if "bool" in kind:
        return _bool(text)
    if "int" in kind:
        return int(text)
    if "float" in kind:
        return float(text)
    return text.strip()


def load_config(path=None, overrides=()) -> RunConfig:
    """Read an INI config, then apply ``section.key=value`` overrides.

    Without ``path`` only the defaults and overrides apply. A relative
    data path in the file is resolved against the file's directory; one
    given as an override is taken as is.
    """
    cfg = RunConfig()
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    parser.optionxform = str  # keys such as K_u are case sensitive
    base = Path(".")
    if path is not None:
        path = Path(path)
        base = path.parent
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    path_from_file = parser.has_option("data", "path")
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, value.strip())
        if (section, name) == ("data", "path"):
            path_from_file = False
    if not path_from_file:
        base = Path(".")

    known = {"data", "run", "neighbors", "model", "eval"}
    extra = set(parser.sections()) - known
    if extra:
        raise ConfigError(f"unknown config section(s) {sorted(extra)}")
    try:
        if parser.has_section("data"):
            d = parser["data"]
            _check_keys(d, {"path", "format", "positive_rule", "ratios"}, "data")
            if "path" in d:
                p = Path(d["path"])
                cfg.path = str(p if p.is_absolute() else base / p)
            cfg.format = d.get("format", cfg.format)
            cfg.positive_rule = d.get("positive_rule", cfg.positive_rule)
            if "ratios" in d:
                cfg.ratios = _floats(d["ratios"])
        if parser.has_section("run"):
            r = parser["run"]
            _check_keys(r, {"seed", "out"}, "run")
            cfg.seed = int(r.get("seed", cfg.seed))
            cfg.out = r.get("out", cfg.out)
        if parser.has_section("neighbors"):
            s = parser["neighbors"]
            types = {f.name: f.type for f in fields(NeighborConfig)}
            _check_keys(s, set(types), "neighbors")
            for k, v in s.items():
                t = str(types[k])
                setattr(cfg.neighbors, k, _bool(v) if "bool" in t else int(v) if "int" in t else v.strip())
        if parser.has_section("model"):
            s = parser["model"]
            # seed lives in [run], K_u/K_v in [neighbors]
            _check_keys(s, set(_MODEL_TYPES) - {"seed", "K_u", "K_v"} | {"ablate"}, "model")
            for k, v in s.items():
                if k == "ablate":
                    cfg.ablate = tuple(x for x in v.replace(" ", "").split(",") if x)
                else:
                    cfg.model[k] = _model_value(k, v)
        if parser.has_section("eval"):
            s = parser["eval"]
            _check_keys(s, {f.name for f in fields(EvalConfig)}, "eval")
            for k, v in s.items():
                setattr(cfg.eval, k, _ints(v) if k == "ks" else int(v))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path or 'config'}: {exc}") from exc
    return cfg


def _check_keys(section, allowed: set, name: str) -> None:
    unknown = set(section.keys()) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {sorted(unknown)}")


def dump_config(cfg: RunConfig) -> str:
    """Render the effective configuration in the same INI format."""
    hp = cfg.hyperparams()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["data"] = {
        "path": cfg.path,
        "format": cfg.format,
        "positive_rule": cfg.positive_rule,
        "ratios": ", ".join(repr(x) for x in cfg.ratios),
    }
    parser["run"] = {"seed": str(cfg.seed), "out": cfg.out}
    parser["neighbors"] = {k: str(v).lower() if isinstance(v, bool) else str(v) for k, v in asdict(cfg.neighbors).items()}
    model = {}
    for k, v in asdict(hp).items():
        if k in ("seed", "K_u", "K_v") or k in ABLATIONS:
            continue
        model[k] = "" if v is None else str(v).lower() if isinstance(v, bool) else str(v)
    model["ablate"] = ", ".join(cfg.ablate)
    parser["model"] = model
    ev = asdict(cfg.eval)
    ev["ks"] = ", ".join(str(k) for k in cfg.eval.ks)
    parser["eval"] = {k: str(v) for k, v in ev.items()}
    buf = io.StringIO()
    buf.write(f"; effective configuration, variant {cfg.variant}\n")
    parser.write(buf)
    return buf.getvalue()
