"""Experiment configuration: flat ``key = value`` lines, diff-friendly.

Keys carry a section prefix (``fl.batch_size``, ``data.n_train``,
``experiment.seeds``, ``site.C.noise_sigma``). Values are plain scalars,
comma lists, or ``true``/``false``; floats are written with ``repr`` so
parse -> serialize -> parse is the identity. Blank lines and ``#``
comments are ignored; unknown keys are errors.
"""

import dataclasses
from dataclasses import dataclass

from .fl import FLConfig, STRATEGIES
from .sites import SMALL_SITE_ID, SiteProfile, default_profiles

__all__ = [
    "ExperimentConfig",
    "parse_config",
    "serialize_config",
    "load_config",
    "build_profiles",
]

PROFILE_FIELDS = ("contrast_gamma", "bias_field_strength", "noise_sigma",
                  "structure_scale", "lesion_probability", "seed")

_SCENARIOS = (1, 2)


@dataclass(frozen=True)
class ExperimentConfig:
    fl: FLConfig = FLConfig()
    sites: tuple = ("A", "B", "C", "D")
    n_train: int = 32
    n_test: int = 8
    data_dir: str = "data"
    autogen: bool = True
    strategies: tuple = ("FLMR",)
    scenarios: tuple = (1, 2)
    seeds: tuple = (0,)
    train_sites: tuple = ()
    test_site: str = ""
    params_path: str = ""
    out_dir: str = "out"
    threads: int = 1
    # ((site_id, field, value), ...) applied over the default profiles
    site_overrides: tuple = ()

    def __post_init__(self):
        if not self.sites or len(set(self.sites)) != len(self.sites):
            raise ValueError("data.sites must be a non-empty list of unique ids")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ValueError(f"unknown strategy {s!r}; choose from {STRATEGIES}")
        for sc in self.scenarios:
            if sc not in _SCENARIOS:
                raise ValueError(f"unknown scenario {sc}; choose from {_SCENARIOS}")
        if not self.seeds:
            raise ValueError("experiment.seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("experiment.seeds must be unique")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("data.n_train and data.n_test must be >= 1")
        if self.threads < 1:
            raise ValueError("experiment.threads must be >= 1")
        for sid in self.train_sites:
            if sid not in self.sites:
                raise ValueError(f"experiment.train_sites names unknown site {sid!r}")
        if self.test_site and self.test_site not in self.sites:
            raise ValueError(f"experiment.test_site names unknown site {self.test_site!r}")
        for sid, fname, _ in self.site_overrides:
            if sid not in self.sites:
                raise ValueError(f"override for unknown site {sid!r}")
            if fname not in PROFILE_FIELDS:
                raise ValueError(f"unknown profile field {fname!r}")


# -- value codecs -------------------------------------------------------------


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def _parse_bool(text, key):
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValueError(f"{key}: expected true or false, got {text!r}")


def _parse_scalar(text, kind, key):
    try:
        if kind is bool:
            return _parse_bool(text, key)
        return kind(text)
    except ValueError as e:
        raise ValueError(f"{key}: {e}") from None


def _parse_list(text, kind, key):
    if not text:
        return ()
    return tuple(_parse_scalar(part.strip(), kind, key) for part in text.split(","))


def _kind_of(tp):
    if tp in (bool, "bool"):
        return bool
    if tp in (float, "float"):
        return float
    return int


_FL_KINDS = {f.name: _kind_of(f.type) for f in dataclasses.fields(FLConfig)}

# top-level keys: name -> (attribute, kind, is_list)
_KEYS = {
    "data.sites": ("sites", str, True),
    "data.n_train": ("n_train", int, False),
    "data.n_test": ("n_test", int, False),
    "data.dir": ("data_dir", str, False),
    "data.autogen": ("autogen", bool, False),
    "experiment.strategies": ("strategies", str, True),
    "experiment.scenarios": ("scenarios", int, True),
    "experiment.seeds": ("seeds", int, True),
    "experiment.train_sites": ("train_sites", str, True),
    "experiment.test_site": ("test_site", str, False),
    "experiment.params_path": ("params_path", str, False),
    "experiment.out": ("out_dir", str, False),
    "experiment.threads": ("threads", int, False),
}


def parse_config(text: str) -> ExperimentConfig:
    fl_values = {}
    top = {}
    overrides = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key.startswith("fl."):
            name = key[3:]
            if name not in _FL_KINDS:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            fl_values[name] = _parse_scalar(value, _FL_KINDS[name], key)
        elif key in _KEYS:
            attr, kind, is_list = _KEYS[key]
            top[attr] = _parse_list(value, kind, key) if is_list else _parse_scalar(value, kind, key)
        elif key.startswith("site."):
            parts = key.split(".")
            if len(parts) != 3:
                raise ValueError(f"line {lineno}: expected site.<id>.<field>, got {key!r}")
            _, sid, fname = parts
            if fname not in PROFILE_FIELDS:
                raise ValueError(f"line {lineno}: unknown profile field {fname!r}")
            kind = int if fname == "seed" else float
            overrides.append((sid, fname, _parse_scalar(value, kind, key)))
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    top["site_overrides"] = tuple(sorted(overrides))
    return ExperimentConfig(fl=FLConfig(**fl_values), **top)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(FLConfig):
        lines.append(f"fl.{f.name} = {_fmt(getattr(cfg.fl, f.name))}")
    for key, (attr, _, _) in _KEYS.items():
        lines.append(f"{key} = {_fmt(getattr(cfg, attr))}")
    for sid, fname, value in cfg.site_overrides:
        lines.append(f"site.{sid}.{fname} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def build_profiles(cfg: ExperimentConfig) -> list:
    """Default profiles for cfg.sites with any overrides applied."""
    base = {p.site_id: p for p in default_profiles(cfg.fl.seed)}
    profiles = []
    for sid in cfg.sites:
        profile = base.get(sid)
        if profile is None:
            profile = SiteProfile(sid, seed=cfg.fl.seed * 1000 + 100 + len(profiles))
        changes = {f: v for s, f, v in cfg.site_overrides if s == sid}
        if changes:
            profile = dataclasses.replace(profile, **changes)
        profiles.append(profile)
    return profiles


def site_train_count(cfg: ExperimentConfig, site_id: str) -> int:
    """Train-set size per site; the designated small site gets 10x fewer."""
    if site_id == SMALL_SITE_ID:
        return max(1, cfg.n_train // 10)
    return cfg.n_train
