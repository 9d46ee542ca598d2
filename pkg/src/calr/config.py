"""Flat key=value run configuration: parsing, validation, canonical output.

The format is a plain text file of dotted keys, one per line:

    train.inter_epochs = 50
    refine.schedule = cosine
    # comments and blank lines are fine; ':' works as a separator too

Unknown keys are rejected rather than ignored, so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .pipeline import TrainConfig
from .synthgen import SynthConfig


class ConfigError(ValueError):
    """A malformed or inconsistent configuration (a usage error, not a bug)."""


_SCHEDULES = ("none", "linear", "polynomial", "exponential", "cosine")
_ARCHS = ("linear", "mlp")


@dataclass(frozen=True)
class _Key:
    kind: type  # int, float, bool or str
    default: object
    help: str
    choices: tuple[str, ...] | None = None


CONFIG_KEYS: dict[str, _Key] = {
    "train.intra_epochs": _Key(int, 20, "per-camera pretraining epochs"),
    "train.inter_epochs": _Key(int, 50, "global training epochs"),
    "train.batch_labels": _Key(int, 4, "distinct clusters per batch (P)"),
    "train.batch_instances": _Key(int, 4, "samples per cluster per batch (K)"),
    "train.lr": _Key(float, 3.5e-4, "learning rate"),
    "train.weight_decay": _Key(float, 5e-4, "decoupled weight decay"),
    "train.eval_every": _Key(int, 5, "epochs between retrieval evaluations"),
    "train.query_fraction": _Key(float, 0.2, "fraction of each identity used as queries"),
    "train.seed": _Key(int, 7, "root seed for every training stream"),
    "train.use_refinement": _Key(bool, True, "enable camera-aware label refinement"),
    "train.use_domain_alignment": _Key(bool, True, "enable adversarial camera alignment"),
    "encoder.arch": _Key(str, "linear", "encoder architecture", _ARCHS),
    "encoder.hidden": _Key(int, 64, "hidden width for the mlp encoder"),
    "encoder.out_dim": _Key(int, 0, "output dimension (0 keeps the input dimension)"),
    "memory.momentum": _Key(float, 0.2, "memory momentum m"),
    "memory.temperature": _Key(float, 0.1, "softmax temperature tau"),
    "graph.k": _Key(int, 15, "neighbors per node in the kNN graph"),
    "graph.mutual": _Key(bool, True, "keep only mutual neighbor edges"),
    "graph.threshold": _Key(float, 0.5, "minimum cosine similarity for an edge"),
    "refine.schedule": _Key(str, "cosine", "discard probability decay shape", _SCHEDULES),
    "refine.p_start": _Key(float, 1.0, "initial discard probability"),
    "refine.p_end": _Key(float, 0.0, "final discard probability"),
    "domain.beta": _Key(float, 1.0, "weight of the domain loss in the total"),
    "domain.lambda": _Key(float, 1.0, "gradient reversal strength"),
    "synth.n_identities": _Key(int, 50, "generated identities"),
    "synth.n_cameras": _Key(int, 6, "generated cameras"),
    "synth.samples_min": _Key(int, 4, "min samples per identity per camera"),
    "synth.samples_max": _Key(int, 8, "max samples per identity per camera"),
    "synth.dim": _Key(int, 32, "embedding dimension"),
    "synth.id_spread": _Key(float, 1.0, "identity direction scale"),
    "synth.cam_shift": _Key(float, 3.0, "camera offset scale"),
    "synth.noise": _Key(float, 0.1, "isotropic noise scale"),
    "synth.missing_rate": _Key(float, 0.2, "chance an identity skips a camera"),
    "synth.seed": _Key(int, 7, "generator seed"),
    "eval.max_rank": _Key(int, 10, "CMC curve length"),
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _coerce(key: str, raw: str):
    spec = CONFIG_KEYS[key]
    raw = raw.strip()
    if not raw:
        raise ConfigError(f"{key}: empty value")
    if spec.kind is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if spec.kind is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if spec.kind is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    value = raw.lower()
    if spec.choices and value not in spec.choices:
        raise ConfigError(f"{key}: expected one of {', '.join(spec.choices)}; got {raw!r}")
    return value


def default_config() -> dict:
    return {key: spec.default for key, spec in CONFIG_KEYS.items()}


def parse_config_text(text: str) -> dict:
    """Parse config text into a full mapping (defaults filled in).

    Raises ConfigError on unknown keys, duplicates, bad syntax or bad values.
    """
    values = default_config()
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        for sep in ("=", ":"):
            if sep in stripped:
                key, _, raw = stripped.partition(sep)
                break
        else:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key = key.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        values[key] = _coerce(key, raw)
    return values


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_config_text(text)


def apply_overrides(values: dict, overrides) -> dict:
    """Apply 'key=value' strings (e.g. from the command line) on top."""
    values = dict(values)
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def format_config(values: dict) -> str:
    """Canonical text for provenance snapshots; parses back to the same mapping."""
    lines = []
    for key in CONFIG_KEYS:
        value = values[key]
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def train_config_from(values: dict) -> TrainConfig:
    try:
        return TrainConfig(
            intra_epochs=values["train.intra_epochs"],
            inter_epochs=values["train.inter_epochs"],
            batch_labels=values["train.batch_labels"],
            batch_instances=values["train.batch_instances"],
            lr=values["train.lr"],
            weight_decay=values["train.weight_decay"],
            momentum=values["memory.momentum"],
            temperature=values["memory.temperature"],
            knn_k=values["graph.k"],
            knn_mutual=values["graph.mutual"],
            knn_threshold=values["graph.threshold"],
            schedule=values["refine.schedule"],
            p_start=values["refine.p_start"],
            p_end=values["refine.p_end"],
            beta=values["domain.beta"],
            grl_lambda=values["domain.lambda"],
            use_refinement=values["train.use_refinement"],
            use_domain_alignment=values["train.use_domain_alignment"],
            encoder_arch=values["encoder.arch"],
            encoder_hidden=values["encoder.hidden"],
            encoder_out_dim=values["encoder.out_dim"],
            eval_every=values["train.eval_every"],
            query_fraction=values["train.query_fraction"],
            seed=values["train.seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def synth_config_from(values: dict) -> SynthConfig:
    try:
        return SynthConfig(
            n_identities=values["synth.n_identities"],
            n_cameras=values["synth.n_cameras"],
            samples_per_id_per_cam=(values["synth.samples_min"], values["synth.samples_max"]),
            dim=values["synth.dim"],
            id_spread=values["synth.id_spread"],
            cam_shift=values["synth.cam_shift"],
            noise=values["synth.noise"],
            missing_rate=values["synth.missing_rate"],
            seed=values["synth.seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
