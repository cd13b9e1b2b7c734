"""Flat dotted-key run configuration.

Grammar (one entry per line):

    # comment
    section.key = value

Values are plain strings; lists are comma-separated ("1,1,0"); booleans are
true/false. ``RunConfig`` wraps the raw map with typed getters and builds the
model / pipeline / optimizer / data objects, so a config file fully
determines a run. ``render`` writes the resolved map back out, which every
command stores next to its artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .blocks import LayerSpec, Model, build_model, dense, init_params, relu, tanh
from .data import Dataset, TeacherSpec, gen_teacher_dataset, load_idx
from .optim import LrSchedule
from .pipeline import PipelineConfig, validate_config


class ConfigParseError(ValueError):
    pass


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigParseError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigParseError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def load_config_file(path) -> dict[str, str]:
    with open(path) as f:
        return parse_config_text(f.read())


def render_config(cfg: dict[str, str]) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def parse_layers(text: str) -> list[LayerSpec]:
    """Parse "dense(64,128), relu, dense(128,10)" into layer specs."""
    layers: list[LayerSpec] = []
    depth = 0
    token = ""
    tokens = []
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            tokens.append(token)
            token = ""
        else:
            token += ch
    if token.strip():
        tokens.append(token)
    for tok in tokens:
        tok = tok.strip()
        if tok == "relu":
            layers.append(relu())
        elif tok == "tanh":
            layers.append(tanh())
        elif tok.startswith("dense(") and tok.endswith(")"):
            parts = [p.strip() for p in tok[len("dense(") : -1].split(",")]
            if len(parts) not in (2, 3):
                raise ConfigParseError(f"bad dense spec: {tok!r}")
            bias = True
            if len(parts) == 3:
                bias = _parse_bool(parts[2], f"dense bias in {tok!r}")
            layers.append(dense(int(parts[0]), int(parts[1]), bias))
        else:
            raise ConfigParseError(f"unknown layer token: {tok!r}")
    if not layers:
        raise ConfigParseError("empty layer list")
    return layers


def _parse_bool(value: str, what: str) -> bool:
    v = value.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ConfigParseError(f"{what}: expected true/false, got {value!r}")


@dataclass
class RunConfig:
    """Typed view over the flat key map, with defaults filled in."""

    raw: dict[str, str] = field(default_factory=dict)

    # -- typed getters ------------------------------------------------------

    def get(self, key: str, default: str | None = None) -> str:
        if key in self.raw:
            return self.raw[key]
        if default is None:
            raise ConfigParseError(f"missing required config key: {key}")
        return default

    def get_int(self, key: str, default: int | None = None) -> int:
        raw = self.get(key, None if default is None else str(default))
        try:
            return int(raw)
        except ValueError:
            raise ConfigParseError(f"{key}: expected integer, got {raw!r}") from None

    def get_float(self, key: str, default: float | None = None) -> float:
        raw = self.get(key, None if default is None else repr(default))
        try:
            return float(raw)
        except ValueError:
            raise ConfigParseError(f"{key}: expected number, got {raw!r}") from None

    def get_bool(self, key: str, default: bool) -> bool:
        return _parse_bool(self.get(key, "true" if default else "false"), key)

    def get_ints(self, key: str, default: str | None = None) -> list[int]:
        raw = self.get(key, default)
        if raw.strip() == "":
            return []
        try:
            return [int(v.strip()) for v in raw.split(",")]
        except ValueError:
            raise ConfigParseError(f"{key}: expected comma-separated integers, got {raw!r}") from None

    def get_floats(self, key: str, default: str | None = None) -> list[float]:
        raw = self.get(key, default)
        if raw.strip() == "":
            return []
        try:
            return [float(v.strip()) for v in raw.split(",")]
        except ValueError:
            raise ConfigParseError(f"{key}: expected comma-separated numbers, got {raw!r}") from None

    # -- section builders ---------------------------------------------------

    def build_model(self) -> Model:
        layers = parse_layers(self.get("model.layers"))
        boundaries = self.get_ints("model.boundaries", "")
        model = build_model(layers, boundaries)
        init_params(model, self.get_int("model.init_seed", self.get_int("train.seed", 0)))
        return model

    def build_pipeline(self) -> PipelineConfig:
        return validate_config(
            self.get_ints("pipeline.p"),
            self.get_ints("pipeline.m"),
            warmup=self.get("pipeline.warmup", "faithful_zero_updates"),
            overlap_recompute=self.get_bool("pipeline.overlap_recompute", True),
        )

    def build_schedule(self) -> LrSchedule:
        steps = self.get_ints("optimizer.lr_decay_steps", "")
        factor = self.get_float("optimizer.lr_decay_factor", 0.1)
        return LrSchedule(
            base=self.get_float("optimizer.lr", 0.01),
            decays=tuple((s, factor) for s in steps),
        )

    def build_dataset(self, split: str = "train") -> Dataset:
        source = self.get("data.source", "teacher")
        if source == "teacher":
            dims = tuple(self.get_ints("data.teacher_dims"))
            n_train = self.get_int("data.n_train")
            n_test = self.get_int("data.n_test", 0)
            seed = self.get_int("data.seed", 0)
            # one stream: teacher params, then train inputs, then test inputs
            full = gen_teacher_dataset(TeacherSpec(dims=dims, n=n_train + n_test, seed=seed))
            if split == "train":
                return Dataset(full.inputs[:n_train], full.labels[:n_train])
            return Dataset(full.inputs[n_train:], full.labels[n_train:])
        if source == "idx":
            import numpy as np

            x = load_idx(self.get(f"data.{split}_images"))
            y = load_idx(self.get(f"data.{split}_labels"))
            # label files are u8, which load_idx scales to [0,1]; undo that
            return Dataset(x.reshape(x.shape[0], -1), np.rint(y * 255.0).astype(np.int64).reshape(-1))
        raise ConfigParseError(f"data.source must be 'teacher' or 'idx', got {source!r}")

    def resolved(self, defaults: dict[str, str]) -> dict[str, str]:
        out = dict(defaults)
        out.update(self.raw)
        return out
