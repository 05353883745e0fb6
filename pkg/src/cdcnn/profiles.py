"""Named run profiles and their JSON form."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .cnc import TrainConfig
from .datagen import GenConfig, null_signal
from .evaluation import Experiment
from .model import ModelConfig


class ProfileError(ValueError):
    """Profile file that cannot be used; the message says what to fix."""


@dataclass(frozen=True)
class EvalSettings:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    label_sizes: tuple[int, ...] = (2000, 1000, 500, 250)
    days_points: tuple[int, ...] = (1, 5, 10, 15, 20)
    threshold: float = 0.5
    # wall-clock columns make reports machine dependent, so they are opt-in
    timing: bool = False

    def __post_init__(self):
        for name in ("seeds", "label_sizes", "days_points"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")


@dataclass(frozen=True)
class RunProfile:
    name: str
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    generation_only: bool = False

    def __post_init__(self):
        if (self.model.I, self.model.J) != (self.gen.I, self.gen.J):
            raise ProfileError(f"profile {self.name!r}: model grid {self.model.I}x{self.model.J} "
                               f"does not match generator grid {self.gen.I}x{self.gen.J}")

    def experiment(self) -> Experiment:
        if self.generation_only:
            raise ProfileError(f"profile {self.name!r} is for data generation only; pick a trainable profile")
        return Experiment(self.gen, self.model, self.train, self.eval.timing, self.eval.threshold)

    def with_seed(self, seed: int) -> "RunProfile":
        return replace(self, gen=replace(self.gen, seed=int(seed)), train=replace(self.train, seed=int(seed)))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "gen": self.gen.to_dict(),
            "model": asdict(self.model),
            "train": asdict(self.train),
            "eval": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.eval).items()},
            "generation_only": self.generation_only,
        }

    @classmethod
    def from_dict(cls, d: dict, base: "RunProfile | None" = None) -> "RunProfile":
        """Build from a mapping; sections missing from ``d`` come from ``base``.

        Every section is checked for unknown keys.
        """
        if not isinstance(d, dict):
            raise ProfileError("profile must be a JSON object")
        allowed = {"name", "base", "gen", "model", "train", "eval", "generation_only"}
        unknown = set(d) - allowed
        if unknown:
            raise ProfileError(f"unknown profile keys: {sorted(unknown)}")
        base = base or RunProfile("custom")
        try:
            gen = GenConfig.from_dict({**base.gen.to_dict(), **_section(d, "gen", GenConfig)})
            model = ModelConfig(**{**asdict(base.model), **_section(d, "model", ModelConfig)})
            train = TrainConfig.from_dict({**asdict(base.train), **_section(d, "train", TrainConfig)})
            ev = EvalSettings(**{**asdict(base.eval), **_section(d, "eval", EvalSettings)})
            return cls(str(d.get("name", base.name)), gen, model, train, ev,
                       bool(d.get("generation_only", base.generation_only)))
        except ProfileError:
            raise
        except (TypeError, ValueError) as exc:
            raise ProfileError(str(exc)) from exc


def _section(d: dict, key: str, cls) -> dict:
    section = d.get(key, {})
    if not isinstance(section, dict):
        raise ProfileError(f"profile section {key!r} must be an object")
    unknown = set(section) - {f.name for f in fields(cls)}
    if unknown:
        raise ProfileError(f"unknown keys in {key!r}: {sorted(unknown)}")
    return section


def _paper_scale() -> RunProfile:
    I, J = 88, 115
    gen = GenConfig(I=I, J=J, downtown_center=(43.5, 57.0), ring_radius=25.0,
                    industrial_zones=((15, 20), (70, 18), (16, 95), (72, 96)),
                    kernel_scale=4.0, enclave_size=4)
    return RunProfile("paper-scale", gen=gen, model=ModelConfig(I=I, J=J), generation_only=True)


PROFILES = {
    "desk-default": RunProfile("desk-default"),
    "null-signal": RunProfile("null-signal", gen=null_signal(GenConfig())),
    "paper-scale": _paper_scale(),
}


def get_profile(name_or_path: str) -> RunProfile:
    """A built-in profile by name, or a JSON profile file.

    A file may name a built-in ``"base"`` profile and override sections.
    """
    if name_or_path in PROFILES:
        return PROFILES[name_or_path]
    path = Path(name_or_path)
    if not path.exists():
        raise ProfileError(f"unknown profile {name_or_path!r}; use one of {sorted(PROFILES)} or a JSON file path")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ProfileError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from exc
    base_name = d.get("base", "desk-default") if isinstance(d, dict) else None
    if base_name is not None and base_name not in PROFILES:
        raise ProfileError(f"{path}: unknown base profile {base_name!r}")
    try:
        return RunProfile.from_dict(d, PROFILES.get(base_name))
    except ProfileError as exc:
        raise ProfileError(f"{path}: {exc}") from exc


def save_profile(profile: RunProfile, path) -> None:
    Path(path).write_text(json.dumps(profile.to_dict(), indent=2, sort_keys=True) + "\n")
