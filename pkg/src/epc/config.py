"""Flat `key = value` experiment configuration with dotted section names.

Example::

    # food collection curriculum
    game.kind = food-collection
    epc.scales = 3,6,12
    epc.k = 2
    trainer.episodes = 300

Unknown keys are rejected; every omitted key falls back to the training
defaults (Adam 0.01, gamma 0.95, tau 0.01, batch 1024, update every 100
samples, buffer one million).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .envs import GAME_KINDS, GameConfig, make_game
from .errors import ConfigError
from .evolution import StageConfig
from .maddpg import TrainerConfig
from .nets import NetSpec, net_spec_for


def _parse_scale(token: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in str(token).split("-"))
    except ValueError:
        raise ConfigError(f"bad scale token {token!r}; expected N or A-B") from None


def _parse_scales(token: str) -> tuple[tuple[int, ...], ...]:
    return tuple(_parse_scale(p.strip()) for p in str(token).split(",") if p.strip())


def _parse_c(token: str):
    if str(token).strip().lower() == "max":
        return None
    return int(token)


# key -> (attribute, parser, default)
_KEYS = {
    "game.kind": ("game_kind", str, None),
    "game.scale": ("scale", _parse_scale, None),
    "game.landmarks": ("landmarks", int, None),
    "game.horizon": ("horizon", int, 25),
    "game.dt": ("dt", float, 0.1),
    "game.damping": ("damping", float, 0.25),
    "game.accel_gain": ("accel_gain", float, 5.0),
    "game.world_half_extent": ("world_half_extent", float, 1.0),
    "game.landmark_radius": ("landmark_radius", float, 0.03),
    "game.shaping": ("shaping", float, 0.05),
    "trainer.lr": ("lr", float, 0.01),
    "trainer.gamma": ("gamma", float, 0.95),
    "trainer.tau": ("tau", float, 0.01),
    "trainer.batch": ("batch", int, 1024),
    "trainer.update_every": ("update_every", int, 100),
    "trainer.noise": ("noise", float, 0.1),
    "trainer.buffer": ("buffer", int, 1_000_000),
    "trainer.episodes": ("episodes", int, 1000),
    "net.embed_dim": ("embed_dim", int, 64),
    "net.key_dim": ("key_dim", int, 32),
    "net.hidden_dim": ("hidden_dim", int, 64),
    "epc.scales": ("stage_scales", _parse_scales, None),
    "epc.episodes_first": ("episodes_first", int, None),
    "epc.episodes_stage": ("episodes_stage", int, None),
    "epc.k": ("k", int, 2),
    "epc.c": ("c", _parse_c, None),
    "epc.eval_episodes": ("eval_episodes", int, 100),
    "epc.opponent_samples": ("opponent_samples", int, None),
    "eval.episodes": ("tournament_episodes", int, 10_000),
    "run.seed": ("seed", int, 0),
    "run.workers": ("workers", int, 1),
    "run.out": ("out_dir", str, "out"),
}


@dataclass
class ExperimentConfig:
    game_kind: str | None = None
    scale: tuple[int, ...] | None = None
    landmarks: int | None = None
    horizon: int = 25
    dt: float = 0.1
    damping: float = 0.25
    accel_gain: float = 5.0
    world_half_extent: float = 1.0
    landmark_radius: float = 0.03
    shaping: float = 0.05
    lr: float = 0.01
    gamma: float = 0.95
    tau: float = 0.01
    batch: int = 1024
    update_every: int = 100
    noise: float = 0.1
    buffer: int = 1_000_000
    episodes: int = 1000
    embed_dim: int = 64
    key_dim: int = 32
    hidden_dim: int = 64
    stage_scales: tuple[tuple[int, ...], ...] | None = None
    episodes_first: int | None = None
    episodes_stage: int | None = None
    k: int = 2
    c: int | None = None
    eval_episodes: int = 100
    opponent_samples: int | None = None
    tournament_episodes: int = 10_000
    seed: int = 0
    workers: int = 1
    out_dir: str = "out"

    def require_game_kind(self) -> str:
        if self.game_kind is None:
            raise ConfigError("missing required key game.kind")
        if self.game_kind not in GAME_KINDS:
            raise ConfigError(f"game.kind must be one of {GAME_KINDS}, got {self.game_kind!r}")
        return self.game_kind

    def _game_overrides(self) -> dict:
        out = dict(
            horizon=self.horizon,
            dt=self.dt,
            damping=self.damping,
            accel_gain=self.accel_gain,
            world_half_extent=self.world_half_extent,
            landmark_radius=self.landmark_radius,
            shaping_coef=self.shaping,
        )
        if self.landmarks is not None:
            out["n_landmarks"] = self.landmarks
        return out

    def game_config(self, scale: tuple[int, ...] | None = None) -> GameConfig:
        kind = self.require_game_kind()
        use = scale or self.scale
        if use is None:
            raise ConfigError("missing required key game.scale")
        return make_game(kind, use if len(use) > 1 else use[0], **self._game_overrides())

    def game_factory(self):
        kind = self.require_game_kind()
        overrides = self._game_overrides()
        overrides.pop("n_landmarks", None)  # landmark rule must follow the scale

        def factory(scale: tuple[int, ...]) -> GameConfig:
            return make_game(kind, scale if len(scale) > 1 else scale[0], **overrides)

        return factory

    def trainer_config(self, episodes: int | None = None) -> TrainerConfig:
        return TrainerConfig(
            lr=self.lr,
            gamma=self.gamma,
            tau=self.tau,
            batch_size=self.batch,
            update_every=self.update_every,
            noise_sigma=self.noise,
            buffer_capacity=self.buffer,
            episodes=self.episodes if episodes is None else episodes,
        )

    def stage_config(self, vanilla: bool = False) -> StageConfig:
        if self.stage_scales is None:
            raise ConfigError("missing required key epc.scales")
        if self.episodes_first is None or self.episodes_stage is None:
            raise ConfigError("missing required keys epc.episodes_first / epc.episodes_stage")
        return StageConfig(
            scales=self.stage_scales,
            episodes_first=self.episodes_first,
            episodes_stage=self.episodes_stage,
            k=1 if vanilla else self.k,
            c=1 if vanilla else self.c,
            eval_episodes=self.eval_episodes,
            opponent_samples=None if vanilla else self.opponent_samples,
        )

    def net_spec(self, config: GameConfig) -> NetSpec:
        return net_spec_for(
            config, embed_dim=self.embed_dim, key_dim=self.key_dim, hidden_dim=self.hidden_dim
        )


def parse_config_text(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        attr, parser, _ = _KEYS[key]
        try:
            setattr(cfg, attr, parser(value))
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return cfg


def load_experiment_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
