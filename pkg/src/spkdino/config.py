"""Run configuration: flat ``section.key = value`` text files.

Unknown keys are rejected.  ``dumps`` writes every key, so the file saved in a
run directory fully determines the run.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig, SegmentPlan, make_ir_bank, make_noise_bank
from .corpus import Manifest, synth_corpus
from .dino import DinoState
from .net import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class CorpusSection:
    n_speakers: int = 20
    utts_per_speaker: int = 50
    duration: float = 6.0
    seed: int = 1
    manifest: str = ""  # a manifest file overrides the synthetic corpus


@dataclass
class AugSection:
    p_pitch: float = 0.0
    pitch_cents: tuple = (-200.0, 200.0)
    p_tempo: float = 0.0
    tempo_ratios: tuple = (0.9, 1.1)
    p_noise_reverb: float = 1.0
    snr_low: float = 5.0
    snr_high: float = 20.0
    bank_seed: int = 7
    n_noises: int = 8
    n_irs: int = 8
    noise_seconds: float = 5.0


@dataclass
class PlanSection:
    n_long: int = 2
    long_seconds: float = 3.0
    n_short: int = 4
    short_seconds: float = 2.0


@dataclass
class FeatureSection:
    n_mels: int = 40
    win: float = 0.025
    hop: float = 0.010


@dataclass
class ModelSection:
    channels: int = 64
    embed_dim: int = 32
    head_hidden: int = 128
    head_layers: int = 2
    bottleneck: int = 32
    out_dim: int = 256
    activation: str = "gelu"
    data_init: bool = True  # per-unit rescaling of the random init on a batch of real inputs
    init_batch: int = 64


@dataclass
class DinoSection:
    tau_s: float = 0.1
    tau_t_start: float = 0.04
    tau_t_end: float = 0.07
    tau_t_warm: float = 0.2
    center_momentum: float = 0.9
    lambda_start: float = 0.996
    lambda_end: float = 1.0
    centering: bool = True


@dataclass
class TrainSection:
    epochs: int = 30
    batch_size: int = 16
    lr_start: float = 0.02
    lr_end: float = 5e-6
    momentum: float = 0.9
    seed: int = 0
    checkpoint_every: int = 1
    mode: str = "dino_pretrain"
    precision: str = "float32"  # compute dtype; master weights are always float64


@dataclass
class FinetuneSection:
    epochs: int = 10
    batch_size: int = 16
    label_fraction: float = 0.2
    lr_start: float = 0.01
    lr_end: float = 1e-5
    aam_margin: float = 0.2
    aam_scale: float = 30.0
    segment_seconds: float = 3.0


@dataclass
class EvalSection:
    n_speakers: int = 10
    utts_per_speaker: int = 10
    duration: float = 6.0
    seed: int = 1000
    trial_seed: int = 0
    cohort_size: int = 200
    top_n: int = 50
    p_target: float = 0.05
    nmi_average: str = "arithmetic"


SECTIONS = {
    "corpus": CorpusSection,
    "aug": AugSection,
    "plan": PlanSection,
    "features": FeatureSection,
    "model": ModelSection,
    "dino": DinoSection,
    "train": TrainSection,
    "finetune": FinetuneSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    aug: AugSection = field(default_factory=AugSection)
    plan: PlanSection = field(default_factory=PlanSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    model: ModelSection = field(default_factory=ModelSection)
    dino: DinoSection = field(default_factory=DinoSection)
    train: TrainSection = field(default_factory=TrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "RunConfig":
        if self.train.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.train.batch_size < 1 or self.finetune.batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.train.mode not in ("dino_pretrain", "aam_finetune"):
            raise ConfigError(f"unknown train.mode {self.train.mode!r}")
        if self.train.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown train.precision {self.train.precision!r}")
        if self.model.init_batch < 2:
            raise ConfigError("model.init_batch must be >= 2")
        if self.finetune.epochs < 0:
            raise ConfigError("finetune.epochs must be >= 0")
        if not 0 < self.finetune.label_fraction <= 1:
            raise ConfigError("finetune.label_fraction must be in (0, 1]")
        if self.eval.nmi_average not in ("arithmetic", "geometric", "max"):
            raise ConfigError(f"unknown eval.nmi_average {self.eval.nmi_average!r}")
        try:
            self.segment_plan()
            self.model_config()
            self.dino_state()
            self.augment_config(build_banks=False)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    # -- derived objects --------------------------------------------------

    def segment_plan(self) -> SegmentPlan:
        p = self.plan
        return SegmentPlan(p.n_long, p.long_seconds, p.n_short, p.short_seconds)

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(n_mels=self.features.n_mels, channels=m.channels, embed_dim=m.embed_dim,
                           head_hidden=m.head_hidden, head_layers=m.head_layers,
                           bottleneck=m.bottleneck, out_dim=m.out_dim, activation=m.activation)

    def dino_state(self, total_steps: int = 1) -> DinoState:
        d = self.dino
        return DinoState.fresh(
            self.model.out_dim, m=d.center_momentum, tau_s=d.tau_s,
            tau_t_schedule=(d.tau_t_start, d.tau_t_end, d.tau_t_warm),
            lambda_schedule=(d.lambda_start, d.lambda_end), total_steps=total_steps,
            centering=d.centering)

    def augment_config(self, build_banks: bool = True, sample_rate: int = 16000,
                       noise_reverb: bool = True, perturb: bool = True) -> AugmentConfig:
        a = self.aug
        p_nr = a.p_noise_reverb if noise_reverb else 0.0
        noises, irs = [], []
        if p_nr > 0:
            if build_banks:
                noises = make_noise_bank(a.n_noises, a.noise_seconds, a.bank_seed, sample_rate)
                irs = make_ir_bank(a.n_irs, a.bank_seed, sample_rate=sample_rate)
            else:
                noises = irs = [None]
        return AugmentConfig(
            p_pitch=a.p_pitch if perturb else 0.0, pitch_cents_choices=tuple(a.pitch_cents),
            p_tempo=a.p_tempo if perturb else 0.0, tempo_ratio_choices=tuple(a.tempo_ratios),
            p_noise_reverb=p_nr, snr_db_range=(a.snr_low, a.snr_high),
            noise_bank=noises, ir_bank=irs)

    def train_manifest(self) -> Manifest:
        c = self.corpus
        if c.manifest:
            return Manifest.load(c.manifest)
        return synth_corpus(c.n_speakers, c.utts_per_speaker, c.duration, c.seed,
                            min_duration=self.plan.long_seconds * max(1.0, *self.aug.tempo_ratios))

    def eval_manifest(self) -> Manifest:
        e = self.eval
        return synth_corpus(e.n_speakers, e.utts_per_speaker, e.duration, e.seed,
                            min_duration=0.0, prefix="evs")

    # -- text form ----------------------------------------------------------

    def items(self):
        for sname in SECTIONS:
            section = getattr(self, sname)
            for f in dataclasses.fields(section):
                yield f"{sname}.{f.name}", getattr(section, f.name)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def with_overrides(self, overrides) -> "RunConfig":
        cfg = dataclasses.replace(self, **{s: dataclasses.replace(getattr(self, s)) for s in SECTIONS})
        for key, raw in _pairs(overrides):
            cfg._set(key, raw)
        return cfg

    def _set(self, key: str, raw: str) -> None:
        sname, _, fname = key.partition(".")
        if sname not in SECTIONS or not fname:
            raise ConfigError(f"unknown config key {key!r}")
        section = getattr(self, sname)
        ftypes = {f.name: f for f in dataclasses.fields(section)}
        if fname not in ftypes:
            raise ConfigError(f"unknown config key {key!r}")
        default = getattr(SECTIONS[sname](), fname)
        setattr(section, fname, _parse(key, raw, default))

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        pairs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key = value")
            k, v = line.split("=", 1)
            pairs.append((k.strip(), v.strip()))
        return cls().with_overrides(pairs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _pairs(overrides):
    if isinstance(overrides, dict):
        overrides = overrides.items()
    for item in overrides:
        if isinstance(item, str):
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not KEY=VALUE")
            k, v = item.split("=", 1)
            yield k.strip(), v.strip()
        else:
            k, v = item
            yield k, v if isinstance(v, str) else _format(v)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    return str(v)


def _parse(key, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None
