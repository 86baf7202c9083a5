"""
Run configuration for DPT experiments.
Parses the `key = value` run-config files, builds the per-stage
StageConfig objects, and computes the config hash stamped into every
artifact so mismatched stages are detected.

Grammar:
    [section]            one of data, model, train, stage1, stage2, stage3, eval, synth
    key = value          one setting; lists are comma-separated
    # or ; comment       whole-line comments; blank lines are ignored

`{out}` inside a path expands to the output directory; other relative
paths resolve against the directory of the config file.
"""
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Sequence, Tuple

from config import Config
from encoder import PROMPT_VARIANTS
from graphs import INTERACTION_NORMS
from ingest import SyntheticSpec
from logger import setup_logger
from utils import ParseError, short_hash

logger = setup_logger("RunConfig")

EVAL_MODES = ('full', 'sampled')


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ('true', '1', 'yes', 'on'):
        return True
    if lowered in ('false', '0', 'no', 'off'):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_list(text: str) -> Tuple[str, ...]:
    return tuple(part.strip() for part in text.split(',') if part.strip())


def _parse_float_list(text: str) -> Tuple[float, ...]:
    return tuple(float(part) for part in _parse_list(text))


def _parse_text(text: str) -> str:
    return text.strip()


TRAIN_KEYS: Dict[str, Callable[[str], Any]] = {
    'epochs': int,
    'batch_size': int,
    'lr': float,
    'weight_decay': float,
    'keep_prob': float,
}

SCHEMA: Dict[str, Dict[str, Callable[[str], Any]]] = {
    'data': {
        'interactions': _parse_text,
        'noise': _parse_text,
        'behaviors': _parse_list,
        'drop': _parse_list,
        'min_count': int,
        'top_k': int,
        'all_pairs': _parse_bool,
    },
    'model': {
        'dim': int,
        'layers': int,
        'include_layer0': _parse_bool,
        'interaction_norm': _parse_text,
    },
    'train': {**TRAIN_KEYS, 'seed': int},
    'stage1': {**TRAIN_KEYS, 'rec_weight': float, 'delta': float},
    'stage2': dict(TRAIN_KEYS),
    'stage3': {**TRAIN_KEYS, 'prompt_variant': _parse_text},
    'eval': {
        'mode': _parse_text,
        'negatives': int,
        'k': int,
        'threads': int,
    },
    'synth': {
        'users': int,
        'items': int,
        'aux_behaviors': int,
        'blocks': int,
        'density': _parse_float_list,
        'noise_rate': float,
    },
}

PATH_KEYS = ('interactions', 'noise')


@dataclass(frozen=True)
class StageConfig:
    """Hyperparameters of one training stage."""
    stage: int
    epochs: int = 30
    batch_size: int = 1024
    lr: float = 0.01
    weight_decay: float = 0.0
    rec_weight: float = 1.0
    delta: float = 0.2
    layers: int = 2
    dim: int = 16
    keep_prob: float = 1.0
    prompt_variant: str = 'add'
    seed: int = 7
    dropped: Tuple[str, ...] = ()
    include_layer0: bool = False
    interaction_norm: str = 'none'

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.rec_weight < 0:
            raise ValueError(f"rec_weight must be non-negative, got {self.rec_weight}")
        if not (0.0 < self.delta < 0.5):
            raise ValueError(f"delta must lie in (0, 0.5), got {self.delta}")
        if self.layers < 1 or self.dim < 1:
            raise ValueError("layers and dim must be positive")
        if not (0.0 < self.keep_prob <= 1.0):
            raise ValueError(f"keep_prob must lie in (0, 1], got {self.keep_prob}")
        if self.prompt_variant not in PROMPT_VARIANTS:
            raise ValueError(f"unknown prompt variant {self.prompt_variant!r}; expected one of {PROMPT_VARIANTS}")
        if self.interaction_norm not in INTERACTION_NORMS:
            raise ValueError(f"unknown interaction normalization {self.interaction_norm!r}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")


@dataclass(frozen=True)
class RunConfig:
    """
    One experiment: data, model shape, per-stage training settings,
    evaluation protocol and the synthetic generator.
    """
    out_dir: Path
    interactions: Path
    noise: Optional[Path] = None
    behaviors: Tuple[str, ...] = tuple(Config.DEFAULT_BEHAVIORS)
    dropped: Tuple[str, ...] = ()
    min_count: int = 3
    top_k: int = 10
    all_pairs: bool = False
    dim: int = 16
    layers: int = 2
    include_layer0: bool = False
    interaction_norm: str = 'none'
    seed: int = Config.DEFAULT_SEED
    train: Mapping[str, Any] = field(default_factory=dict)
    stage_overrides: Mapping[int, Mapping[str, Any]] = field(default_factory=dict)
    eval_mode: str = 'full'
    eval_negatives: int = 99
    eval_k: int = 10
    threads: int = Config.THREADS
    synth: Mapping[str, Any] = field(default_factory=dict)
    raw_paths: Mapping[str, str] = field(default_factory=dict)
    source: Optional[Path] = None

    def __post_init__(self):
        if len(self.behaviors) < 1:
            raise ValueError("behaviors must name at least the target behavior")
        if len(set(self.behaviors)) != len(self.behaviors):
            raise ValueError("behaviors contains duplicate labels")
        for label in self.dropped:
            if label not in self.behaviors:
                raise ValueError(f"cannot drop unknown behavior {label!r}")
            if label == self.behaviors[-1]:
                raise ValueError(f"cannot drop the target behavior {label!r}")
        if self.min_count < 1:
            raise ValueError(f"min_count must be at least 1, got {self.min_count}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be at least 1, got {self.top_k}")
        if self.eval_mode not in EVAL_MODES:
            raise ValueError(f"unknown eval mode {self.eval_mode!r}; expected one of {EVAL_MODES}")
        if self.eval_negatives < 1 or self.eval_k < 1:
            raise ValueError("eval negatives and k must be positive")
        if self.threads < 1:
            raise ValueError(f"threads must be at least 1, got {self.threads}")
        if self.interaction_norm not in INTERACTION_NORMS:
            raise ValueError(f"unknown interaction normalization {self.interaction_norm!r}")

    @property
    def target_label(self) -> str:
        return self.behaviors[-1]

    def stage(self, number: int) -> StageConfig:
        """Stage settings: [train] defaults, then [stageN] overrides."""
        settings = dict(self.train)
        settings.update(self.stage_overrides.get(number, {}))
        return StageConfig(
            stage=number,
            layers=self.layers,
            dim=self.dim,
            seed=self.seed,
            dropped=tuple(self.dropped),
            include_layer0=self.include_layer0,
            interaction_norm=self.interaction_norm,
            **settings,
        )

    @property
    def config_hash(self) -> str:
        """
        16 hex chars over everything that shapes the data and the parameters.

        Stage-local knobs (epochs, learning rate, delta, prompt variant) are
        left out so several stage-3 variants can share one stage-2 checkpoint.
        """
        fields = {
            'interactions': self.raw_paths.get('interactions', str(self.interactions)),
            'behaviors': ",".join(self.behaviors),
            'dropped': ",".join(sorted(self.dropped)),
            'min_count': self.min_count,
            'top_k': self.top_k,
            'all_pairs': self.all_pairs,
            'dim': self.dim,
            'layers': self.layers,
            'include_layer0': self.include_layer0,
            'interaction_norm': self.interaction_norm,
            'seed': self.seed,
        }
        canonical = "\n".join(f"{key}={fields[key]}" for key in sorted(fields))
        return short_hash(canonical)

    def synthetic_spec(self) -> SyntheticSpec:
        """Generator settings from [synth], labelled with this run's behaviors when they fit."""
        settings = dict(self.synth)
        num_aux = settings.get('aux_behaviors', len(self.behaviors) - 1)
        spec = SyntheticSpec(
            num_users=settings.get('users', 200),
            num_items=settings.get('items', 200),
            num_aux_behaviors=num_aux,
            num_blocks=settings.get('blocks', 2),
            density=tuple(settings.get('density', SyntheticSpec.density)),
            noise_rate=settings.get('noise_rate', 0.1),
            seed=self.seed,
            labels=tuple(self.behaviors) if len(self.behaviors) == num_aux + 1 else None,
        )
        spec.validate()
        return spec

    def with_overrides(self, seed: Optional[int] = None, prompt_variant: Optional[str] = None,
                       dropped: Optional[Sequence[str]] = None, eval_mode: Optional[str] = None,
                       threads: Optional[int] = None) -> 'RunConfig':
        """Apply command-line flags on top of the file settings."""
        changes: Dict[str, Any] = {}
        if seed is not None:
            changes['seed'] = int(seed)
        if dropped:
            changes['dropped'] = tuple(dict.fromkeys(list(self.dropped) + list(dropped)))
        if eval_mode is not None:
            changes['eval_mode'] = eval_mode
        if threads is not None:
            changes['threads'] = int(threads)
        if prompt_variant is not None:
            overrides = {k: dict(v) for k, v in self.stage_overrides.items()}
            overrides.setdefault(3, {})['prompt_variant'] = prompt_variant
            changes['stage_overrides'] = overrides
        return replace(self, **changes) if changes else self


def parse_config_text(text: str) -> Dict[str, Dict[str, Any]]:
    """
    Parse run-config text into {section: {key: typed value}}.

    Raises:
        ParseError: malformed line, unknown section/key, duplicate key or bad value
    """
    sections: Dict[str, Dict[str, Any]] = {}
    current: Optional[str] = None
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith('#') or line.startswith(';'):
            continue
        if line.startswith('['):
            if not line.endswith(']'):
                raise ParseError(line_number, f"malformed section header {line!r}")
            current = line[1:-1].strip()
            if current not in SCHEMA:
                raise ParseError(line_number, f"unknown section [{current}]")
            sections.setdefault(current, {})
            continue
        if '=' not in line:
            raise ParseError(line_number, f"expected 'key = value', got {line!r}")
        if current is None:
            raise ParseError(line_number, "setting outside of any [section]")
        key, value = (part.strip() for part in line.split('=', 1))
        parser = SCHEMA[current].get(key)
        if parser is None:
            raise ParseError(line_number, f"unknown key {key!r} in [{current}]")
        if key in sections[current]:
            raise ParseError(line_number, f"duplicate key {key!r} in [{current}]")
        try:
            sections[current][key] = parser(value)
        except ValueError as e:
            raise ParseError(line_number, f"bad value for {key!r}: {e}") from None
    return sections


def _resolve_path(text: str, out_dir: Path, base_dir: Path) -> Path:
    if '{out}' in text:
        return Path(text.replace('{out}', str(out_dir)))
    path = Path(text)
    return path if path.is_absolute() else base_dir / path


def build_run_config(sections: Mapping[str, Mapping[str, Any]], out_dir, base_dir=None,
                     source: Optional[Path] = None) -> RunConfig:
    """Assemble a RunConfig from parsed sections (missing keys take defaults)."""
    out_dir = Path(out_dir)
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    data = dict(sections.get('data', {}))
    model = dict(sections.get('model', {}))
    train = dict(sections.get('train', {}))
    evaluation = dict(sections.get('eval', {}))

    raw_paths = {'interactions': data.pop('interactions', '{out}/synthetic.tsv')}
    if 'noise' in data:
        raw_paths['noise'] = data.pop('noise')
    elif raw_paths['interactions'].endswith('.tsv'):
        raw_paths['noise'] = raw_paths['interactions'][:-len('.tsv')] + '.noise'

    settings: Dict[str, Any] = dict(
        out_dir=out_dir,
        interactions=_resolve_path(raw_paths['interactions'], out_dir, base_dir),
        noise=_resolve_path(raw_paths['noise'], out_dir, base_dir) if 'noise' in raw_paths else None,
        raw_paths=raw_paths,
        train={k: v for k, v in train.items() if k != 'seed'},
        stage_overrides={n: dict(sections.get(f'stage{n}', {})) for n in (1, 2, 3)},
        synth=dict(sections.get('synth', {})),
        source=source,
    )
    if 'seed' in train:
        settings['seed'] = train['seed']
    if 'behaviors' in data:
        settings['behaviors'] = data.pop('behaviors')
    if 'drop' in data:
        settings['dropped'] = data.pop('drop')
    settings.update(data)
    settings.update(model)
    for key, name in (('mode', 'eval_mode'), ('negatives', 'eval_negatives'), ('k', 'eval_k'),
                      ('threads', 'threads')):
        if key in evaluation:
            settings[name] = evaluation[key]
    return RunConfig(**settings)


def load_run_config(path=None, out_dir=None) -> RunConfig:
    """
    Load a run config file (or the built-in defaults when path is None).

    Args:
        path: Config file path
        out_dir: Output directory (defaults to Config.OUTPUT_DIR)

    Returns:
        RunConfig
    """
    out_dir = Path(out_dir) if out_dir is not None else Path(Config.OUTPUT_DIR)
    if path is None:
        return build_run_config({}, out_dir)
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    sections = parse_config_text(path.read_text(encoding='utf-8'))
    run = build_run_config(sections, out_dir, base_dir=path.parent, source=path)
    logger.info(f"Loaded run config {path} (hash {run.config_hash})")
    return run


def get_run_summary(run: RunConfig) -> str:
    """Human-readable summary of a run config."""
    stages = "\n".join(
        f"  Stage {n}: epochs={s.epochs} batch={s.batch_size} lr={s.lr} wd={s.weight_decay}"
        + (f" rec_weight={s.rec_weight} delta={s.delta}" if n == 1 else "")
        + (f" prompt={s.prompt_variant}" if n == 3 else "")
        for n, s in ((n, run.stage(n)) for n in (1, 2, 3)))
    return f"""
DPT Run Configuration ({run.config_hash}):
  Interactions: {run.interactions}
  Behaviors: {', '.join(run.behaviors)} (target: {run.target_label})
  Dropped: {', '.join(run.dropped) or 'none'}
  Model: d={run.dim} L={run.layers} layer0={run.include_layer0} norm={run.interaction_norm}
  Seed: {run.seed}
{stages}
  Eval: {run.eval_mode} K={run.eval_k} threads={run.threads}
"""
