"""Experiment configuration.

Values come from defaults, then a flat JSON file, then FAIRSHAP_* environment
variables, then explicit overrides, each layer winning over the previous one.
"""
import hashlib
import json
import os
from typing import Literal, Optional, Tuple

from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from fairshap.exceptions import DataFileError
from fairshap.fairness_metrics import DEFAULT_THRESHOLDS
from fairshap.interventions import DEFAULT_SWEEP_WEIGHTS, TrainConfig
from fairshap.model import InputMode
from fairshap.shapley import CoalitionEstimatorConfig, EstimatorMode

DATASET_DEFAULTS = {
    'adult': {'hidden': (50,), 'batch_size': 512},
    'compas': {'hidden': (32,), 'batch_size': 128},
    'synthetic': {'hidden': (16,), 'batch_size': 64},
}

Stage = Literal['prepare', 'train', 'explain', 'evaluate', 'plot', 'verify', 'sweep', 'stability']
ExplainKind = Literal['accuracy', 'dp', 'eo', 'cdp']


class ExperimentConfig(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="FAIRSHAP_", extra="forbid", frozen=True)

    # data
    dataset: Literal['adult', 'compas', 'synthetic'] = 'adult'
    data_dir: str = 'data'
    seed: int = 0
    include_protected: bool = True
    synthetic_rows: int = 200

    # models
    weight_seed: int = 0
    hidden: Optional[Tuple[int, ...]] = None
    method: Literal['baseline', 'adv-fresh', 'adv-perturbed', 'suppress', 'feldman', 'hardt'] = 'baseline'
    notion: Literal['dp', 'eo'] = 'dp'
    iterations: int = 2000
    batch_size: Optional[int] = None
    learning_rate: float = 1e-3
    adversary_learning_rate: float = 1e-2
    adversary_hidden: Tuple[int, ...] = (32,)
    adversary_weight: float = 1.0
    adversary_steps: int = 1
    eval_every: int = 50
    projection: bool = False
    aux_features: bool = True
    aux_protected: bool = True
    suppress_alpha: float = 3.0
    suppress_batches: int = 200
    repair: float = 1.0
    sweep_weights: Tuple[float, ...] = DEFAULT_SWEEP_WEIGHTS

    # stability grid: every combination of the axes, run for every seed
    stability_hidden: Tuple[Tuple[int, ...], ...] = ((50,), (50, 50))
    stability_learning_rates: Tuple[float, ...] = (1e-3, 3e-3)
    stability_adversary_steps: Tuple[int, ...] = (1, 2)
    stability_seeds: Tuple[int, ...] = (0, 1, 2)
    processes: Optional[int] = None

    # explanations and tables
    explain_kinds: Tuple[ExplainKind, ...] = ('accuracy', 'dp')
    explain_split: Literal['train', 'validation', 'test'] = 'test'
    estimator: Literal['exact', 'sampled'] = 'sampled'
    permutations: int = 256
    background: Optional[int] = 128
    max_rows: Optional[int] = 1000
    resolving: Tuple[str, ...] = ()
    thresholds: Tuple[float, ...] = DEFAULT_THRESHOLDS

    stages: Tuple[Stage, ...] = ('prepare', 'train', 'explain', 'evaluate', 'plot')
    out: str = 'out'

    @classmethod
    def settings_customise_sources(cls, settings_cls, init_settings, env_settings, dotenv_settings, file_secret_settings):
        return env_settings, init_settings, file_secret_settings

    @field_validator('iterations', 'permutations', 'adversary_steps', 'eval_every', 'suppress_batches', 'synthetic_rows')
    @classmethod
    def _positive(cls, value):
        if value < 1:
            raise ValueError("must be positive")
        return value

    @field_validator('hidden', 'adversary_hidden')
    @classmethod
    def _widths(cls, value):
        if value is not None and any(width < 1 for width in value):
            raise ValueError("layer widths must be positive")
        return value

    @field_validator('stability_hidden')
    @classmethod
    def _grid_widths(cls, value):
        if any(width < 1 for widths in value for width in widths):
            raise ValueError("layer widths must be positive")
        return value

    @field_validator('stability_hidden', 'stability_learning_rates', 'stability_adversary_steps', 'stability_seeds')
    @classmethod
    def _non_empty(cls, value):
        if not value:
            raise ValueError("grid axes need at least one value")
        return value

    @field_validator('repair')
    @classmethod
    def _unit_interval(cls, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError("must lie in [0, 1]")
        return value

    @field_validator('thresholds')
    @classmethod
    def _descending(cls, value):
        if any(later > earlier for earlier, later in zip(value, value[1:])):
            raise ValueError("thresholds must be descending")
        return value

    @classmethod
    def from_file(cls, path, **overrides):
        """Load a flat JSON object of key/value pairs; the environment still wins"""
        if not os.path.isfile(path):
            raise DataFileError("Config file %s does not exist" % path)
        with open(path) as handle:
            values = json.load(handle)
        if not isinstance(values, dict) or any(isinstance(v, dict) for v in values.values()):
            raise DataFileError("Config file %s must hold a flat JSON object" % path)
        config = cls(**values)
        return config.with_overrides(**overrides) if overrides else config

    def with_overrides(self, **overrides):
        overrides = dict((k, v) for k, v in overrides.items() if v is not None)
        return type(self).model_validate({**self.model_dump(), **overrides})

    def canonical_json(self):
        return json.dumps(self.model_dump(mode='json'), sort_keys=True)

    def config_hash(self):
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    @property
    def resolved_hidden(self):
        return self.hidden if self.hidden is not None else DATASET_DEFAULTS[self.dataset]['hidden']

    @property
    def resolved_batch_size(self):
        return self.batch_size if self.batch_size is not None else DATASET_DEFAULTS[self.dataset]['batch_size']

    def train_config(self):
        return TrainConfig(
            iterations=self.iterations,
            batch_size=self.resolved_batch_size,
            learning_rate=self.learning_rate,
            adversary_learning_rate=self.adversary_learning_rate,
            adversary_hidden=self.adversary_hidden,
            notion=self.notion,
            adversary_weight=self.adversary_weight,
            adversary_steps=self.adversary_steps,
            seed=self.weight_seed,
            eval_every=self.eval_every,
            projection=self.projection,
        ).validate()

    def stability_grid(self):
        return {
            'hidden': list(self.stability_hidden),
            'learning_rate': list(self.stability_learning_rates),
            'adversary_steps': list(self.stability_adversary_steps),
        }

    def estimator_config(self):
        return CoalitionEstimatorConfig(
            mode=EstimatorMode(self.estimator),
            permutations=self.permutations,
            background_size=self.background,
            seed=self.seed,
            max_rows=self.max_rows,
        ).validate()

    def input_mode(self):
        return InputMode(True, self.aux_features, self.aux_protected)
