# pylint: disable=too-few-public-methods,missing-class-docstring,no-self-argument
from typing import Dict, List, Optional, Tuple
import hashlib
import json

from pydantic import BaseModel, Field, root_validator, validator

from latent_action_pretraining import settings, validators
from latent_action_pretraining.exceptions import ContractViolation


MODES = ('lapa', 'scratch', 'vpt', 'actionvla')
SPLITS = ('seen', 'unseen')
SWEEP_AXES = ('vocab', 'seq', 'window', 'finetune_n', 'pretrain_fraction')


class Section(BaseModel):
    """ Секция конфигурации: неизвестные ключи запрещены """

    class Config:
        extra = 'forbid'
        validate_assignment = True

    def canonical_json(self) -> str:
        return json.dumps(self.dict(), sort_keys=True, separators=(',', ':'))

    def config_hash(self) -> str:
        """ SHA-256 канонического JSON; не зависит от порядка ключей """
        return hashlib.sha256(self.canonical_json().encode('utf-8')).hexdigest()


class EnvConfig(Section):
    """ Параметры мира толкания блоков """
    image_size: int = 32
    delta_max: float = 0.08
    block_radius: float = 0.06
    contact_factor: float = 1.5
    effector_radius: float = 0.035
    reach_radius: float = 0.14
    max_steps: int = 40
    min_blocks: int = 2
    max_blocks: int = 4
    expert_noise: float = 0.01
    block2block_distance: float = 0.16
    absolute_distance: float = 0.12
    separate_distance: float = 0.40
    separate_initial: float = 0.22

    @property
    def contact_radius(self) -> float:
        return self.block_radius * self.contact_factor

    @validator('max_blocks')
    def _validate_block_count(cls, value, values):
        if not 2 <= values.get('min_blocks', 2) <= value <= 4:
            raise ValueError('количество блоков должно лежать в диапазоне 2-4')
        return value


class DataConfig(Section):
    """ Размеры наборов данных """
    pretrain_trajectories: int = 20000
    finetune_trajectories: int = 200
    validation_fraction: float = 0.05
    shard_size: int = Field(default_factory=lambda: settings.DATA_SHARD_SIZE)

    @validator('pretrain_trajectories', 'finetune_trajectories', 'shard_size')
    def _validate_positive(cls, value):
        if value < 1:
            raise ValueError('значение должно быть положительным')
        return value


class LaqConfig(Section):
    """ Модель квантования латентных действий """
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    heads: int = 4
    spatial_depth: int = 2
    temporal_depth: int = 1
    decoder_depth: int = 2
    codebook_size: int = 8
    code_dim: int = 64
    sequence_length: int = 1
    reducer_kernel: int = 8
    reducer_stride: int = 8
    reducer_padding: int = 0
    window: int = 3
    steps: int = 3000
    batch_size: int = 32
    lr: float = 3e-4
    grad_clip: Optional[float] = 1.0
    replacement: bool = True
    replacement_window: int = 200
    warmup_fraction: float = 0.2
    usage_floor: float = 0.005
    buffer_size: int = 1024
    validation_pairs: int = 256
    eval_every: int = 200
    log_every: int = 50

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def warmup_steps(self) -> int:
        return int(self.steps * self.warmup_fraction)

    @validator('codebook_size')
    def _validate_codebook_size(cls, value):
        if value < 2:
            raise ValueError('размер кодовой книги должен быть не меньше 2')
        return value

    @root_validator(skip_on_failure=True)
    def _validate_geometry(cls, values):
        if values['image_size'] % values['patch_size']:
            raise ValueError('размер кадра должен делиться на размер патча')
        if values['code_dim'] != values['embed_dim']:
            raise ValueError('code_dim должен совпадать с embed_dim')
        try:
            validators.validate_sequence_length(values['sequence_length'], values['image_size'] // values['patch_size'],
                                                values['reducer_kernel'], values['reducer_stride'],
                                                values['reducer_padding'])
        except ContractViolation as ex:
            raise ValueError(str(ex)) from ex
        return values


class PolicyConfig(Section):
    """ Политика (зрение + инструкция -> латентные / реальные действия) """
    patch_size: int = 4
    embed_dim: int = 128
    heads: int = 4
    vision_depth: int = 2
    fusion_depth: int = 2
    max_instruction_length: int = 12
    freeze_vision: bool = True
    pretrain_steps: int = 2000
    batch_size: int = 32
    lr: float = 3e-4
    grad_clip: Optional[float] = 1.0
    validation_fraction: float = 0.05
    eval_every: int = 200
    log_every: int = 50


class FinetuneConfig(Section):
    """ Дообучение на действиях и базовые режимы """
    modes: List[str] = list(MODES)
    training_seeds: int = 3
    bins: int = 32
    steps: int = 1500
    stop_accuracy: float = 0.95
    accuracy_window: int = 20
    lr: float = 3e-4
    batch_size: int = 32
    action_pretrain_steps: int = 2000
    idm_steps: int = 1000
    idm_embed_dim: int = 64
    idm_depth: int = 1
    idm_validation_fraction: float = 0.1

    @validator('modes', each_item=True)
    def _validate_mode(cls, value):
        if value not in MODES:
            raise ValueError(f'неизвестный режим {value}, допустимы {MODES}')
        return value

    @validator('bins')
    def _validate_bins(cls, value):
        if value < 2:
            raise ValueError('количество корзин должно быть не меньше 2')
        return value


class EvalConfig(Section):
    """ Замкнутая оценка и анализ """
    episodes_per_category: int = 50
    splits: List[str] = list(SPLITS)
    bootstrap_samples: int = 1000
    rollout_steps: int = 5
    rollout_tasks: int = 50
    analysis_grid_frames: int = 4

    @validator('splits', each_item=True)
    def _validate_split(cls, value):
        if value not in SPLITS:
            raise ValueError(f'неизвестный сплит {value}, допустимы {SPLITS}')
        return value


class SweepConfig(Section):
    """ Абляции """
    axis: str = 'vocab'
    values: List[float] = [2, 4, 8, 16]

    @validator('axis')
    def _validate_axis(cls, value):
        if value not in SWEEP_AXES:
            raise ValueError(f'неизвестная ось {value}, допустимы {SWEEP_AXES}')
        return value

    @validator('values')
    def _validate_values(cls, value):
        if len(value) < 2:
            raise ValueError('нужно не меньше двух значений')
        return value


class RunConfig(Section):
    """ Полное дерево конфигурации запуска """
    seed: int = 0
    env: EnvConfig = Field(default_factory=EnvConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    laq: LaqConfig = Field(default_factory=LaqConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    @root_validator(skip_on_failure=True)
    def _validate_image_size(cls, values):
        if values['laq'].image_size != values['env'].image_size:
            raise ValueError('laq.image_size должен совпадать с env.image_size')
        return values


# Манифесты артефактов

class ParamEntry(BaseModel):
    name: str
    shape: List[int]
    trainable: bool = True


class CheckpointManifest(BaseModel):
    """ Манифест чекпоинта: имена, формы, гиперпараметры, состояние ГСЧ """
    format_version: int
    kind: str
    params: List[ParamEntry]
    hyperparameters: dict = {}
    rng_state: dict = {}
    extra: dict = {}


class ShardManifest(BaseModel):
    """ Манифест шарда: смещения записей отсчитываются от конца манифеста """
    grammar_version: int
    image_size: int
    records: int
    splits: Dict[str, int]
    categories: Dict[str, int]
    offsets: List[int] = []


class DatasetManifest(BaseModel):
    """ Манифест набора траекторий """
    grammar_version: int
    seed: int
    split: str
    trajectories: int
    rejected: int
    image_size: int
    delta_max: float
    categories: Dict[str, int]
    shards: List[str]
    shard_records: List[int]
    success_rate: float


class RunManifest(BaseModel):
    """ Манифест каталога запуска (run.json) """
    command: str
    status: str
    seed: int
    config_hash: str
    started_at: str
    finished_at: Optional[str] = None
    artifacts: Dict[str, str] = {}
    upstream: Dict[str, str] = {}


class ReportIndexEntry(BaseModel):
    run: str
    command: str
    status: str
    config_hash: str
    started_at: str
    finished_at: Optional[str] = None
    artifacts: Dict[str, str] = {}
    summary: dict = {}


class ReportIndex(BaseModel):
    """ Сводный report.json корня запусков """
    schema_version: int = settings.REPORT_SCHEMA_VERSION
    runs: List[ReportIndexEntry] = []


# Отчёты

class EvalRow(BaseModel):
    """ Строка отчёта: режим x сид обучения x категория x сплит """
    mode: str
    training_seed: str
    category: str
    split: str
    success_mean: float
    partial_mean: float
    stderr: float
    ci_low: float
    ci_high: float
    episodes: int
    seeds: List[int]

    @validator('success_mean', 'partial_mean')
    def _validate_mean(cls, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError('среднее должно лежать в [0, 1]')
        return value


class WinRate(BaseModel):
    mode_a: str
    mode_b: str
    wins: int
    losses: int
    ties: int
    win_rate_without_ties: Optional[float]
    win_rate_with_ties: float
    tie_rate: float


class EvalReport(BaseModel):
    """ Отчёт замкнутой оценки """
    schema_version: int = settings.REPORT_SCHEMA_VERSION
    config_hash: str = ''
    rows: List[EvalRow] = []
    win_rates: List[WinRate] = []
    episodes: List[Tuple[int, str, str]] = []
    thresholds_note: str = 'Пороги частичного успеха подобраны под мир толкания блоков'

    def pooled(self, mode: str, split: Optional[str] = None) -> float:
        """
        Средний успех режима по всем сидам обучения и категориям
        :param mode: режим
        :param split: сплит, None - все
        :return: доля успешных эпизодов
        """
        rows = [row for row in self.rows
                if row.mode == mode and row.training_seed == 'pooled' and row.category == 'all'
                and (split is None or row.split == split)]
        episodes = sum(row.episodes for row in rows)
        return sum(row.success_mean * row.episodes for row in rows) / episodes if episodes else 0.0


class LabelCluster(BaseModel):
    label: str
    count: int
    mean_action: Tuple[float, float]


class ClusterReport(BaseModel):
    """ Анализ латентных действий """
    clusters: List[LabelCluster]
    total: int
    mutual_information: float
    null_mutual_information: float
    separated_pairs: int
    total_pairs: int
    separation_threshold: float

    @root_validator(skip_on_failure=True)
    def _validate_counts(cls, values):
        if sum(cluster.count for cluster in values['clusters']) != values['total']:
            raise ValueError('сумма размеров кластеров не совпадает с числом пар')
        return values


class RolloutReport(BaseModel):
    """ Нейронные роллауты декодером LAQ """
    tasks: int
    steps: int
    finite: bool
    sign_agreement: float
    reconstruction_within_bound: float
