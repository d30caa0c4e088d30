import csv
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence, Union

import backoff
import numpy as np
import pytz
import yaml

import catalog
from config import Config
from convexify import SampledFunction
from errors import ConfigError
from expr import LagrangianSpec
from logger import get_logger

log = get_logger('relaxo.records')

COMMANDS = ('convexify', 'recover', 'gap', 'mania')
_TOP_LEVEL = {'schema_version', 'command', 'lagrangian', 'lagrangian_file', 'dim', 'box',
              'boundary', 'seed', 'sections'}


def _plain(value):
    """Turn numpy scalars, arrays and tuples into JSON/YAML friendly values."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return 'nan'
        if math.isinf(value):
            return 'inf' if value > 0 else '-inf'
        return value
    return value


def canonical_json(data: Any) -> str:
    return json.dumps(_plain(data), sort_keys=True, separators=(',', ':'), ensure_ascii=True)


def config_hash(data: Dict[str, Any]) -> str:
    return hashlib.sha256(canonical_json(data).encode('utf-8')).hexdigest()


def utc_now() -> str:
    return datetime.now(pytz.utc).strftime('%Y-%m-%dT%H:%M:%SZ')


@backoff.on_exception(
    backoff.expo,
    OSError,
    max_tries=3,
    jitter=None,
)
def atomic_write(path: str, text: Union[str, bytes]) -> str:
    """Write through a temp file in the target directory and rename over ``path``."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix='.tmp-', suffix=os.path.basename(path))
    try:
        if isinstance(text, bytes):
            with os.fdopen(fd, 'wb') as f:
                f.write(text)
        else:
            with os.fdopen(fd, 'w', encoding='utf-8', newline='') as f:
                f.write(text)
        os.replace(tmp, path)
    except OSError:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    return path


def write_json(path: str, data: Any) -> str:
    return atomic_write(path, json.dumps(_plain(data), sort_keys=True, indent=2) + '\n')


def flatten(data: Dict[str, Any], prefix: str = '') -> Dict[str, Any]:
    """Dotted-key view of a nested mapping; lists of scalars are joined with ';'."""
    flat = {}
    for key, value in _plain(data).items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, name + '.'))
        elif isinstance(value, list):
            if all(not isinstance(v, (dict, list)) for v in value):
                flat[name] = ';'.join(str(v) for v in value)
            else:
                flat[name] = json.dumps(value, sort_keys=True)
        else:
            flat[name] = value
    return flat


def to_csv(rows: Sequence[Dict[str, Any]], fieldnames: Optional[List[str]] = None) -> str:
    rows = [flatten(r) for r in rows]
    if fieldnames is None:
        fieldnames = sorted({k for r in rows for k in r})
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, extrasaction='ignore', lineterminator='\n')
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k, '') for k in fieldnames})
    return buf.getvalue()


@dataclass
class ExperimentConfig:
    command: str
    lagrangian: str = ''
    lagrangian_file: str = ''
    dim: int = 1
    box: List[Any] = field(default_factory=lambda: [0.0, 1.0])
    boundary: str = '0'
    seed: int = Config.DEFAULT_SEED
    sections: Dict[str, Any] = field(default_factory=dict)
    schema_version: int = Config.SCHEMA_VERSION
    base_dir: str = field(default='.', repr=False, compare=False)

    def __post_init__(self):
        if self.schema_version != Config.SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} is not supported",
                              expected=Config.SCHEMA_VERSION)
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command '{self.command}'", available=list(COMMANDS))
        if self.dim not in (1, 2):
            raise ConfigError(f"dim must be 1 or 2, got {self.dim}")
        if self.lagrangian and self.lagrangian_file:
            raise ConfigError("set only one of 'lagrangian' and 'lagrangian_file'")
        if not (self.lagrangian or self.lagrangian_file) and self.command != 'mania':
            raise ConfigError(f"'{self.command}' needs a 'lagrangian' or a 'lagrangian_file'")
        if not isinstance(self.sections, dict):
            raise ConfigError("'sections' must be a mapping")
        if self.lagrangian_file and not os.path.isfile(self.file_path):
            raise ConfigError(f"sample file '{self.lagrangian_file}' does not exist", path=self.file_path)
        self.seed = int(self.seed)

    @property
    def file_path(self) -> str:
        return os.path.join(self.base_dir, self.lagrangian_file)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: str = '.') -> 'ExperimentConfig':
        if not isinstance(data, dict):
            raise ConfigError("experiment config must be a mapping")
        unknown = sorted(set(data) - _TOP_LEVEL)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}", allowed=sorted(_TOP_LEVEL))
        if 'command' not in data:
            raise ConfigError("config is missing 'command'")
        return cls(base_dir=base_dir, **data)

    @classmethod
    def load(cls, path: str) -> 'ExperimentConfig':
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = yaml.safe_load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file '{path}' does not exist", path=path)
        except yaml.YAMLError as e:
            raise ConfigError(f"config file '{path}' is not valid YAML", reason=str(e))
        return cls.from_dict(data or {}, os.path.dirname(os.path.abspath(path)))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop('base_dir')
        return _plain(data)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def save(self, path: str) -> str:
        return atomic_write(path, self.dump())

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def section(self, name: str) -> Dict[str, Any]:
        value = self.sections.get(name, {})
        if not isinstance(value, dict):
            raise ConfigError(f"section '{name}' must be a mapping")
        return value

    def box_tuple(self):
        if self.dim == 1:
            lo, hi = self.box
            return float(lo), float(hi)
        return tuple((float(a), float(b)) for a, b in self.box)

    def resolve_lagrangian(self) -> LagrangianSpec:
        """Catalog name, expression text or sample file (CSV, or ``.bin`` as written by convexify)."""
        if self.lagrangian_file:
            if self.lagrangian_file.endswith('.bin'):
                with open(self.file_path, 'rb') as f:
                    samples = SampledFunction.from_bytes(f.read())
            else:
                with open(self.file_path, 'r', encoding='utf-8') as f:
                    samples = SampledFunction.from_csv(f.read())
            return LagrangianSpec.from_samples(samples, name=os.path.basename(self.lagrangian_file),
                                               source=self.lagrangian_file)
        if self.lagrangian in catalog.LAGRANGIANS:
            return catalog.get(self.lagrangian)
        return LagrangianSpec.from_expression(self.lagrangian, self.dim)


@dataclass
class ResultRecord:
    command: str
    config_hash: str
    started: str
    finished: str = ''
    artifacts: Dict[str, str] = field(default_factory=dict)
    headline: Dict[str, Any] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    diagnostic: Optional[Dict[str, Any]] = None
    schema_version: int = Config.SCHEMA_VERSION

    @property
    def failed(self) -> bool:
        return self.diagnostic is not None

    def to_dict(self, timestamps: bool = True) -> Dict[str, Any]:
        data = _plain(asdict(self))
        if not timestamps:
            data.pop('started')
            data.pop('finished')
        return data

    def to_json(self, timestamps: bool = True) -> str:
        return json.dumps(self.to_dict(timestamps), sort_keys=True, indent=2) + '\n'

    def save(self, path: str) -> str:
        self.artifacts.setdefault('record', os.path.basename(path))
        atomic_write(path, self.to_json())
        log.debug(f"Saved {self.command} record to {path}")
        return path

    @classmethod
    def load(cls, path: str) -> 'ResultRecord':
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"record '{path}' does not exist", path=path)
        except json.JSONDecodeError as e:
            raise ConfigError(f"record '{path}' is not valid JSON", reason=str(e))
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"record '{path}' does not match the record schema", reason=str(e))

    def matches(self, config: ExperimentConfig) -> bool:
        return self.config_hash == config.hash
