"""
Configuration plumbing: .env loading, logging setup and flat dotted-key
JSON config files mapped onto the per-module dataclasses.

A config file is one JSON object such as::

    {"model.tcn_kernel": 3, "train.epochs": 5, "loss.lambda_bone": 0.2}

Nested objects are accepted and flattened (``{"train": {"epochs": 5}}``).
"""
import dataclasses
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Type, TypeVar

from core.errors import ConfigError

ROOT = Path(__file__).resolve().parent.parent

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s %(message)s'

T = TypeVar('T')


# ---------------------------------------------------------------------------
# Environment and logging
# ---------------------------------------------------------------------------

def load_environment() -> None:
    """Load ``.env`` from the repository root when python-dotenv is available."""
    try:
        from dotenv import load_dotenv
        load_dotenv(ROOT / '.env')
    except ImportError:
        pass


def env_flag(name: str, default: bool = False) -> bool:
    raw = os.environ.get(name)
    if raw is None or not raw.strip():
        return default
    return raw.strip().lower() in ('1', 'true', 'yes', 'on')


def configure_logging(level: Optional[str] = None) -> int:
    """Install the root handler. Returns the numeric level in effect."""
    name = (level or os.environ.get('WIFLOW_LOG_LEVEL') or 'INFO').upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        raise ConfigError('log_level', f'unknown level {name!r}')
    logging.basicConfig(level=numeric, format=LOG_FORMAT, force=True)
    return numeric


# ---------------------------------------------------------------------------
# Flat dotted-key files
# ---------------------------------------------------------------------------

def flatten(tree: Dict[str, Any], prefix: str = '') -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in tree.items():
        dotted = f'{prefix}.{key}' if prefix else str(key)
        if isinstance(value, dict):
            flat.update(flatten(value, dotted))
        else:
            flat[dotted] = value
    return flat


def read_config_file(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError('config', f'file not found: {path}')
    try:
        tree = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as exc:
        raise ConfigError('config', f'{path} is not valid JSON ({exc})') from exc
    if not isinstance(tree, dict):
        raise ConfigError('config', f'{path} must hold a JSON object')
    return flatten(tree)


def write_config_file(path, flat: Dict[str, Any]) -> None:
    Path(path).write_text(json.dumps(flat, indent=2, sort_keys=True) + '\n', encoding='utf-8')


def parse_override(text: str) -> Tuple[str, Any]:
    """Parse ``key=value`` from ``--set``; the value is read as JSON when possible."""
    if '=' not in text:
        raise ConfigError(text, 'override must look like key=value')
    key, raw = text.split('=', 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def check_known_keys(flat: Dict[str, Any], sections: Dict[str, Type]) -> None:
    """Reject keys whose prefix or field name is not part of any section."""
    for key in flat:
        prefix, _, name = key.partition('.')
        cls = sections.get(prefix)
        if cls is None or name not in {f.name for f in dataclasses.fields(cls)}:
            raise ConfigError(key, 'unknown config key')


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ('true', 'false'):
            return value.lower() == 'true'
        raise ConfigError(key, f'expected a boolean, got {value!r}')
    if isinstance(default, int):
        if isinstance(value, bool):
            raise ConfigError(key, f'expected an integer, got {value!r}')
        if isinstance(value, float) and value.is_integer():
            return int(value)
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(key, f'expected an integer, got {value!r}') from None
    if isinstance(default, float):
        if isinstance(value, bool):
            raise ConfigError(key, f'expected a number, got {value!r}')
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(key, f'expected a number, got {value!r}') from None
    if isinstance(default, (list, tuple)):
        if isinstance(value, str):
            value = [v for v in value.replace(' ', '').split(',') if v]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f'expected a list, got {value!r}')
        item_default = default[0] if default else ''
        items = [_coerce(key, v, item_default) for v in value]
        return tuple(items) if isinstance(default, tuple) else items
    if isinstance(default, str):
        if isinstance(value, bool) or not isinstance(value, (str, int, float)):
            raise ConfigError(key, f'expected a string, got {value!r}')
        return str(value)
    return value


def build_section(cls: Type[T], flat: Dict[str, Any], prefix: str) -> T:
    """Instantiate dataclass ``cls`` from ``prefix.*`` keys over its defaults."""
    defaults = cls()
    values = {}
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in flat.items():
        head, _, name = key.partition('.')
        if head != prefix:
            continue
        if name not in names:
            raise ConfigError(key, 'unknown config key')
        values[name] = _coerce(key, value, getattr(defaults, name))
    instance = dataclasses.replace(defaults, **values)
    validate = getattr(instance, 'validate', None)
    if callable(validate):
        validate()
    return instance


def section_to_flat(instance: Any, prefix: str, skip: Iterable[str] = ()) -> Dict[str, Any]:
    flat = {}
    for f in dataclasses.fields(instance):
        if f.name in skip:
            continue
        value = getattr(instance, f.name)
        if isinstance(value, tuple):
            value = list(value)
        flat[f'{prefix}.{f.name}'] = value
    return flat
