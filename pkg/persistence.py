import csv
import hashlib
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError
from policy_engine import Policy, ValueBaseline, policy_from_weights

"""
Artifact persistence
====================

Every file is written to a temporary sibling and renamed into place, so an
interrupted run never leaves a half-written CSV or weight file behind.

Weight documents (policies, baselines, encoders, oracles) share one JSON
layout:

    {"format": "sqloss-weights/1", "kind": ..., "architecture": {...},
     "metadata": {...}, "params": {name: {"shape": [...], "data": [...]}}}
"""

WEIGHT_FORMAT = 'sqloss-weights/1'

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f'.{path.name}.', suffix='.tmp', dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    logging.debug(f'💾 Wrote {path} ({len(data)} bytes)')
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode('utf-8'))


def atomic_write_json(path: PathLike, document: Any) -> Path:
    return atomic_write_text(path, json.dumps(document, indent=2, sort_keys=True, default=_json_default) + '\n')


def _json_default(value: Any):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f'Object of type {type(value).__name__} is not JSON serializable')


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f'File not found: {path}')
    with open(path, 'r') as f:
        return json.load(f)


def write_csv(path: PathLike, rows: Iterable[Dict[str, Any]], fieldnames: Sequence[str]) -> Path:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(fieldnames), lineterminator='\n')
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _csv_value(row.get(k)) for k in fieldnames})
    return atomic_write_text(path, buffer.getvalue())


def _csv_value(value: Any) -> Any:
    # repr keeps float round-trips exact so identical runs give identical bytes
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return '' if value is None else value


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f'CSV not found: {path}')
    with open(path, 'r', newline='') as f:
        return list(csv.DictReader(f))


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def encode_params(params: Dict[str, Any]) -> Dict[str, Dict[str, Any]]:
    encoded = {}
    for name, value in params.items():
        array = np.asarray(value, dtype=float)
        encoded[name] = {'shape': list(array.shape), 'data': array.ravel().tolist()}
    return encoded


def decode_params(params: Dict[str, Dict[str, Any]]) -> Dict[str, np.ndarray]:
    decoded = {}
    for name, entry in params.items():
        try:
            decoded[name] = np.asarray(entry['data'], dtype=float).reshape(entry['shape'])
        except (KeyError, ValueError) as e:
            raise ConfigError(f'Malformed parameter "{name}" in weight document: {e}') from e
    return decoded


def weights_document(kind: str, architecture: Dict[str, Any], params: Dict[str, Any],
                     metadata: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {
        'format': WEIGHT_FORMAT,
        'kind': kind,
        'architecture': architecture,
        'metadata': metadata or {},
        'params': encode_params(params),
    }


def save_weights(path: PathLike, document: Dict[str, Any]) -> Path:
    """`document` holds raw arrays under `params`; they are encoded here."""
    out = weights_document(document['kind'], document.get('architecture', {}), document.get('params', {}),
                           document.get('metadata'))
    logging.info(f'💾 Saving {out["kind"]} weights to {path}')
    return atomic_write_json(path, out)


def load_weights(path: PathLike) -> Dict[str, Any]:
    document = read_json(path)
    if document.get('format') != WEIGHT_FORMAT:
        raise ConfigError(f'{path} is not a {WEIGHT_FORMAT} document (format={document.get("format")!r})')
    document['params'] = decode_params(document.get('params', {}))
    return document


def save_policy(path: PathLike, policy: Policy, metadata: Optional[Dict[str, Any]] = None) -> Path:
    document = policy.to_weights()
    document['metadata'] = metadata or {}
    return save_weights(path, document)


def load_policy(path: PathLike) -> Policy:
    return policy_from_weights(load_weights(path))


def save_baseline(path: PathLike, baseline: ValueBaseline) -> Path:
    return save_weights(path, baseline.to_weights())


def load_baseline(path: PathLike) -> ValueBaseline:
    return ValueBaseline.from_weights(load_weights(path))


def save_dataset(path: PathLike, windows: np.ndarray, reward_tuples: np.ndarray,
                 metadata: Optional[Dict[str, Any]] = None) -> Path:
    """GameDistill samples as an .npz archive (window stack + reward tuples)."""
    buffer = io.BytesIO()
    np.savez_compressed(buffer, windows=np.asarray(windows, dtype=np.float32),
                        reward_tuples=np.asarray(reward_tuples, dtype=float),
                        metadata=np.array(json.dumps(metadata or {}, sort_keys=True)))
    logging.info(f'💾 Saving {len(reward_tuples)} samples to {path}')
    return atomic_write_bytes(path, buffer.getvalue())


def load_dataset(path: PathLike) -> Tuple[np.ndarray, np.ndarray, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f'Dataset not found: {path}')
    with np.load(path, allow_pickle=False) as archive:
        return archive['windows'], archive['reward_tuples'], json.loads(str(archive['metadata']))
