import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional

from azure.storage.blob import BlobServiceClient, ContentSettings

import settings
from errors import ConfigError

"""
Artifact publishing
===================

Uploads a finished run directory to Azure Blob Storage. Each file becomes
`<run name>/<relative path>` in RESULTS_CONTAINER with the run's experiment
id, checksum and code version attached as blob metadata.

Required Environment Variables:
- AZURE_STORAGE_CONNECTION_STRING (or AzureWebJobsStorage)
- RESULTS_CONTAINER (optional, defaults to sqloss-results)
"""

CONTENT_TYPES = {
    '.csv': 'text/csv',
    '.json': 'application/json',
    '.svg': 'image/svg+xml',
    '.npz': 'application/octet-stream',
}

# blob metadata values are ASCII; run ids and versions never need more
METADATA_LIMIT = 250


def get_blob_service_client(connection_string: Optional[str] = None) -> BlobServiceClient:
    connection_string = connection_string or settings.AZURE_WEBJOBS_STORAGE
    if not connection_string:
        raise ConfigError('No storage connection string: set AZURE_STORAGE_CONNECTION_STRING or AzureWebJobsStorage')
    return BlobServiceClient.from_connection_string(connection_string)


def sanitize_metadata_value(value: Optional[str]) -> str:
    """Printable ASCII only, single-spaced, at most METADATA_LIMIT characters."""
    if not value:
        return ''
    text = ''.join(c if 32 <= ord(c) < 127 else ' ' if c in '\n\r\t' else '' for c in str(value))
    text = ' '.join(text.split())
    return text if len(text) <= METADATA_LIMIT else text[:METADATA_LIMIT - 3] + '...'


def content_type_for(path: Path) -> str:
    return CONTENT_TYPES.get(path.suffix.lower(), 'application/octet-stream')


def blob_metadata(manifest: Dict[str, Any], relative: str) -> Dict[str, str]:
    checksums = manifest.get('artifacts', {})
    metadata = {
        'experiment_id': sanitize_metadata_value(str(manifest.get('experiment_id', ''))),
        'code_version': sanitize_metadata_value(str(manifest.get('code_version', settings.CODE_VERSION))),
        'published_at': sanitize_metadata_value(datetime.now(timezone.utc).isoformat()),
    }
    if relative in checksums:
        metadata['sha256'] = sanitize_metadata_value(checksums[relative])
    return metadata


def publish_run(run_dir: Path, manifest: Dict[str, Any], container: Optional[str] = None,
                client: Optional[BlobServiceClient] = None) -> Dict[str, Any]:
    """Upload every file under `run_dir`; returns a summary of what was sent."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f'Run directory not found: {run_dir}')
    container = container or settings.RESULTS_CONTAINER
    client = client or get_blob_service_client()
    prefix = run_dir.name

    uploaded = []
    total_bytes = 0
    for path in sorted(p for p in run_dir.rglob('*') if p.is_file()):
        relative = path.relative_to(run_dir).as_posix()
        blob_name = f'{prefix}/{relative}'
        data = path.read_bytes()
        logging.info(f'📤 Uploading {blob_name} ({len(data)} bytes)')
        blob_client = client.get_blob_client(container=container, blob=blob_name)
        try:
            blob_client.upload_blob(
                data=data,
                content_settings=ContentSettings(content_type=content_type_for(path)),
                metadata=blob_metadata(manifest, relative),
                overwrite=True
            )
        except Exception as e:
            logging.error(f'❌ Upload of {blob_name} failed: {str(e)}')
            raise
        uploaded.append(blob_name)
        total_bytes += len(data)

    logging.info(f'✅ Published {len(uploaded)} files ({total_bytes} bytes) to {container}/{prefix}')
    return {'success': True, 'container': container, 'prefix': prefix, 'files': uploaded, 'bytes': total_bytes}
