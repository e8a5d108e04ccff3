"""
Exception hierarchy shared by the pipeline modules.

Domain code raises these; the CLI turns them into exit code 1 and the API
into HTTP 422 responses.
"""
from typing import Optional


class WiFlowError(Exception):
    """Base class for every expected pipeline failure."""

    code = 'wiflow_error'


class ConfigError(WiFlowError, ValueError):
    """A configuration value violates its contract."""

    code = 'config_error'

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f'{field}: {message}')


class ShapeError(WiFlowError, ValueError):
    code = 'shape_error'


class SchemaError(WiFlowError, ValueError):
    """A labels.csv row (1-based, header excluded) does not match the schema."""

    code = 'schema_error'

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        prefix = f'row {row}: ' if row is not None else ''
        super().__init__(prefix + message)


class InvalidRecordError(WiFlowError, ValueError):
    code = 'invalid_record'


class MissingKeypointError(WiFlowError, ValueError):
    code = 'missing_keypoint'

    def __init__(self, keypoint: str, session_id: str, message: str = 'no valid frame'):
        self.keypoint = keypoint
        self.session_id = session_id
        super().__init__(f'keypoint {keypoint!r} in session {session_id!r}: {message}')


class SplitError(WiFlowError, ValueError):
    code = 'split_error'


class TrainingDivergedError(WiFlowError, RuntimeError):
    """Raised when the training loss stops being finite."""

    code = 'training_diverged'

    def __init__(self, epoch: int, batch_id: int, dump_path: Optional[str] = None):
        self.epoch = epoch
        self.batch_id = batch_id
        self.dump_path = dump_path
        where = f' (batch dumped to {dump_path})' if dump_path else ''
        super().__init__(f'non-finite loss at epoch {epoch} batch {batch_id}{where}')
