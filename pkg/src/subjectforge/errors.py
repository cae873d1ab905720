"""Exception hierarchy shared across the package."""

from __future__ import annotations

from contextlib import contextmanager


class SubjectForgeError(Exception):
    pass


class InvalidArgument(SubjectForgeError, ValueError):
    pass


class FormatError(SubjectForgeError, ValueError):
    """Text that does not follow the layout prompt grammar."""


class GatewayError(SubjectForgeError):
    def __init__(self, message: str, *, role: str | None = None, scene_id: str | None = None):
        super().__init__(message)
        self.role = role
        self.scene_id = scene_id


class ProtocolError(GatewayError):
    """A model response that failed schema validation."""


class ModelCallFailed(GatewayError):
    """Transport failure that survived the retry budget."""


class StageFailure(SubjectForgeError):
    """A scene was dropped at a named pipeline stage."""

    def __init__(self, stage: str, scene_id: str | None = None, detail: str = "", role: str | None = None):
        self.stage = stage
        self.scene_id = scene_id
        self.detail = detail
        self.role = role
        msg = f"stage {stage} failed"
        if scene_id:
            msg += f" for {scene_id}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class RecordValidationError(SubjectForgeError, ValueError):
    def __init__(self, path: str, message: str, scene_id: str | None = None):
        self.path = path
        self.scene_id = scene_id
        super().__init__(f"{path}: {message}")


class ManifestCorrupt(SubjectForgeError):
    def __init__(self, manifest, line_no: int, detail: str):
        self.manifest = manifest
        self.line_no = line_no
        super().__init__(f"{manifest}:{line_no}: {detail}")


class ConfigError(SubjectForgeError, ValueError):
    pass


@contextmanager
def stage_guard(stage: str, scene_id: str | None = None):
    """Re-raise gateway errors inside the block as a failure of ``stage``."""
    try:
        yield
    except GatewayError as exc:
        raise StageFailure(stage, scene_id, str(exc), role=exc.role) from exc
