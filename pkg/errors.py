
class PipelineError(ValueError):
    kind = "runtime-error"

    def __init__(self, message: str, kind: str = None):
        super().__init__(message)
        if kind:
            self.kind = kind

    def to_dict(self) -> dict:
        return {"error": self.kind, "message": str(self)}


class ConfigError(PipelineError):
    kind = "validation-error"


class NiftiFormatError(PipelineError):
    kind = "nifti-format"


class GeometryError(PipelineError):
    kind = "geometry-mismatch"


class IntensitySpaceError(PipelineError):
    kind = "wrong-intensity-space"


class RegistrationError(PipelineError):
    kind = "registration"


class DiffusionError(PipelineError):
    kind = "diffusion"


class SegmentationError(PipelineError):
    kind = "segmentation"


class MetricError(PipelineError):
    kind = "metric"
