class ExporterError(Exception):
    """Base class for exporter failures."""


class AnnotationError(ExporterError):
    """Annotation file missing or malformed."""


class MappingError(ExporterError):
    """Class mapping does not cover every annotated category."""


class DetectorError(ExporterError):
    """Detector could not be constructed or produced invalid outputs."""


class ContainerError(ExporterError):
    """A container on disk violates the format or a record invariant."""
