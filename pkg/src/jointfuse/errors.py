class ValidationError(ValueError):
    """Input data violates a shape, range or consistency requirement."""


class FormatError(ValueError):
    """A file decodes to an unsupported layout or bit depth."""


class AnnotationParseError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    def __init__(self, message, batch_ids=()):
        super().__init__(message)
        self.batch_ids = list(batch_ids)
