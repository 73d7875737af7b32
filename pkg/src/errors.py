class UqwizError(Exception):
    """
    Base class of every error raised by the toolkit.
    """


class ValidationError(UqwizError, ValueError):
    pass


class InsufficientSamplesError(ValidationError):
    pass


class UnsupportedShapeError(ValidationError):
    pass


class UnknownQuantifierError(ValidationError):
    pass


class ContextConfigError(ValidationError):
    pass


class ModelBuildError(UqwizError):
    pass


class TrainingError(UqwizError):
    pass


class ModelFileError(UqwizError):
    pass


class BadMagicError(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass


class UnknownLayerTagError(ModelFileError):
    pass


class TruncatedFileError(ModelFileError):
    pass


class DatasetError(UqwizError):
    pass


class CsvParseError(DatasetError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class EnsembleError(UqwizError):
    pass


class EnsembleLockedError(EnsembleError):
    pass


class MissingModelError(EnsembleError):
    pass


class AssemblyError(EnsembleError):
    def __init__(self, message, model_ids=()):
        super().__init__(message)
        self.model_ids = tuple(model_ids)


class PointPredictorOnEnsembleError(EnsembleError):
    pass


class TaskFailedError(EnsembleError):
    """
    Raised once every worker has drained; `failures` maps model id to a diagnostic.
    """

    def __init__(self, failures):
        self.failures = dict(sorted(failures.items()))
        ids = ", ".join(str(i) for i in self.failures)
        super().__init__(f"Tasks failed for model ids [{ids}]")

    @property
    def failed_ids(self):
        return sorted(self.failures)
