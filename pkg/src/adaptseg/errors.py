class AdaptSegError(Exception):
    pass


class ConfigurationError(AdaptSegError, ValueError):
    pass


class DegenerateAffineError(AdaptSegError, ValueError):
    pass


class FitError(AdaptSegError, RuntimeError):
    pass


class IngestionError(AdaptSegError, ValueError):
    pass


class MissingGroundTruthError(AdaptSegError, LookupError):
    pass
