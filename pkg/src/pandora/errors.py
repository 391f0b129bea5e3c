"""Exception hierarchy shared across the package."""


class PandoraError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(PandoraError, ValueError):
    pass


class AllExcluded(PandoraError, ValueError):
    """A softmax row had only negative-infinity sentinels."""

    def __init__(self, row=None):
        self.row = row
        msg = "every entry of the softmax row is excluded"
        if row is not None:
            msg += f" (row {row})"
        super().__init__(msg)


class MaskError(PandoraError, ValueError):
    pass


class NoBackgroundKeys(PandoraError):
    pass


class AllKeysDissolved(PandoraError):
    """PAD would leave a masked query with no surviving key; lower the percentile."""

    def __init__(self, row, k, n_object, n_keys):
        self.row = row
        self.k = k
        super().__init__(
            f"query row {row}: top-{k} plus {n_object} object keys dissolve all {n_keys} keys"
        )


class MissingInjection(PandoraError):
    pass


class TraceFormatError(PandoraError, ValueError):
    pass


class PipelineError(PandoraError):
    """Wraps a failure inside the edit loop with the step and layer it happened at."""

    def __init__(self, t, layer, cause):
        self.t = t
        self.layer = layer
        self.cause = cause
        super().__init__(f"t={t}, layer={layer}: {cause}")
