'''
Exceptions raised by interaction_flows.

Every exception derives from FlowError and from the closest builtin exception,
so that callers that only know about builtins (ValueError, IndexError, ...) keep
catching them.
'''


class FlowError(Exception):
    pass


class ConfigurationError(FlowError, ValueError):
    """Inconsistent dimensions, untracked nodes or simulation settings."""


class ConfigValidationError(ConfigurationError):
    """An experiment file violates the schema. All violations are collected."""

    def __init__(self, violations: list[str], source: str | None = None):
        self.violations = list(violations)
        self.source = source
        where = f' in {source}' if source else ''
        super().__init__(
            f'{len(self.violations)} configuration violation(s){where}: '
            + '; '.join(self.violations)
        )


class InvalidModelError(ConfigurationError):
    """Model metadata is outside the range the estimators are valid for."""


class PreconditionError(FlowError, ValueError):
    pass


class IndexRangeError(FlowError, IndexError):
    pass


class SamplingError(FlowError, RuntimeError):
    pass


class UnsupportedError(FlowError, ValueError):
    pass


class NotApplicableError(FlowError, ValueError):
    pass


class SnapshotError(FlowError, LookupError):
    pass


class StageDependencyError(FlowError, FileNotFoundError):
    pass


class _StepFailure(FlowError):
    '''Common fields of failures detected during time stepping.'''

    reason = 'step failure'

    def __init__(
        self,
        step: int | None = None,
        time: float | None = None,
        replicas: list[int] | None = None,
        point: int | None = None,
        detail: str = '',
    ):
        self.step = step
        self.time = time
        self.replicas = list(replicas or [])
        self.point = point
        self.detail = detail
        message = self.reason
        if step is not None:
            message += f' at step {step} (t = {time:.6g})'
        if self.replicas:
            message += f' in replica(s) {self.replicas}'
        if point is not None:
            message += f', tracked point {point}'
        if detail:
            message += f': {detail}'
        super().__init__(message)


class BlowUpError(_StepFailure, FloatingPointError):
    reason = 'non-finite state'


class DeterminantSignError(_StepFailure, ArithmeticError):
    reason = 'non-positive Jacobian determinant'
