"""Exception taxonomy shared by all stepline modules.

Manifest problems (anything the user can fix by editing pipeline.toml or
the command line) derive from ManifestError and map to exit code 2 in the
CLI; graph construction problems are also configuration errors.
"""

from __future__ import annotations


class SteplineError(Exception):
    """Base class for every error raised by stepline."""


class ManifestError(SteplineError):
    """A problem with the pipeline manifest or its use."""


class ManifestSyntaxError(ManifestError):
    """The manifest document is malformed (TOML or field shapes)."""


class DuplicateDefinitionError(ManifestError):
    """A parameter, template alias, task name or recording is defined twice."""


class UnknownReferenceError(ManifestError):
    """A task references a parameter, placeholder or name that does not exist."""


class MissingTargetsError(ManifestError):
    """A task declares no targets (every step must save its results)."""


class KindViolationError(ManifestError):
    """A task mixes per-recording and aggregate roles."""


class UnknownAliasError(ManifestError):
    """A filename template alias is not registered."""


class MissingBindingError(ManifestError):
    """A template placeholder has no binding during expansion."""


class GraphError(SteplineError):
    """A problem building or querying the dependency graph."""


class DuplicateProducerError(GraphError):
    """Two task instances declare the same target path."""


class CycleDetectedError(GraphError):
    """The declared file dependencies form a cycle."""

    def __init__(self, cycle: list[str]):
        self.cycle = list(cycle)
        closed = self.cycle + [self.cycle[0]] if self.cycle else []
        super().__init__("dependency cycle: " + " -> ".join(closed))


class UnknownInstanceError(SteplineError):
    """A selection names a task instance that does not exist."""


class LockHeldError(SteplineError):
    """Another stepline invocation holds the pipeline lock."""


class StateStoreError(SteplineError):
    """The persisted run state cannot be read."""
