"""Exception types shared across the package.

User-facing input problems derive from :class:`InputError`; the CLI maps
those to exit status 1 and everything else to exit status 2.
"""


class HierGnnError(Exception):
    """Base class for all package errors."""


class InputError(HierGnnError, ValueError):
    """Bad user input: malformed files, invalid configs, violated preconditions."""


class ParseError(InputError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class EmptyGraphError(InputError):
    pass


class EmptyDatasetError(InputError):
    pass


class ConfigError(InputError):
    pass


class ContractError(InputError):
    """A documented precondition of an operation does not hold."""


class StratificationError(InputError):
    pass


class LabelError(InputError):
    pass


class AlignmentError(InputError):
    pass


class SpecError(InputError):
    pass


class DomainError(InputError):
    pass


class CheckpointError(InputError):
    pass


class LevelExhaustionError(InputError):
    def __init__(self, level, n_nodes):
        self.level = level
        self.n_nodes = n_nodes
        super().__init__(
            f"coarse graph reached {n_nodes} node(s) at level {level}; "
            "cannot coarsen further"
        )


class ShapeError(HierGnnError, ValueError):
    pass


class NumericError(HierGnnError, ArithmeticError):
    pass


class TapeError(HierGnnError, RuntimeError):
    pass
