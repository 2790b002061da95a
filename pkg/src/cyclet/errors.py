"""Exception hierarchy shared by every cyclet module.

Each class carries the CLI exit code it maps to, so ``cli.main`` can turn any
failure into the right process status without a lookup table.
"""


class CycletError(Exception):
    exit_code = 3


class ConfigError(CycletError):
    exit_code = 1


class DataError(CycletError):
    exit_code = 2

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class ShapeError(CycletError, ValueError):
    """Raised by a forward op when its inputs have incompatible dimensions."""

    def __init__(self, op: str, detail: str):
        self.op = op
        self.detail = detail
        super().__init__(f"{op}: {detail}")


class GraphError(CycletError, RuntimeError):
    """Raised when backward is asked to differentiate something it never recorded."""


class OptimError(CycletError, RuntimeError):
    pass
