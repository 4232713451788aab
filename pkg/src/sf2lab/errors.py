"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it as the
machine-parseable prefix of its one-line failure message.
"""


class Sf2Error(Exception):
    category = "error"


class ZeroVector(Sf2Error, ValueError):
    category = "zero-vector"


class NonFinite(Sf2Error, FloatingPointError):
    category = "non-finite"


class DomainError(Sf2Error, ValueError):
    category = "domain"


class DegenerateBatch(Sf2Error, ValueError):
    category = "degenerate-batch"


class InvariantViolation(Sf2Error, AssertionError):
    category = "invariant"


class InvalidConfig(Sf2Error, ValueError):
    category = "invalid-config"


class Infeasible(Sf2Error, ValueError):
    category = "infeasible"


class ParseError(Sf2Error, ValueError):
    category = "parse"

    def __init__(self, message, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{': '.join([', '.join(where), message]) if where else message}")
        self.path = path
        self.line = line
        self.offset = offset


class Diverged(Sf2Error, FloatingPointError):
    category = "diverged"


class DegenerateLabels(Sf2Error, ValueError):
    category = "degenerate-labels"


class ZeroVariance(Sf2Error, ValueError):
    category = "zero-variance"


class MissingId(Sf2Error, KeyError):
    category = "missing-id"

    def __str__(self):
        return str(self.args[0]) if self.args else "missing id"
