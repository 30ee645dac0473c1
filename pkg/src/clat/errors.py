"""Exception hierarchy.  Each class carries a short ``category`` tag that the
CLI prints on stderr before exiting non-zero."""


class ClatError(Exception):
    category = "error"


class UsageError(ClatError, ValueError):
    category = "usage"


class DimensionError(ClatError, ValueError):
    category = "dimension"


class ConfigurationError(ClatError, ValueError):
    category = "configuration"


class InputError(ClatError, ValueError):
    category = "input"


class DegenerateFeatureError(ClatError, ArithmeticError):
    category = "degenerate-feature"

    def __init__(self, layer, message=None):
        self.layer = layer
        super().__init__(message or f"layer {layer} has zero weakness; criticality of layer {layer + 1} is undefined")


class FormatError(ClatError, ValueError):
    category = "format"


class CorruptionError(FormatError):
    category = "corruption"


class ConsistencyError(FormatError):
    category = "consistency"


class CompatibilityError(ClatError):
    category = "compatibility"


class ConfigError(ClatError):
    category = "config"

    def __init__(self, message, line=None, source=None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class ParseError(ClatError):
    category = "parse"

    def __init__(self, message, row=None, source=None):
        self.row = row
        where = f"{source or '<csv>'}" + (f" row {row}" if row is not None else "")
        super().__init__(f"{where}: {message}")
