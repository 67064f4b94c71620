"""Exception hierarchy. Every error carries a short machine-greppable code."""


class IALGCAError(Exception):
    code = "E_GENERIC"


class ContractError(IALGCAError):
    code = "E_CONTRACT"


class ShapeError(IALGCAError):
    code = "E_SHAPE"

    def __init__(self, primitive, *shapes, detail=""):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(s) for s in self.shapes)
        msg = f"{primitive}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericOverflowError(IALGCAError):
    code = "E_NUMERIC"

    def __init__(self, primitive):
        self.primitive = primitive
        super().__init__(f"{primitive}: non-finite value in output")


class OracleInvalidError(IALGCAError):
    code = "E_ORACLE"


class ConfigError(IALGCAError):
    code = "E_CONFIG"


class ClipIOError(IALGCAError):
    code = "E_IO"


class TrainingDivergedError(IALGCAError):
    code = "E_DIVERGED"
