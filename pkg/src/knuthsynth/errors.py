"""Exception types shared across the package."""


class KnuthSynthError(Exception):
    """Base class for every error raised by knuthsynth."""


class ContractViolation(KnuthSynthError, ValueError):
    """A caller broke a documented precondition."""


class DimacsParseError(KnuthSynthError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = "line %d: %s" % (line, message)
        super().__init__(message)


class OracleBoundError(KnuthSynthError):
    """Brute-force oracle refused an instance that is too large."""


class IncompleteSearchError(KnuthSynthError):
    """Depth limit reached with open subproblems and nobody to finish them."""


class SatisfiableInstanceError(KnuthSynthError):
    """A satisfiable branch turned up where only UNSAT proofs make sense."""


class SubsolverError(KnuthSynthError):
    def __init__(self, message, output=""):
        self.output = output
        super().__init__(message)


class SubsolverTimeout(SubsolverError):
    pass


class SubsolverExitError(SubsolverError):
    def __init__(self, message, returncode, output=""):
        self.returncode = returncode
        super().__init__(message, output)


class SubsolverOutputError(SubsolverError):
    pass


class BridgeError(KnuthSynthError):
    pass


class DataError(KnuthSynthError, ValueError):
    pass
