"""
Exception types raised across okgrad
"""


class OkGradError(Exception):
    """Base class for all okgrad errors"""


class ShapeError(OkGradError, ValueError):
    """Dimension mismatch or malformed numeric input"""


class ConvergenceError(OkGradError):
    """Iterative routine hit its iteration cap"""

    def __init__(self, message, iterations):
        super().__init__(f"{message} (after {iterations} iterations)")
        self.iterations = iterations


class DivergenceError(OkGradError):
    """NaN or Inf showed up in activations, losses or gradients"""


class DenseCapError(OkGradError):
    """Materializing a dense matrix would exceed the configured cap"""

    def __init__(self, requested, cap):
        super().__init__(f"dense size {requested} exceeds cap {cap}")
        self.requested = requested
        self.cap = cap


class VocabError(OkGradError, KeyError):
    """Character not present in the vocabulary"""

    def __init__(self, codepoint):
        super().__init__(f"character U+{codepoint:04X} ({chr(codepoint)!r}) not in vocabulary")
        self.codepoint = codepoint

    def __str__(self):
        return self.args[0]


class EnumerationError(OkGradError):
    """Exhaustive enumeration would be too large"""
