"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`BinauralError`.  :class:`DataError` covers bad inputs (files, shapes,
ranges); the CLI maps those to exit code 2.
"""


class BinauralError(Exception):
    pass


class DataError(BinauralError, ValueError):
    pass


# audio_io
class MalformedHeader(DataError):
    pass


class UnsupportedEncoding(DataError):
    pass


class TruncatedData(DataError):
    pass


class NonUniformRate(DataError):
    pass


class BadRow(DataError):
    def __init__(self, line_no, reason=""):
        self.line_no = line_no
        msg = f"bad row at line {line_no}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class ZeroNormQuaternion(DataError):
    def __init__(self, line_no):
        self.line_no = line_no
        super().__init__(f"zero-norm quaternion at line {line_no}")


class EmptyTrack(DataError):
    pass


class WrongChannelCount(DataError):
    pass


# shared shape / range errors
class LengthMismatch(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class RateMismatch(DataError):
    pass


class BadRange(DataError):
    pass


class StepOutOfRange(DataError):
    pass


# dsp_render
class PointOutsideRoom(DataError):
    pass


class EmptyHrtfBank(DataError):
    pass


# denoiser_net
class StaleContext(BinauralError):
    pass


class BadMagic(DataError):
    pass


class VersionMismatch(DataError):
    pass


class CorruptArray(DataError):
    def __init__(self, name, reason="truncated"):
        self.name = name
        super().__init__(f"corrupt array {name!r}: {reason}")


# two_stage
class MissingStage2Conditioner(DataError):
    pass


class EmptyDataset(DataError):
    pass


class StageConfigMismatch(DataError):
    pass


# eval_metrics
class BadConfig(DataError):
    pass


class SilentReference(DataError):
    pass


class MissingPrediction(DataError):
    def __init__(self, row, path):
        self.row = row
        self.path = path
        super().__init__(f"missing prediction for row {row}: {path}")


# cli / config
class ConfigError(BinauralError):
    pass
