"""Shared exception taxonomy; the CLI maps these onto exit codes."""


class VoxpartError(Exception):
    pass


class DataError(VoxpartError):
    """Missing/corrupt inputs, bad file formats, bad references."""


class NumericError(VoxpartError):
    """Numerical failure: divergence, non-finite values, impossible geometry."""
