# utils/errors.py

class MavgramError(Exception):
    """Base class for every error raised by the utils package"""


class ConfigError(MavgramError, ValueError):
    """Bad config file, unknown key or out-of-range value"""


class ManifestError(MavgramError, ValueError):
    """Malformed manifest record; the message names the line number"""


class AudioFormatError(MavgramError, ValueError):
    """Sample file with an encoding or channel layout we do not read"""


class CheckpointError(MavgramError, ValueError):
    """Unreadable, truncated or inconsistent checkpoint / cache file"""


class ConfigMismatchError(CheckpointError):
    """Checkpoint was produced under a different feature/model config"""
