"""Exception hierarchy. Every error carries a short machine-readable ``code``."""


class PhyCustomError(Exception):
    code = "E_PHYCUSTOM"


class ConfigError(PhyCustomError):
    code = "E_CONFIG"


class DataError(PhyCustomError):
    code = "E_DATA"


class ManifestError(DataError):
    code = "E_MANIFEST"


class CheckpointError(PhyCustomError):
    code = "E_CHECKPOINT"


class TrainingError(PhyCustomError):
    code = "E_TRAINING"


class ProbeError(PhyCustomError):
    code = "E_PROBE"
