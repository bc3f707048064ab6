"""
Exception hierarchy for the SRIR workbench.

Every module raises a subclass of SRIRWorkbenchError so the command line
entry point can report failures as one machine-parsable line.
"""


class SRIRWorkbenchError(Exception):
    """Base class for all workbench errors"""
    pass


class ShapeError(SRIRWorkbenchError):
    """Tensor shape does not match what a layer or network expects"""
    pass


class GradientError(SRIRWorkbenchError):
    """Backward pass or gradient check could not be performed"""
    pass


class CheckpointError(SRIRWorkbenchError):
    """Checkpoint container is malformed or inconsistent"""
    pass


class GeometryError(SRIRWorkbenchError):
    """Room, source or receiver geometry is invalid"""
    pass


class AnalysisError(SRIRWorkbenchError):
    """Acoustic parameter could not be estimated from a response"""
    pass


class FeatureError(SRIRWorkbenchError):
    """Audio scene cannot be converted into encoder features"""
    pass


class ConfigurationError(SRIRWorkbenchError):
    """Invalid or inconsistent configuration"""
    pass


class DatasetError(SRIRWorkbenchError):
    """Dataset files are missing, malformed or insufficient"""
    pass


class TrainingError(SRIRWorkbenchError):
    """Training cannot start or diverged"""
    pass
