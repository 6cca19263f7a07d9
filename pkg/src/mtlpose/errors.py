"""The exception hierarchy.

Every failure the workbench reports is an :class:`Error`; callers that want
to keep going (the experiment matrix, the CLI actions) catch the root class.
"""


class Error(Exception): pass


class InvalidInput(Error): pass


class BehindCamera(Error):
    def __init__(self, index: int, depth: float) -> None:
        super().__init__(f"point {index} is behind the camera (z={depth!r} m)")
        self.index = index  #: Offending point index
        self.depth = depth


class GenerationError(Error): pass


class DegenerateSample(Error): pass


class CorruptDataset(Error):
    def __init__(self, sample: str, reason: str) -> None:
        super().__init__(f"corrupt sample {sample!r}: {reason}")
        self.sample = sample


class DegenerateQuaternion(Error): pass


class InvalidBox(Error): pass


class InsufficientPoints(Error): pass


class DegenerateGeometry(Error): pass


class SolverFailure(Error): pass


class ShapeMismatch(Error):
    def __init__(self, op: str, *shapes: tuple[int, ...]) -> None:
        shape_text = ", ".join(str(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shape_text}")
        self.op = op
        self.shapes = shapes


class InvalidConfig(Error): pass


class TrainingDiverged(Error):
    def __init__(self, message: str, report: dict[str, object] | None = None) -> None:
        super().__init__(message)
        self.report = report or {}  #: Weights, losses and step at divergence


class StrategyNotApplicable(Error): pass


class InvalidRequest(Error): pass


class CorruptCheckpoint(Error): pass
