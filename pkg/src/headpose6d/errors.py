"""Exception hierarchy shared by all modules."""


class HeadPoseError(ValueError):
    pass


class DegenerateInput(HeadPoseError):
    pass


class BehindCamera(HeadPoseError):
    def __init__(self, index, depth):
        super().__init__(f"point {index} has depth {depth:.3g} <= 1e-6")
        self.index = index
        self.depth = depth


class DegenerateBox(HeadPoseError):
    pass


class NonPositiveDepth(HeadPoseError):
    pass


class DegenerateCloud(HeadPoseError):
    pass


class ShapeMismatch(HeadPoseError):
    pass


class IndexOutOfRange(HeadPoseError):
    pass


class StaleCache(HeadPoseError):
    pass


class Unprojectable(HeadPoseError):
    pass


class ConfigError(HeadPoseError):
    pass


class IoFailure(HeadPoseError):
    pass
