"""Exception hierarchy shared by every pipeline stage."""


class FabricPhysError(Exception):
    """Base class; the CLI maps these to exit status 1."""


class ConfigError(FabricPhysError):
    pass


class InvalidMeshError(FabricPhysError):
    pass


class DegenerateGeometryError(FabricPhysError):
    pass


class SimulationInstability(FabricPhysError):
    def __init__(self, dt, step=None, detail=""):
        self.dt = dt
        self.step = step
        msg = f"simulation became unstable with dt={dt:.6g} s"
        if step is not None:
            msg += f" at substep {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class InvalidInputError(FabricPhysError):
    pass


class SamplingError(FabricPhysError):
    pass


class NumericError(FabricPhysError):
    pass


class TrainingError(FabricPhysError):
    def __init__(self, epoch, detail=""):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}" + (f": {detail}" if detail else ""))
