"""Exception types raised by the solver stack.

Each failure mode named in the public contracts has its own class so callers
can catch it precisely; all of them derive from ``PenBsdeError``.
"""


class PenBsdeError(Exception):
    """Base class for every error raised by this package."""


class NotInOpenBall(PenBsdeError, ValueError):
    def __init__(self, detail=""):
        super().__init__("not in open ball" + (f": {detail}" if detail else ""))


class MajorantViolated(PenBsdeError):
    def __init__(self, path_index, rate, bound):
        self.path_index = int(path_index)
        super().__init__(
            f"majorant violated on path {self.path_index}: "
            f"total_rate {rate:.6g} > rate_bound {bound:.6g}"
        )


class Explosion(PenBsdeError, FloatingPointError):
    def __init__(self, step):
        self.step = int(step)
        super().__init__(f"explosion: non-finite state at step {self.step}")


class SingularDesign(PenBsdeError, ArithmeticError):
    def __init__(self, detail=""):
        super().__init__("singular design" + (f": {detail}" if detail else ""))


class StepBoundViolation(PenBsdeError, ValueError):
    def __init__(self, penalty, dt):
        super().__init__(
            f"penalty violates step bound: n*dt = {penalty}*{dt:.6g} = {penalty * dt:.6g} > 1"
        )


class CFLViolation(PenBsdeError, ValueError):
    def __init__(self, number):
        super().__init__(f"CFL condition violated: dt*(rates) = {number:.6g} > 1")


class DomainTooSmall(PenBsdeError, ValueError):
    def __init__(self, detail=""):
        super().__init__("domain too small" + (f": {detail}" if detail else ""))


class TruncationTooShort(PenBsdeError, ValueError):
    def __init__(self, tail):
        super().__init__(f"increase truncation: Poisson tail mass {tail:.3g} >= 1e-12")


class ConfigError(PenBsdeError, ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")
