"""Failure modes shared across the solver, policy, and simulator layers."""


class NonPositiveGain(RuntimeError):
    """Control-weight matrix U or V lost positive definiteness.

    Below the threshold the inverse in the feedback law is numerically
    meaningless, so computations fail fast with the offending time and
    eigenvalue.
    """

    def __init__(self, t, min_eig, which="U"):
        self.t = t
        self.min_eig = min_eig
        self.which = which
        super().__init__(
            f"gain matrix {which} not positive definite at t={t:.6g} "
            f"(min eigenvalue {min_eig:.3e})"
        )


class NumericalBlowup(RuntimeError):
    """A state or solution entry exceeded 1e12 in magnitude or became NaN."""

    def __init__(self, where, detail=""):
        self.where = where
        msg = f"numerical blowup at {where}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class DomainError(ValueError):
    """Inputs outside the mathematical domain of a closed-form expression."""
