from .adam import AdamState, adam_step
from .autodiff import Tape, Var, finite_diff_grad, reverse_grad
from .linalg import NotPositiveDefiniteError, cholesky, inv_pd, log_det_pd, solve_pd

__all__ = [
    "AdamState",
    "NotPositiveDefiniteError",
    "Tape",
    "Var",
    "adam_step",
    "cholesky",
    "finite_diff_grad",
    "inv_pd",
    "log_det_pd",
    "reverse_grad",
    "solve_pd",
]
