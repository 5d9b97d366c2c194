"""Float64 tensors, reverse-mode autodiff, seeded RNG and SGD."""

from selrobust.tensor.gradcheck import GradCheckReport, finite_difference_check
from selrobust.tensor.ops import forward_op
from selrobust.tensor.optim import OptimizerState, sgd_step, step_learning_rate
from selrobust.tensor.rng import Rng
from selrobust.tensor.stns import read_stns, write_stns
from selrobust.tensor.tensor import Function, Tensor, as_tensor, is_grad_enabled, no_grad

__all__ = [
    "Function",
    "GradCheckReport",
    "OptimizerState",
    "Rng",
    "Tensor",
    "as_tensor",
    "finite_difference_check",
    "forward_op",
    "is_grad_enabled",
    "no_grad",
    "read_stns",
    "sgd_step",
    "step_learning_rate",
    "write_stns",
]
