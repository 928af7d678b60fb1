"""Reverse-mode differentiation over real and complex numpy graphs."""
from . import ops
from .gradcheck import GradCheckReport, check_gradients, numerical_gradient
from .tape import Grad, Node, Tape, Var, backward

__all__ = ["ops", "Tape", "Var", "Node", "Grad", "backward", "check_gradients",
           "numerical_gradient", "GradCheckReport"]
