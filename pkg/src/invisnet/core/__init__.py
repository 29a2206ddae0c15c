from . import functional, ntsr
from .functional import bilinear_upsample, conv2d, leaky_relu, max_pool2d, sigmoid
from .nn import Conv2d, ConvAct, Module
from .optim import SGD, Adam, NonFiniteGradientError, make_optimizer
from .tensor import Graph, Parameter, Tensor, backward, concat

__all__ = [
    "Adam",
    "Conv2d",
    "ConvAct",
    "Graph",
    "Module",
    "NonFiniteGradientError",
    "Parameter",
    "SGD",
    "Tensor",
    "backward",
    "bilinear_upsample",
    "concat",
    "conv2d",
    "functional",
    "leaky_relu",
    "make_optimizer",
    "max_pool2d",
    "ntsr",
    "sigmoid",
]
