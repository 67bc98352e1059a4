from . import functional
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, NonFiniteLoss, grad_check
from .nn import BatchNorm, LayerNorm, Linear, MLP, Module, MultiHeadAttention, Parameter, shape_only
from .optim import AdamW, ParamStore, adamw_step
from .tensor import (GraphError, ShapeError, Tensor, abs_, as_tensor, concat, default_dtype, exp, gelu,
                     get_default_dtype, log, log_sigmoid, masked_fill, matmul, max_, maximum, mean, no_grad,
                     relu, scatter_rows, sigmoid, softplus, sqrt, stack, sum_, take_rows, tanh, where)
