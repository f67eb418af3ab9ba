"""Float64 tensor core: taped reverse-mode gradients plus FD verification."""
from .gradcheck import assert_grad_check, grad_check
from .ops import (add, conv1d, conv1d_transpose, embedding_lookup, gelu,
                  layer_norm, linear, matmul, mean_all, mul, pool_pairs,
                  repeat_rows, reshape, scale, scaled_dot_attention,
                  softmax_lastdim, softmax_xent, softmax_xent_masked, sub,
                  sum_all, sum_axis, tanh, transpose_last2)
from .tensor import (ContractError, DiffcoreError, NonFiniteError, ParamSet,
                     ShapeError, Tensor, const, grad_enabled, no_grad, param)

__all__ = [
    "Tensor", "ParamSet", "const", "param", "no_grad", "grad_enabled",
    "DiffcoreError", "ShapeError", "NonFiniteError", "ContractError",
    "add", "sub", "mul", "scale", "tanh", "gelu", "matmul",
    "transpose_last2", "reshape", "linear", "sum_all", "sum_axis",
    "mean_all", "softmax_lastdim", "layer_norm", "scaled_dot_attention",
    "conv1d", "conv1d_transpose", "pool_pairs", "repeat_rows",
    "embedding_lookup", "softmax_xent", "softmax_xent_masked",
    "grad_check", "assert_grad_check",
]
