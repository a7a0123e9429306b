from .autodiff import (Parameter, Tensor, add, center, concat, elu, gather_rows, leaky_relu,
                       matmul, mean, mul, row_softmax, scale, segment_softmax, segment_sum,
                       square, sub, total)
from .hsic import gaussian_kernel, hsic, median_bandwidth
from .layers import Adam, AttentionGraph, AttentionLayer, Dense

__all__ = [
    "Adam", "AttentionGraph", "AttentionLayer", "Dense", "Parameter", "Tensor", "add", "center",
    "concat", "elu", "gather_rows", "gaussian_kernel", "hsic", "leaky_relu", "matmul", "mean",
    "median_bandwidth", "mul", "row_softmax", "scale", "segment_softmax", "segment_sum", "square",
    "sub", "total",
]
