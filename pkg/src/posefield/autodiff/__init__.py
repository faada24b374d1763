"""Minimal reverse-mode autodiff on numpy arrays, plus a Jacobi SVD."""

from .svd import ConvergenceFailure, jacobi_svd, null_vector, svd3, svd_small
from .tensor import (
    NotScalarLoss,
    ShapeMismatch,
    Tape,
    Tensor,
    abs_,
    add,
    astype,
    as_tensor,
    backward,
    concat,
    cos,
    cumsum,
    div,
    exp,
    expand,
    l1_norm,
    l2_norm,
    linear,
    log,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    rodrigues_coefficients,
    sigmoid,
    sin,
    slice_,
    sqrt,
    square,
    stack,
    sub,
    sum_,
    take,
    transpose,
    where,
)
