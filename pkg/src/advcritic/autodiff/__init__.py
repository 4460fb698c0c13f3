"""Dense float64 tensors with reverse-mode, higher-order differentiation."""

from advcritic.autodiff.node import (
    DTYPE,
    AutodiffError,
    Graph,
    GradientMap,
    Node,
    NonFiniteError,
    ShapeError,
    UnboundPlaceholderError,
    as_node,
    constant,
    finite_checks,
    forward,
    grad,
    grad_enabled,
    gradient,
    no_grad,
    parameter,
    second_gradient,
)
from advcritic.autodiff.ops import (
    add,
    broadcast_to,
    clamp,
    conv2d,
    div,
    exp,
    flatten,
    gaussian_noise,
    l2norm,
    leaky_relu,
    less,
    log,
    log_sigmoid,
    log_softmax,
    matmul,
    max,
    max_pool2d,
    mean,
    mul,
    neg,
    pick,
    power,
    relu,
    reshape,
    safe_recip,
    sigmoid,
    sign,
    softmax,
    softplus,
    sq_l2norm,
    square,
    stop_gradient,
    stop_or_reroute_gradient,
    straight_through_indicator,
    sub,
    sum,
    take_rows,
    transpose,
)
