from .optim import AdamState, adam_step, collect_grads, zero_grads
from .tensor import (
    Tensor, add, as_tensor, clamp_min, concat, conv1d, cosine_sim, cross_entropy, div,
    exp, gelu, l2_normalize, layer_norm, linear, log, log_softmax, logsumexp,
    masked_fill, matmul, mean, mul, no_grad, parameter, power, reshape, softmax,
    sqrt, stack, sub, take, tanh, transpose, tsum,
)
