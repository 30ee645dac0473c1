"""Analytic-vs-finite-difference gradient cases, one generator per op type.

Each case draws small random inputs, runs the engine op under a random linear
read-out to get a scalar, and compares the engine gradient of every input
with central differences of the float64 reference implementation.
"""

import numpy as np

import reference as ref
from clat import tensor as T
from clat.network import build_network
from clat.tensor import Tensor


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.uniform(gap, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    # well-separated values so max-pool argmaxes are stable under +-h
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) - n / 2) * (2.0 / n)


def _case(inputs, engine, oracle):
    return inputs, engine, oracle


def case_add(rng):
    s = tuple(rng.integers(1, 5, size=2))
    return _case({"a": rng.normal(size=s), "b": rng.normal(size=s)},
                 lambda t: T.add(t["a"], t["b"]), lambda a: a["a"] + a["b"])


def case_add_scalar(rng):
    s = tuple(rng.integers(1, 5, size=2))
    return _case({"a": rng.normal(size=s), "b": rng.normal(size=())},
                 lambda t: T.add(t["a"], t["b"]), lambda a: a["a"] + a["b"])


def case_sub(rng):
    s = tuple(rng.integers(1, 5, size=3))
    return _case({"a": rng.normal(size=s), "b": rng.normal(size=s)},
                 lambda t: T.sub(t["a"], t["b"]), lambda a: a["a"] - a["b"])


def case_mul(rng):
    s = tuple(rng.integers(1, 5, size=2))
    return _case({"a": rng.normal(size=s), "b": rng.normal(size=s)},
                 lambda t: T.mul(t["a"], t["b"]), lambda a: a["a"] * a["b"])


def case_scale(rng):
    s = tuple(rng.integers(1, 5, size=2))
    c = float(rng.normal())
    return _case({"a": rng.normal(size=s)}, lambda t: T.mul(t["a"], c), lambda a: a["a"] * np.float32(c))


def case_relu(rng):
    s = tuple(rng.integers(1, 6, size=2))
    return _case({"x": _away_from_zero(rng, s)}, lambda t: T.relu(t["x"]), lambda a: ref.relu(a["x"]))


def case_matmul(rng):
    n, k, m = rng.integers(1, 6, size=3)
    return _case({"a": rng.normal(size=(n, k)), "b": rng.normal(size=(k, m))},
                 lambda t: T.matmul(t["a"], t["b"]), lambda a: a["a"] @ a["b"])


def case_add_bias(rng):
    s = (int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    return _case({"x": rng.normal(size=s), "b": rng.normal(size=s[1])},
                 lambda t: T.add_bias(t["x"], t["b"]),
                 lambda a: a["x"] + a["b"].reshape((1, -1, 1)))


def case_conv2d(rng):
    n, c, f = (int(v) for v in rng.integers(1, 3, size=3))
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    size = (int(rng.integers(1, 4)) - 1) * stride + k - 2 * pad
    if size < 1:
        size, pad = size + 2 * pad, 0
    inputs = {"x": rng.normal(size=(n, c, size, size)), "w": rng.normal(size=(f, c, k, k)),
              "b": rng.normal(size=f)}
    return _case(inputs, lambda t: T.conv2d(t["x"], t["w"], t["b"], stride, pad),
                 lambda a: ref.conv2d(a["x"], a["w"], a["b"], stride, pad))


def case_maxpool(rng):
    s = int(rng.integers(1, 3))
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), s * int(rng.integers(1, 4)),
             s * int(rng.integers(1, 4)))
    return _case({"x": _distinct(rng, shape)}, lambda t: T.maxpool2d(t["x"], s),
                 lambda a: ref.maxpool2d(a["x"], s))


def case_avgpool(rng):
    s = int(rng.integers(1, 4))
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), s * int(rng.integers(1, 3)),
             s * int(rng.integers(1, 3)))
    return _case({"x": rng.normal(size=shape)}, lambda t: T.avgpool2d(t["x"], s),
                 lambda a: ref.avgpool2d(a["x"], s))


def case_flatten(rng):
    shape = tuple(int(v) for v in rng.integers(1, 4, size=4))
    return _case({"x": rng.normal(size=shape)}, lambda t: T.flatten(t["x"]),
                 lambda a: a["x"].reshape(shape[0], -1))


def case_sum(rng):
    shape = tuple(int(v) for v in rng.integers(1, 5, size=2))
    return _case({"x": rng.normal(size=shape)}, lambda t: T.sum(t["x"]), lambda a: np.sum(a["x"]))


def case_mean(rng):
    shape = tuple(int(v) for v in rng.integers(1, 5, size=3))
    return _case({"x": rng.normal(size=shape)}, lambda t: T.mean(t["x"]), lambda a: np.mean(a["x"]))


def case_l2_norm(rng):
    shape = tuple(int(v) for v in rng.integers(1, 5, size=2))
    return _case({"x": rng.normal(size=shape)}, lambda t: T.l2_norm(t["x"]),
                 lambda a: np.sqrt(np.sum(a["x"] ** 2)))


def case_row_norms(rng):
    shape = tuple(int(v) for v in rng.integers(1, 4, size=3))
    return _case({"x": rng.normal(size=shape)}, lambda t: T.row_norms(t["x"]),
                 lambda a: ref.row_norms(a["x"]))


def case_cross_entropy(rng):
    n, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    y = rng.integers(0, k, size=n)
    reduction = ["mean", "sum", "none"][int(rng.integers(0, 3))]
    reduce = {"mean": np.mean, "sum": np.sum, "none": lambda v: v}[reduction]
    return _case({"z": 3 * rng.normal(size=(n, k))},
                 lambda t: T.softmax_cross_entropy(t["z"], y, reduction),
                 lambda a: reduce(ref.cross_entropy(a["z"], y)))


def _layer_case(rng, layers, input_shape, classes, margin=0.005):
    # redraw until every ReLU input and max-pool tie is farther than the step from its kink
    while True:
        net = build_network(layers, input_shape, classes, seed=int(rng.integers(1 << 30)))
        arch = net.architecture()
        n = int(rng.integers(1, 4))
        inputs = {"x": rng.uniform(0, 1, size=(n,) + tuple(input_shape))}
        for spec in net.layers:
            inputs[f"w{spec.index}"] = spec.weight.data.astype(float)
            inputs[f"b{spec.index}"] = rng.normal(scale=0.1, size=spec.bias.shape)
        params = [(inputs[f"w{i}"], inputs[f"b{i}"]) for i in range(1, net.depth + 1)]
        if ref.kink_margin(arch, params, inputs["x"]) > margin:
            break

    def engine(t):
        for spec in net.layers:
            spec.weight, spec.bias = t[f"w{spec.index}"], t[f"b{spec.index}"]
        return net.forward(t["x"])

    def oracle(a):
        params = [(a[f"w{i}"], a[f"b{i}"]) for i in range(1, net.depth + 1)]
        return ref.network_forward(arch, params, a["x"])[0]

    return _case(inputs, engine, oracle)


def case_dense_layer(rng):
    return _layer_case(rng, ["dense 5 relu", "dense 3"], (int(rng.integers(2, 7)),), 3)


def case_conv_layer(rng):
    return _layer_case(rng, ["conv 3 k=3 pad=1 relu maxpool:2", "conv 2 k=3 pad=1 relu avgpool:2", "dense 3"],
                       (1, 4, 4), 3)


def case_conv_flatten_layer(rng):
    return _layer_case(rng, ["conv 2 k=2 stride=2 relu flatten", "dense 2"], (2, 4, 4), 2)


CASES = {
    "add": case_add, "add_scalar": case_add_scalar, "sub": case_sub, "mul": case_mul,
    "scale": case_scale, "relu": case_relu, "matmul": case_matmul, "add_bias": case_add_bias,
    "conv2d": case_conv2d, "maxpool2d": case_maxpool, "avgpool2d": case_avgpool,
    "flatten": case_flatten, "sum": case_sum, "mean": case_mean, "l2_norm": case_l2_norm,
    "row_norms": case_row_norms, "softmax_cross_entropy": case_cross_entropy,
    "dense_layer": case_dense_layer, "conv_layer": case_conv_layer,
    "conv_flatten_layer": case_conv_flatten_layer,
}


def check_case(make, rng) -> float:
    """Worst normwise relative error over the inputs of one random case."""
    inputs, engine, oracle = make(rng)
    # round inputs to float32 so both sides see the same point
    inputs = {k: np.asarray(v, np.float32).astype(float) for k, v in inputs.items()}
    tensors = {k: Tensor(v, requires_grad=True) for k, v in inputs.items()}
    out = engine(tensors)
    readout = rng.normal(size=out.shape)
    loss = T.sum(T.mul(out, Tensor(readout)))
    grads = T.backward(loss, list(tensors.values()))
    worst = 0.0
    for name, value in inputs.items():
        def scalar(v, name=name):
            args = dict(inputs)
            args[name] = v
            return float(np.sum(np.asarray(oracle(args)) * readout))
        numeric = ref.central_difference(scalar, value)
        worst = max(worst, ref.normwise_relative_error(grads[tensors[name]], numeric))
    return worst
