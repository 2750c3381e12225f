"""Finite-difference verification of every analytic backward pass.

Each suite builds a small component, projects its output onto a fixed random
direction and compares the analytic gradient of that scalar, for every
parameter and every input, with central differences.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from tkan.baselines import LstmHead, TransformerHead, attention, attention_backward
from tkan.encoder import FrameEncoder, conv2d_3x3, conv2d_3x3_backward, maxpool_2x2, maxpool_2x2_backward
from tkan.head import ClassifierHead, RkanSublayer, TkanCell
from tkan.metrics import cross_entropy, cross_entropy_grad
from tkan.model import GaitModel
from tkan.numerics import BatchNorm, split_rng
from tkan.spline import DeepKan, KanLayer

from .config import TrainConfig

logger = logging.getLogger(__name__)

TOLERANCE = 1e-5
EPSILON = 1e-6
# Denominator floor for tensors whose true gradient is zero, such as the attention key bias.
SCALE_FLOOR = 1e-2
SUITES = OrderedDict()


@dataclass
class GradCase:
    forward: object
    backward: object
    inputs: dict
    module: object = None


@dataclass
class SuiteResult:
    name: str
    errors: dict = field(default_factory=dict)
    tolerance: float = TOLERANCE

    @property
    def worst_tensor(self):
        return max(self.errors, key=self.errors.get) if self.errors else ""

    @property
    def worst(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self):
        return self.worst < self.tolerance


def suite(name):
    def register(builder):
        SUITES[name] = builder
        return builder

    return register


def numeric_gradient(f, array, eps=EPSILON):
    """Central differences of scalar ``f()`` with respect to ``array``, perturbed in place."""
    grad = np.zeros_like(array)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + eps
        plus = f()
        array[index] = original - eps
        minus = f()
        array[index] = original
        grad[index] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric, floor=SCALE_FLOOR):
    """``|a - n| / max(|a| + |n|, floor)``; below the floor the error is absolute."""
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_case(case, rng, eps=EPSILON):
    out, cache = case.forward(case.inputs)
    direction = rng.normal(size=np.shape(out))
    if case.module is not None:
        case.module.zero_grad()
    input_grads = case.backward(direction, cache)

    def loss():
        return float(np.sum(case.forward(case.inputs)[0] * direction))

    errors = OrderedDict()
    if case.module is not None:
        for name, value, grad in case.module.named_parameters():
            analytic = grad.copy()
            errors[name] = relative_error(analytic, numeric_gradient(loss, value, eps))
    for name, analytic in input_grads.items():
        errors[f"input:{name}"] = relative_error(analytic, numeric_gradient(loss, case.inputs[name], eps))
    return errors


def _sequence_case(module, X):
    return GradCase(
        forward=lambda inputs: module.forward(inputs["X"]),
        backward=lambda grad, cache: {"X": module.backward(grad, cache)},
        inputs={"X": X},
        module=module,
    )


@suite("kan_layer")
def kan_layer_case(rng):
    layer = KanLayer(4, 3, rng)
    return GradCase(
        forward=lambda inputs: layer.forward(inputs["x"]),
        backward=lambda grad, cache: {"x": layer.backward(grad, cache)},
        inputs={"x": rng.uniform(-0.9, 0.9, size=(5, 4))},
        module=layer,
    )


@suite("deep_kan")
def deep_kan_case(rng):
    net = DeepKan.from_widths((4, 5, 3), rng, rho="silu")
    return GradCase(
        forward=lambda inputs: net.forward(inputs["x"]),
        backward=lambda grad, cache: {"x": net.backward(grad, cache)},
        inputs={"x": rng.uniform(-0.9, 0.9, size=(5, 4))},
        module=net,
    )


@suite("rkan_step")
def rkan_step_case(rng):
    sublayer = RkanSublayer(6, 4, rng)

    def forward(inputs):
        response, h_t, cache = sublayer.step(inputs["x"], inputs["h"])
        return np.concatenate([response, h_t], axis=-1), cache

    def backward(grad, cache):
        dx, dh = sublayer.step_backward(grad[:, :4], grad[:, 4:], cache)
        return {"x": dx, "h": dh}

    return GradCase(
        forward,
        backward,
        {"x": rng.normal(0.0, 0.5, size=(3, 6)), "h": rng.normal(0.0, 0.5, size=(3, 4))},
        sublayer,
    )


@suite("tkan_cell")
def tkan_cell_case(rng):
    cell = TkanCell(6, rng, sub_width=4, num_sublayers=2)
    return _sequence_case(cell, rng.normal(0.0, 0.5, size=(2, 5, 6)))


@suite("lstm_head")
def lstm_head_case(rng):
    head = LstmHead(8, rng, widths=(6, 4))
    return _sequence_case(head, rng.normal(0.0, 0.5, size=(2, 4, 8)))


@suite("transformer_head")
def transformer_head_case(rng):
    head = TransformerHead(16, rng, heads=2, ff_width=32, num_layers=2, max_length=4)
    return _sequence_case(head, rng.normal(0.0, 0.5, size=(2, 4, 16)))


@suite("transformer_head_post_norm")
def transformer_post_norm_case(rng):
    head = TransformerHead(16, rng, heads=2, ff_width=32, num_layers=2, max_length=4, norm_first=False)
    return _sequence_case(head, rng.normal(0.0, 0.5, size=(2, 4, 16)))


@suite("cnn_encoder")
def cnn_encoder_case(rng):
    encoder = FrameEncoder(rng, channels=(2, 3, 4, 5), width=6, frame_size=16)
    return GradCase(
        forward=lambda inputs: encoder.encode_frames(inputs["frames"], training=True),
        backward=lambda grad, cache: {"frames": encoder.backward(grad, cache)},
        inputs={"frames": rng.uniform(0.05, 0.95, size=(3, 1, 16, 16))},
        module=encoder,
    )


@suite("classifier_loss")
def classifier_loss_case(rng):
    head = ClassifierHead(5, 4, rng, rate=0.0)
    labels = np.array([0, 3, 1])

    def forward(inputs):
        _, _, probs, cache = head.forward(inputs["H"])
        return np.array(cross_entropy(probs, labels)), (probs, cache)

    def backward(grad, cache):
        probs, head_cache = cache
        return {"H": head.backward(cross_entropy_grad(probs, labels) * grad, head_cache)}

    return GradCase(forward, backward, {"H": rng.normal(size=(3, 2, 5))}, head)


@suite("batchnorm")
def batchnorm_case(rng):
    norm = BatchNorm(3, axis=1)
    norm.gamma[...] = rng.uniform(0.5, 1.5, size=3)
    norm.beta[...] = rng.normal(size=3)
    return GradCase(
        forward=lambda inputs: norm.forward(inputs["x"], training=True),
        backward=lambda grad, cache: {"x": norm.backward(grad, cache)},
        inputs={"x": rng.normal(size=(4, 3, 2, 2))},
        module=norm,
    )


@suite("conv2d")
def conv2d_case(rng):
    def forward(inputs):
        return conv2d_3x3(inputs["x"], inputs["kernel"]), None

    def backward(grad, cache):
        dx, dkernel = conv2d_3x3_backward(inputs["x"], inputs["kernel"], grad)
        return {"x": dx, "kernel": dkernel}

    inputs = {"x": rng.normal(size=(2, 2, 5, 5)), "kernel": rng.normal(size=(3, 2, 3, 3))}
    return GradCase(forward, backward, inputs)


@suite("maxpool")
def maxpool_case(rng):
    return GradCase(
        forward=lambda inputs: maxpool_2x2(inputs["x"]),
        backward=lambda grad, argmax: {"x": maxpool_2x2_backward(grad, argmax)},
        inputs={"x": rng.normal(size=(2, 2, 4, 4))},
    )


@suite("attention")
def attention_case(rng):
    def backward(grad, weights):
        dq, dk, dv = attention_backward(inputs["Q"], inputs["K"], inputs["V"], weights, grad)
        return {"Q": dq, "K": dk, "V": dv}

    inputs = {name: rng.normal(size=(2, 3, 4)) for name in ("Q", "K", "V")}
    return GradCase(lambda values: attention(values["Q"], values["K"], values["V"]), backward, inputs)


@suite("gait_model")
def gait_model_case(rng):
    config = TrainConfig(
        head="tkan",
        width=8,
        sub_width=4,
        input_mode="features",
        clip_length=3,
        dropout=0.0,
        seed=int(rng.integers(1 << 30)),
    )
    model = GaitModel(config, 3)

    def forward(inputs):
        _, logits, _, cache = model.forward(inputs["X"], training=True)
        return logits, cache

    return GradCase(
        forward,
        lambda grad, cache: {"X": model.backward(grad, cache)},
        {"X": rng.normal(size=(2, 3, 8))},
        model,
    )


def run_suites(names=None, tolerance=TOLERANCE, seed=0, eps=EPSILON):
    names = list(names or SUITES)
    unknown = [name for name in names if name not in SUITES]
    if unknown:
        raise KeyError(f"unknown gradcheck suite(s): {', '.join(unknown)}")
    results = []
    for name in names:
        rng = split_rng(seed, f"gradcheck:{name}")
        errors = check_case(SUITES[name](rng), rng, eps)
        result = SuiteResult(name, errors, tolerance)
        logger.info("gradcheck %s: worst %.3e (%s)", name, result.worst, result.worst_tensor)
        results.append(result)
    return results


def format_report(results):
    lines = ["suite\tworst_rel_error\ttensor\tstatus"]
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        lines.append(f"{result.name}\t{result.worst:.3e}\t{result.worst_tensor}\t{status}")
    return "\n".join(lines) + "\n"
