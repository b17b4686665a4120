"""Self-contained gradient verification suite.

Every differentiable component gets a named check that compares its tape
gradient against central finite differences on a tiny, seeded instance.
The CLI exposes the suite directly and the test suite reruns it, so the
one list below is the single inventory of what "all gradients verified"
means for this package.
"""

from __future__ import annotations

import numpy as np

from .flow import ActNorm, AffineCoupling, FlowModel, Invertible1x1
from .losses import (
    LabelMap,
    LossWeights,
    ProbMap,
    TauConfig,
    bimal_loss,
    entropy_loss,
    supervised_ce,
    tau_smoothness,
    total_objective,
)
from .numerics import (
    Param,
    Tensor,
    apply_primitive,
    conv2d,
    finite_diff_check,
    log_softmax_channels,
    matmul_channels,
    squeeze2x2,
    unsqueeze2x2,
)

__all__ = ["GRADIENT_CHECKS", "run_gradient_suite", "CheckResult"]


def _weights(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    # offset from zero so log/div stay in-domain under small perturbations
    return rng.uniform(0.3, 1.2, size=shape)


def _project(x: Tensor, rng: np.random.Generator) -> Tensor:
    """Random fixed projection to a scalar, so vector grads are exercised."""
    w = Tensor(rng.normal(0.0, 1.0, size=x.shape))
    return (x * w).sum()


def _check_binary(name: str):
    def check(eps: float) -> float:
        rng = np.random.default_rng(11)
        a = Param(_weights(rng, (3, 4)), "a")
        b = Param(_weights(rng, (3, 4)), "b")
        proj = rng.normal(size=(3, 4))

        def loss():
            return (apply_primitive(name, [a.value, b.value]) * Tensor(proj)).sum()

        return finite_diff_check(loss, [a, b], eps)

    return check


def _check_unary(name: str):
    def check(eps: float) -> float:
        rng = np.random.default_rng(13)
        a = Param(_weights(rng, (3, 4)), "a")
        proj = rng.normal(size=(3, 4))

        def loss():
            return (apply_primitive(name, [a.value]) * Tensor(proj)).sum()

        return finite_diff_check(loss, [a], eps)

    return check


def _check_reduction(name: str):
    def check(eps: float) -> float:
        rng = np.random.default_rng(17)
        a = Param(_weights(rng, (3, 4)), "a")

        def loss():
            return apply_primitive(name, [a.value])

        return finite_diff_check(loss, [a], eps)

    return check


def _check_reshape(eps: float) -> float:
    rng = np.random.default_rng(19)
    a = Param(_weights(rng, (3, 4)), "a")
    proj = rng.normal(size=(2, 6))

    def loss():
        return (a.value.reshape((2, 6)) * Tensor(proj)).sum()

    return finite_diff_check(loss, [a], eps)


def _check_broadcast(eps: float) -> float:
    rng = np.random.default_rng(23)
    a = Param(_weights(rng, (1, 4)), "a")
    proj = rng.normal(size=(3, 4))

    def loss():
        return (apply_primitive("broadcast", [a.value], shape=(3, 4)) * Tensor(proj)).sum()

    return finite_diff_check(loss, [a], eps)


def _check_slice(eps: float) -> float:
    rng = np.random.default_rng(29)
    a = Param(_weights(rng, (4, 5)), "a")
    proj = rng.normal(size=(2, 5))

    def loss():
        sl = apply_primitive("slice", [a.value], axis=0, start=1, stop=3)
        return (sl * Tensor(proj)).sum()

    return finite_diff_check(loss, [a], eps)


def _check_concat(eps: float) -> float:
    rng = np.random.default_rng(31)
    a = Param(_weights(rng, (2, 3)), "a")
    b = Param(_weights(rng, (2, 3)), "b")
    proj = rng.normal(size=(2, 6))

    def loss():
        return (apply_primitive("concat", [a.value, b.value], axis=1) * Tensor(proj)).sum()

    return finite_diff_check(loss, [a, b], eps)


def _check_matmul(eps: float) -> float:
    rng = np.random.default_rng(37)
    x = Param(_weights(rng, (2, 3, 4)), "x")
    w = Param(rng.normal(0.0, 0.5, size=(4, 4)), "w")
    proj = rng.normal(size=(2, 3, 4))

    def loss():
        return (matmul_channels(w.value, x.value) * Tensor(proj)).sum()

    return finite_diff_check(loss, [x, w], eps)


def _check_conv2d(eps: float) -> float:
    rng = np.random.default_rng(41)
    x = Param(_weights(rng, (4, 4, 2)), "x")
    k = Param(rng.normal(0.0, 0.3, size=(3, 3, 2, 3)), "k")
    b = Param(rng.normal(0.0, 0.1, size=(3,)), "b")
    proj = rng.normal(size=(4, 4, 3))

    def loss():
        return (conv2d(x.value, k.value, b.value) * Tensor(proj)).sum()

    return finite_diff_check(loss, [x, k, b], eps)


def _check_log_softmax(eps: float) -> float:
    rng = np.random.default_rng(43)
    x = Param(rng.normal(0.0, 1.0, size=(3, 3, 4)), "x")
    proj = rng.normal(size=(3, 3, 4))

    def loss():
        return (log_softmax_channels(x.value) * Tensor(proj)).sum()

    return finite_diff_check(loss, [x], eps)


def _check_squeeze(eps: float) -> float:
    rng = np.random.default_rng(47)
    x = Param(_weights(rng, (4, 4, 2)), "x")
    proj = rng.normal(size=(2, 2, 8))

    def loss():
        return (squeeze2x2(x.value) * Tensor(proj)).sum()

    return finite_diff_check(loss, [x], eps)


def _check_unsqueeze(eps: float) -> float:
    rng = np.random.default_rng(53)
    x = Param(_weights(rng, (2, 2, 8)), "x")
    proj = rng.normal(size=(4, 4, 2))

    def loss():
        return (unsqueeze2x2(x.value) * Tensor(proj)).sum()

    return finite_diff_check(loss, [x], eps)


# -- flow layers ----------------------------------------------------------


def _rand_inputs(rng: np.random.Generator, shape: tuple[int, ...]) -> Tensor:
    return Tensor(rng.normal(0.0, 0.8, size=shape))


def _check_actnorm(eps: float) -> float:
    rng = np.random.default_rng(59)
    layer = ActNorm(2, "an")
    layer.initialize_from(rng.normal(0.5, 1.3, size=(4, 3, 3, 2)))
    x_param = Param(rng.normal(size=(3, 3, 2)), "x")
    proj = rng.normal(size=(3, 3, 2))

    def loss():
        y, logdet = layer.forward(x_param.value)
        return (y * Tensor(proj)).sum() + logdet

    return finite_diff_check(loss, [*layer.params(), x_param], eps)


def _check_inv1x1(eps: float) -> float:
    rng = np.random.default_rng(61)
    layer = Invertible1x1(3, "mix")
    layer.set_permutation(np.array([2, 0, 1]))
    layer.lower.assign(layer.lower.value.data + rng.normal(0.0, 0.2, size=(3, 3)))
    layer.upper.assign(layer.upper.value.data + rng.normal(0.0, 0.2, size=(3, 3)))
    layer.log_diag.assign(rng.normal(0.0, 0.2, size=(3,)))
    x_param = Param(rng.normal(size=(2, 2, 3)), "x")
    proj = rng.normal(size=(2, 2, 3))

    def loss():
        y, logdet = layer.forward(x_param.value)
        return (y * Tensor(proj)).sum() + logdet

    return finite_diff_check(loss, [*layer.params(), x_param], eps)


def _check_coupling(eps: float) -> float:
    rng = np.random.default_rng(67)
    layer = AffineCoupling(4, 6, 2.0, "cpl", np.random.default_rng(5))
    for p in layer.params():
        p.assign(p.value.data + rng.normal(0.0, 0.1, size=p.value.shape))
    x_param = Param(rng.normal(size=(4, 4, 4)), "x")
    proj = rng.normal(size=(4, 4, 4))

    def loss():
        y, logdet = layer.forward(x_param.value)
        return (y * Tensor(proj)).sum() + logdet

    return finite_diff_check(loss, [*layer.params(), x_param], eps)


def _tiny_flow(rng: np.random.Generator) -> FlowModel:
    model = FlowModel(4, 4, 2, num_scales=2, steps_per_scale=1, hidden_width=4,
                      identity_init=True)
    for p in model.params():
        if "kernel" in p.name or "bias" in p.name:
            p.assign(p.value.data + rng.normal(0.0, 0.08, size=p.value.shape))
        elif "log_scale" in p.name:
            p.assign(rng.normal(0.0, 0.1, size=p.value.shape))
    return model


def _check_flow_nll_params(eps: float) -> float:
    rng = np.random.default_rng(71)
    model = _tiny_flow(rng)
    x = _rand_inputs(rng, (4, 4, 2))

    def loss():
        return model.nll(x)

    return finite_diff_check(loss, model.params(), eps)


def _check_flow_nll_input(eps: float) -> float:
    rng = np.random.default_rng(73)
    model = _tiny_flow(rng)
    x_param = Param(rng.normal(0.0, 0.8, size=(4, 4, 2)), "x")

    def loss():
        return model.nll(x_param.value)

    return finite_diff_check(loss, [x_param], eps)


# -- losses ----------------------------------------------------------------


def _logit_param(rng: np.random.Generator, shape=(4, 4, 3)) -> Param:
    return Param(rng.normal(0.0, 1.0, size=shape), "logits")


def _check_supervised_ce(eps: float) -> float:
    rng = np.random.default_rng(79)
    logits = _logit_param(rng)
    gt = LabelMap(rng.integers(0, 3, size=(4, 4)), 3)

    def loss():
        return supervised_ce(ProbMap.from_logits(logits.value), gt)

    return finite_diff_check(loss, [logits], eps)


def _check_entropy(eps: float) -> float:
    rng = np.random.default_rng(83)
    logits = _logit_param(rng)

    def loss():
        return entropy_loss(ProbMap.from_logits(logits.value))

    return finite_diff_check(loss, [logits], eps)


def _check_tau(form: str):
    def check(eps: float) -> float:
        rng = np.random.default_rng(89)
        logits = _logit_param(rng)
        image = rng.uniform(0.0, 1.0, size=(4, 4, 3))
        cfg = TauConfig(form=form)

        def loss():
            return tau_smoothness(ProbMap.from_logits(logits.value), image, cfg)

        return finite_diff_check(loss, [logits], eps)

    return check


def _check_bimal_loss(eps: float) -> float:
    rng = np.random.default_rng(97)
    model = _tiny_flow(rng)
    logits = _logit_param(rng, (4, 4, 2))
    image = rng.uniform(0.0, 1.0, size=(4, 4, 3))
    cfg = TauConfig()

    def loss():
        return bimal_loss(model, ProbMap.from_logits(logits.value), image, cfg, 0.5)

    return finite_diff_check(loss, [logits], eps)


def _check_total_objective(eps: float) -> float:
    rng = np.random.default_rng(101)
    model = _tiny_flow(rng)
    src_logits = _logit_param(rng, (4, 4, 2))
    tgt_logits = Param(rng.normal(0.0, 1.0, size=(4, 4, 2)), "tgt_logits")
    gt = LabelMap(rng.integers(0, 2, size=(4, 4)), 2)
    image = rng.uniform(0.0, 1.0, size=(4, 4, 3))
    weights = LossWeights(lambda_t=0.05, lambda_tau=0.3)

    def loss():
        return total_objective(
            ProbMap.from_logits(src_logits.value),
            gt,
            ProbMap.from_logits(tgt_logits.value),
            image,
            model,
            weights,
            TauConfig(),
        )

    return finite_diff_check(loss, [src_logits, tgt_logits], eps)


GRADIENT_CHECKS: tuple[tuple[str, object], ...] = (
    ("primitive.add", _check_binary("add")),
    ("primitive.sub", _check_binary("sub")),
    ("primitive.mul", _check_binary("mul")),
    ("primitive.div", _check_binary("div")),
    ("primitive.neg", _check_unary("neg")),
    ("primitive.exp", _check_unary("exp")),
    ("primitive.log", _check_unary("log")),
    ("primitive.tanh", _check_unary("tanh")),
    ("primitive.sum", _check_reduction("sum")),
    ("primitive.mean", _check_reduction("mean")),
    ("primitive.reshape", _check_reshape),
    ("primitive.broadcast", _check_broadcast),
    ("primitive.slice", _check_slice),
    ("primitive.concat", _check_concat),
    ("op.matmul_channels", _check_matmul),
    ("op.conv2d", _check_conv2d),
    ("op.log_softmax", _check_log_softmax),
    ("op.squeeze2x2", _check_squeeze),
    ("op.unsqueeze2x2", _check_unsqueeze),
    ("flow.actnorm", _check_actnorm),
    ("flow.invertible_1x1", _check_inv1x1),
    ("flow.affine_coupling", _check_coupling),
    ("flow.nll_wrt_params", _check_flow_nll_params),
    ("flow.nll_wrt_input", _check_flow_nll_input),
    ("loss.supervised_ce", _check_supervised_ce),
    ("loss.entropy", _check_entropy),
    ("loss.tau_bilateral", _check_tau("bilateral")),
    ("loss.tau_paper_literal", _check_tau("paper_literal")),
    ("loss.bimal", _check_bimal_loss),
    ("loss.total_objective", _check_total_objective),
)


class CheckResult:
    __slots__ = ("name", "max_rel_error", "passed")

    def __init__(self, name: str, max_rel_error: float, tol: float) -> None:
        self.name = name
        self.max_rel_error = max_rel_error
        self.passed = max_rel_error < tol


def run_gradient_suite(eps: float = 1e-5, tol: float = 1e-4) -> list[CheckResult]:
    """Run every named check; results come back in declaration order."""
    return [CheckResult(name, fn(eps), tol) for name, fn in GRADIENT_CHECKS]
