"""Central finite-difference gradient verification.

Everything here runs on a 64-bit shadow of the computation: inputs and
parameters are float64 tensors, the step is 1e-3, and analytic gradients
are compared elementwise as |a - n| / max(|a|, |n|, floor).

Perturbing across a relu/clip boundary or a maxpool argmax flip makes the
numeric quotient meaningless, so each perturbed evaluation records those
branching decisions and elements whose +h/-h traces differ are excluded
from the comparison.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict

import numpy as np

from . import losses as L
from . import network, tensor as T
from .attention import CAConfig, ca_forward, init_ca, init_rica, rica_forward
from .network import ArchConfig
from .params import ParameterStore
from .tensor import Tensor, record_switches

DEFAULT_STEP = 1e-3
DEFAULT_FLOOR = 1e-3
OP_TOL = 1e-4
NET_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel: float
    tol: float
    checked: int
    excluded: int

    @property
    def passed(self) -> bool:
        return self.max_rel < self.tol

    def row(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.name:<28} {self.max_rel:>12.3e} {self.tol:>8.0e} "
                f"{self.checked:>7} {self.excluded:>4}  {status}")


def _same_switches(a: list, b: list) -> bool:
    if len(a) != len(b):
        return False
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def numerical_gradient(f: Callable[[], Tensor], leaf: Tensor,
                       step: float = DEFAULT_STEP):
    """Central differences of f with respect to every element of `leaf`.

    Returns (gradient, excluded) where `excluded` marks elements whose
    perturbation crossed a non-differentiable point.
    """
    flat = leaf.data.reshape(-1)
    num = np.zeros(flat.shape, dtype=np.float64)
    excluded = np.zeros(flat.shape, dtype=bool)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        with record_switches() as s_plus:
            fp = f().item()
        flat[i] = orig - step
        with record_switches() as s_minus:
            fm = f().item()
        flat[i] = orig
        num[i] = (fp - fm) / (2.0 * step)
        if not _same_switches(s_plus, s_minus):
            excluded[i] = True
    return num.reshape(leaf.shape), excluded.reshape(leaf.shape)


def check_gradients(name: str, f: Callable[[], Tensor], leaves: Dict[str, Tensor],
                    tol: float = OP_TOL, step: float = DEFAULT_STEP,
                    floor: float = DEFAULT_FLOOR) -> CheckResult:
    """Compare one backward pass of f against finite differences."""
    for t in leaves.values():
        if t.dtype != np.float64:
            raise ValueError("gradient checks must run on float64 tensors")
        t.grad = None
    out = f()
    out.backward()
    max_rel = 0.0
    checked = 0
    excluded_total = 0
    for t in leaves.values():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric, excluded = numerical_gradient(f, t, step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        rel = np.abs(analytic - numeric) / denom
        rel[excluded] = 0.0
        if rel.size:
            max_rel = max(max_rel, float(rel.max()))
        checked += rel.size - int(excluded.sum())
        excluded_total += int(excluded.sum())
    return CheckResult(name, max_rel, tol, checked, excluded_total)


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _readout(rng, out: Tensor) -> Tensor:
    r = Tensor(rng.standard_normal(out.shape))
    return (out * r).sum()


# -- elementary and spatial op checks -----------------------------------------


def check_ops(seed: int = 0) -> list[CheckResult]:
    """Finite-difference checks for every differentiable engine op."""
    results = []
    rng = np.random.default_rng(seed)

    def add_case(name, make, tol=OP_TOL):
        leaves, f = make()
        results.append(check_gradients(name, f, leaves, tol=tol))

    def binary(op):
        def make():
            rng_l = np.random.default_rng(seed + 1)
            a = _t(rng_l, 2, 3, 4, 4)
            b = _t(rng_l, 1, 3, 1, 4)  # exercises broadcasting
            r = Tensor(rng_l.standard_normal((2, 3, 4, 4)))
            return {"a": a, "b": b}, lambda: (op(a, b) * r).sum()
        return make

    add_case("add", binary(lambda a, b: a + b))
    add_case("sub", binary(lambda a, b: a - b))
    add_case("mul", binary(lambda a, b: a * b))

    def make_div():
        rng_l = np.random.default_rng(seed + 2)
        a = _t(rng_l, 2, 3, 4, 4)
        b = Tensor(rng_l.uniform(0.5, 2.0, (1, 3, 1, 4)), requires_grad=True)
        r = Tensor(rng_l.standard_normal((2, 3, 4, 4)))
        return {"a": a, "b": b}, lambda: (a / b * r).sum()
    add_case("div", make_div)

    def make_pow():
        rng_l = np.random.default_rng(seed + 3)
        x = Tensor(rng_l.uniform(0.3, 2.0, (3, 5)), requires_grad=True)
        r = Tensor(rng_l.standard_normal((3, 5)))
        return {"x": x}, lambda: (x.pow(1.7) * r).sum()
    add_case("pow", make_pow)

    def make_exp():
        rng_l = np.random.default_rng(seed + 4)
        x = _t(rng_l, 3, 5)
        r = Tensor(rng_l.standard_normal((3, 5)))
        return {"x": x}, lambda: (x.exp() * r).sum()
    add_case("exp", make_exp)

    def make_log():
        rng_l = np.random.default_rng(seed + 5)
        x = Tensor(rng_l.uniform(0.2, 3.0, (3, 5)), requires_grad=True)
        r = Tensor(rng_l.standard_normal((3, 5)))
        return {"x": x}, lambda: (x.log() * r).sum()
    add_case("log", make_log)

    def make_sqrt():
        rng_l = np.random.default_rng(seed + 6)
        x = Tensor(rng_l.uniform(0.2, 3.0, (3, 5)), requires_grad=True)
        r = Tensor(rng_l.standard_normal((3, 5)))
        return {"x": x}, lambda: (x.sqrt() * r).sum()
    add_case("sqrt", make_sqrt)

    def make_clip():
        rng_l = np.random.default_rng(seed + 7)
        x = Tensor(rng_l.uniform(-2.0, 2.0, (4, 6)), requires_grad=True)
        r = Tensor(rng_l.standard_normal((4, 6)))
        return {"x": x}, lambda: (x.clip(-0.9, 1.1) * r).sum()
    add_case("clip", make_clip)

    def make_sum():
        rng_l = np.random.default_rng(seed + 8)
        x = _t(rng_l, 2, 3, 4)
        r = Tensor(rng_l.standard_normal((2, 4)))
        return {"x": x}, lambda: (x.sum(axis=1) * r).sum()
    add_case("sum", make_sum)

    def make_mean():
        rng_l = np.random.default_rng(seed + 9)
        x = _t(rng_l, 2, 3, 4)
        r = Tensor(rng_l.standard_normal((2, 1, 4)))
        return {"x": x}, lambda: (x.mean(axis=1, keepdims=True) * r).sum()
    add_case("mean", make_mean)

    def make_reshape():
        rng_l = np.random.default_rng(seed + 10)
        x = _t(rng_l, 2, 3, 4)
        r = Tensor(rng_l.standard_normal((6, 4)))
        return {"x": x}, lambda: (x.reshape(6, 4) * r).sum()
    add_case("reshape", make_reshape)

    def make_transpose():
        rng_l = np.random.default_rng(seed + 11)
        x = _t(rng_l, 2, 3, 4, 5)
        r = Tensor(rng_l.standard_normal((2, 3, 5, 4)))
        return {"x": x}, lambda: (x.transpose((0, 1, 3, 2)) * r).sum()
    add_case("transpose", make_transpose)

    def make_narrow():
        rng_l = np.random.default_rng(seed + 12)
        x = _t(rng_l, 2, 3, 6, 2)
        r = Tensor(rng_l.standard_normal((2, 3, 3, 2)))
        return {"x": x}, lambda: (x.narrow(2, 1, 3) * r).sum()
    add_case("narrow", make_narrow)

    def make_concat():
        rng_l = np.random.default_rng(seed + 13)
        a = _t(rng_l, 2, 3, 4, 4)
        b = _t(rng_l, 2, 2, 4, 4)
        r = Tensor(rng_l.standard_normal((2, 5, 4, 4)))
        return ({"a": a, "b": b},
                lambda: (T.concat_channels(a, b) * r).sum())
    add_case("concat_channels", make_concat)

    def make_relu():
        rng_l = np.random.default_rng(seed + 14)
        x = _t(rng_l, 4, 8)
        r = Tensor(rng_l.standard_normal((4, 8)))
        return {"x": x}, lambda: (T.relu(x) * r).sum()
    add_case("relu", make_relu)

    def make_sigmoid():
        rng_l = np.random.default_rng(seed + 15)
        x = _t(rng_l, 4, 8, scale=2.0)
        r = Tensor(rng_l.standard_normal((4, 8)))
        return {"x": x}, lambda: (T.sigmoid(x) * r).sum()
    add_case("sigmoid", make_sigmoid)

    def make_softmax():
        rng_l = np.random.default_rng(seed + 16)
        x = _t(rng_l, 2, 6, 3, 3)
        r = Tensor(rng_l.standard_normal((2, 6, 3, 3)))
        return {"x": x}, lambda: (T.softmax_channel(x) * r).sum()
    add_case("softmax_channel", make_softmax)

    def make_conv():
        rng_l = np.random.default_rng(seed + 17)
        x = _t(rng_l, 2, 3, 8, 8)
        w = _t(rng_l, 4, 3, 3, 3, scale=0.5)
        b = _t(rng_l, 4)
        r = Tensor(rng_l.standard_normal((2, 4, 8, 8)))
        return ({"input": x, "weight": w, "bias": b},
                lambda: (T.conv2d(x, w, b, padding=1) * r).sum())
    add_case("conv2d", make_conv)

    def make_conv_stride():
        rng_l = np.random.default_rng(seed + 18)
        x = _t(rng_l, 1, 2, 9, 9)
        w = _t(rng_l, 3, 2, 3, 3, scale=0.5)
        b = _t(rng_l, 3)
        r = Tensor(rng_l.standard_normal((1, 3, 4, 4)))
        return ({"input": x, "weight": w, "bias": b},
                lambda: (T.conv2d(x, w, b, stride=2) * r).sum())
    add_case("conv2d_stride2", make_conv_stride)

    def make_bn_train():
        rng_l = np.random.default_rng(seed + 19)
        x = _t(rng_l, 2, 3, 4, 4)
        gamma = Tensor(rng_l.uniform(0.5, 1.5, 3), requires_grad=True)
        beta = _t(rng_l, 3)
        state = T.RunningMoments(3, dtype=np.float64)
        r = Tensor(rng_l.standard_normal((2, 3, 4, 4)))
        return ({"input": x, "gamma": gamma, "beta": beta},
                lambda: (T.batchnorm2d(x, gamma, beta, state, training=True) * r).sum())
    add_case("batchnorm2d_train", make_bn_train)

    def make_bn_eval():
        rng_l = np.random.default_rng(seed + 20)
        x = _t(rng_l, 2, 3, 4, 4)
        gamma = Tensor(rng_l.uniform(0.5, 1.5, 3), requires_grad=True)
        beta = _t(rng_l, 3)
        state = T.RunningMoments(3, dtype=np.float64)
        state.mean[:] = rng_l.standard_normal(3)
        state.var[:] = rng_l.uniform(0.5, 2.0, 3)
        r = Tensor(rng_l.standard_normal((2, 3, 4, 4)))
        return ({"input": x, "gamma": gamma, "beta": beta},
                lambda: (T.batchnorm2d(x, gamma, beta, state, training=False) * r).sum())
    add_case("batchnorm2d_eval", make_bn_eval)

    def make_maxpool():
        rng_l = np.random.default_rng(seed + 21)
        x = _t(rng_l, 1, 2, 8, 8)
        r = Tensor(rng_l.standard_normal((1, 2, 4, 4)))
        return {"x": x}, lambda: (T.maxpool2(x) * r).sum()
    add_case("maxpool2", make_maxpool)

    def make_upsample():
        rng_l = np.random.default_rng(seed + 22)
        x = _t(rng_l, 1, 2, 4, 4)
        r = Tensor(rng_l.standard_normal((1, 2, 8, 8)))
        return {"x": x}, lambda: (T.upsample_bilinear2(x) * r).sum()
    add_case("upsample_bilinear2", make_upsample)

    for axis in ("height", "width"):
        def make_davg(ax=axis):
            rng_l = np.random.default_rng(seed + 23)
            x = _t(rng_l, 1, 2, 4, 4)
            shape = (1, 2, 1, 4) if ax == "height" else (1, 2, 4, 1)
            r = Tensor(np.random.default_rng(seed + 24).standard_normal(shape))
            return {"x": x}, lambda: (T.directional_avgpool(x, ax) * r).sum()
        add_case(f"directional_avgpool_{axis[0]}", make_davg)

    return results


# -- module-level checks -------------------------------------------------


def _store_leaves(store: ParameterStore) -> Dict[str, Tensor]:
    return dict(store.items())


def check_attention(seed: int = 0) -> list[CheckResult]:
    """CA module and RICA block, gradients for input and every parameter."""
    results = []
    cfg = CAConfig(reduction_ratio=4, min_mid_channels=2)
    rng = np.random.default_rng(seed)

    store = ParameterStore()
    init_ca(store, "ca", 3, cfg, rng)
    store64 = store.to_double()
    x = Tensor(rng.standard_normal((1, 3, 8, 8)), requires_grad=True)
    r = Tensor(rng.standard_normal((1, 3, 8, 8)))
    leaves = {"input": x, **_store_leaves(store64)}
    results.append(check_gradients(
        "ca_forward",
        lambda: (ca_forward(x, store64, "ca", cfg, training=True) * r).sum(),
        leaves, tol=NET_TOL))

    store = ParameterStore()
    init_rica(store, "blk", 3, 8, cfg, rng)
    store64 = store.to_double()
    x = Tensor(rng.standard_normal((1, 3, 8, 8)), requires_grad=True)
    r = Tensor(rng.standard_normal((1, 8, 8, 8)))
    leaves = {"input": x, **_store_leaves(store64)}
    results.append(check_gradients(
        "rica_forward",
        lambda: (rica_forward(x, store64, "blk", cfg, training=True) * r).sum(),
        leaves, tol=NET_TOL))
    return results


def check_network(seed: int = 0) -> CheckResult:
    """End-to-end check through a 2-level, base-2-channel network on 16x16."""
    arch = ArchConfig(levels=2, base_channels=2, ca=CAConfig(reduction_ratio=4,
                                                             min_mid_channels=2))
    store = network.build(arch, rng_seed=seed).to_double()
    rng = np.random.default_rng(seed + 100)
    x = Tensor(rng.standard_normal((1, 1, 16, 16)), requires_grad=True)
    r = Tensor(rng.standard_normal((1, arch.num_classes, 16, 16)))
    leaves = {"input": x, **_store_leaves(store)}
    return check_gradients(
        "network_end_to_end",
        lambda: (network.forward(store, x, training=True) * r).sum(),
        leaves, tol=NET_TOL)


def check_losses(seed: int = 0) -> list[CheckResult]:
    """All loss variants through the softmax on random 1x6x4x4 logits."""
    results = []
    rng = np.random.default_rng(seed)
    target = rng.integers(0, 6, size=(1, 4, 4))
    cfg = L.LossConfig()
    cases = {
        "loss_weighted_focal": lambda lg: L.weighted_focal(lg, target, cfg),
        "loss_exp_log_dice": lambda lg: L.exp_log_dice(lg, target, cfg),
        "loss_focal_logdice": lambda lg: L.focal_logdice(lg, target, cfg),
        "loss_focal_dice": lambda lg: L.focal_dice(lg, target, cfg),
        "loss_ce": lambda lg: L.loss_by_variant(L.LossConfig(variant="CE"))(lg, target),
    }
    for name, fn in cases.items():
        logits = Tensor(np.random.default_rng(seed + 1).standard_normal((1, 6, 4, 4)),
                        requires_grad=True)
        results.append(check_gradients(name, lambda: fn(logits),
                                       {"logits": logits}, tol=OP_TOL))
    return results


def run_all(seed: int = 0) -> tuple[list[CheckResult], float]:
    """Every check in one table; returns (results, elapsed seconds)."""
    t0 = time.perf_counter()
    results = check_ops(seed)
    results.extend(check_attention(seed))
    results.extend(check_losses(seed))
    results.append(check_network(seed))
    return results, time.perf_counter() - t0


def format_table(results: list[CheckResult]) -> str:
    header = (f"{'operation':<28} {'max_rel_err':>12} {'tol':>8} "
              f"{'checked':>7} {'excl':>4}  status")
    lines = [header, "-" * len(header)]
    lines.extend(r.row() for r in results)
    return "\n".join(lines)
