"""Finite-difference verification of every analytic backward pass.

All checks run in float64 with central differences (h = 1e-5) against a
scalar probe L(x) = sum(f(x) * R) for a fixed random R, so the analytic
gradient is exactly backward(R).  Inputs are sampled away from ReLU and
hinge kinks; checks that could straddle a kink detect it and resample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from .net import ConvSpec, NetConfig, build_net
from .ops import (BatchNorm2d, Conv2d, Dropout, UnitNormRows, matmul_nt,
                  matmul_nt_backward)

H = 1e-5
LAYER_TOL = 1e-6
NET_TOL = 1e-5
LOSS_TOL = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        status = "ok" if self.ok else "FAIL"
        return f"{self.name:<34} {self.max_rel_err:.3e}  (tol {self.tol:.0e})  {status}"


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference over the larger gradient's max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_grad(f, x: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of scalar f at every element of x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * h)
    return g


def _probe(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# per-layer checks


def check_conv(seed: int, stride: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    layer = Conv2d(2, 3, 3, stride, 1, rng, dtype=np.float64)
    x = rng.standard_normal((2, 2, 8, 8))
    r = _probe(rng, layer.forward(x).shape)

    def loss():
        return float((layer.forward(x) * r).sum())

    layer.forward(x, train=True)
    layer.weight.zero_grad()
    gx = layer.backward(r)
    err = rel_err(gx, numeric_grad(loss, x))
    err = max(err, rel_err(layer.weight.grad, numeric_grad(loss, layer.weight.value)))
    return CheckResult(f"conv2d stride={stride}", err, LAYER_TOL)


def check_batch_norm(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    layer = BatchNorm2d(2, dtype=np.float64)
    x = rng.standard_normal((4, 2, 3, 3))
    r = _probe(rng, x.shape)

    def loss():
        return float((layer.forward(x, train=True) * r).sum())

    layer.forward(x, train=True)
    gx = layer.backward(r)
    return CheckResult("batch_norm", rel_err(gx, numeric_grad(loss, x)), LAYER_TOL)


def check_relu(seed: int) -> CheckResult:
    from .ops import ReLU

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4, 5, 2))
    x[np.abs(x) < 1e-3] = 1e-3          # keep samples off the kink
    layer = ReLU()
    r = _probe(rng, x.shape)

    def loss():
        return float((layer.forward(x) * r).sum())

    layer.forward(x, train=True)
    gx = layer.backward(r)
    return CheckResult("relu", rel_err(gx, numeric_grad(loss, x)), LAYER_TOL)


def check_dropout(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 6))
    layer = Dropout(0.3)
    r = _probe(rng, x.shape)

    def loss():
        # identical mask every evaluation
        return float((layer.forward(x, train=True, rng=np.random.default_rng(seed)) * r).sum())

    layer.forward(x, train=True, rng=np.random.default_rng(seed))
    gx = layer.backward(r)
    return CheckResult("dropout", rel_err(gx, numeric_grad(loss, x)), LAYER_TOL)


def check_unit_norm(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 8))
    layer = UnitNormRows()
    r = _probe(rng, x.shape)

    def loss():
        return float((layer.forward(x) * r).sum())

    layer.forward(x, train=True)
    gx = layer.backward(r)
    return CheckResult("l2_normalize_rows", rel_err(gx, numeric_grad(loss, x)), LAYER_TOL)


def check_matmul(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((5, 4))
    r = _probe(rng, (3, 5))

    ga, gb = matmul_nt_backward(r, a, b)
    err = rel_err(ga, numeric_grad(lambda: float((matmul_nt(a, b) * r).sum()), a))
    err = max(err, rel_err(gb, numeric_grad(lambda: float((matmul_nt(a, b) * r).sum()), b)))
    return CheckResult("matmul", err, LAYER_TOL)


# ---------------------------------------------------------------------------
# full network Jacobian-vector check


def small_config(seed: int) -> NetConfig:
    return NetConfig(convs=[ConvSpec(3, 4, 1, 1), ConvSpec(3, 4, 2, 1),
                            ConvSpec(4, 8, 1, 0)],
                     dropout_rate=0.3, output_dim=8, input_size=8, seed=seed)


def net_jvp_check(config: NetConfig, seed: int, tol: float,
                  name: str, max_tries: int = 8) -> CheckResult:
    """Directional derivative of L = sum(descriptors * R) over all conv
    weights and the input, compared against two-point central differences.

    If any ReLU pre-activation changes sign between the two evaluation
    points, the direction is resampled (a kink invalidates the check).
    """
    for attempt in range(max_tries):
        rng = np.random.default_rng((seed, attempt))
        net = build_net(config, dtype=np.float64)
        mask_seed = int(rng.integers(2 ** 31))
        x = rng.standard_normal((2, 1, config.input_size, config.input_size))
        r = _probe(rng, (2, config.output_dim))
        params = net.params()
        v_params = [rng.standard_normal(p.value.shape) for p in params]
        v_x = rng.standard_normal(x.shape)
        scale = np.sqrt(sum((v * v).sum() for v in v_params) + (v_x * v_x).sum())
        v_params = [v / scale for v in v_params]
        v_x /= scale

        def evaluate(direction: float):
            for p, v in zip(params, v_params):
                p.value += direction * H * v
            out = net.forward(x + direction * H * v_x, train=True,
                              rng=np.random.default_rng(mask_seed))
            signs = net.relu_input_signs()
            for p, v in zip(params, v_params):
                p.value -= direction * H * v
            return float((out * r).sum()), signs

        hi, signs_hi = evaluate(+1.0)
        lo, signs_lo = evaluate(-1.0)
        if any((a != b).any() for a, b in zip(signs_hi, signs_lo)):
            continue                     # straddled a ReLU kink; new direction
        numeric = (hi - lo) / (2 * H)

        net.zero_grad()
        net.forward(x, train=True, rng=np.random.default_rng(mask_seed))
        gx = net.backward(r)
        analytic = sum(float((p.grad * v).sum()) for p, v in zip(params, v_params))
        analytic += float((gx * v_x).sum())
        return CheckResult(name, rel_err(np.float64(analytic), np.float64(numeric)), tol)
    raise RuntimeError(f"{name}: could not find a kink-free direction in {max_tries} tries")


# ---------------------------------------------------------------------------
# loss pipeline checks (descriptors -> similarity -> mining -> loss)


def _pipeline_loss(a, p, kind, variant, margin) -> float:
    sim = L.similarity_matrix(a, p, kind)
    sel = L.mine_hard_negatives(sim)
    loss, _, _ = L.compute_loss(variant, sel, margin)
    return loss


def _sampling_is_stable(a, p, kind, variant, margin, guard=1e-3) -> bool:
    """True when mining argmaxes and hinge clamps sit clear of switch points."""
    sim = L.similarity_matrix(a, p, kind)
    sel = L.mine_hard_negatives(sim)
    n = len(sel.pos)
    masked = sim.values.copy()
    np.fill_diagonal(masked, -np.inf)
    for i in range(n):
        cands = np.concatenate([masked[i, :], masked[:, i]])
        top = np.sort(cands)[::-1]
        if top[0] - top[1] < guard:      # runner-up too close: argmax may flip
            return False
    if variant == L.HINGE and np.any(np.abs(sel.neg - sel.pos + margin) < guard):
        return False
    if variant == L.CONTRASTIVE and np.any(np.abs(margin + sel.neg) < guard):
        return False
    return True


def check_loss_pipeline(seed: int, kind: str, variant: str,
                        margin: float = 1.0, max_tries: int = 50) -> CheckResult:
    name = f"{variant} / {kind}"
    for attempt in range(max_tries):
        rng = np.random.default_rng((seed, attempt))
        a = rng.standard_normal((4, 8))
        p = rng.standard_normal((4, 8))
        # unit rows; the h=1e-5 probes stay inside the cosine norm tolerance
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        if not _sampling_is_stable(a, p, kind, variant, margin):
            continue
        sim = L.similarity_matrix(a, p, kind)
        sel = L.mine_hard_negatives(sim)
        _, d_pos, d_neg = L.compute_loss(variant, sel, margin)
        ga, gp = L.loss_backward_to_descriptors(sim, sel, d_pos, d_neg)
        na = numeric_grad(lambda: _pipeline_loss(a, p, kind, variant, margin), a)
        np_ = numeric_grad(lambda: _pipeline_loss(a, p, kind, variant, margin), p)
        err = max(rel_err(ga, na), rel_err(gp, np_))
        return CheckResult(name, err, LOSS_TOL)
    raise RuntimeError(f"{name}: no stable sample in {max_tries} tries")


# ---------------------------------------------------------------------------


def run_all(seed: int = 0) -> list[CheckResult]:
    results = [
        check_conv(seed, stride=1),
        check_conv(seed + 1, stride=2),
        check_batch_norm(seed + 2),
        check_relu(seed + 3),
        check_dropout(seed + 4),
        check_unit_norm(seed + 5),
        check_matmul(seed + 6),
        net_jvp_check(small_config(seed + 7), seed + 7, NET_TOL, "descriptor net (small)"),
        net_jvp_check(NetConfig(seed=seed + 8), seed + 8, NET_TOL, "descriptor net (default)"),
        check_loss_pipeline(seed + 9, L.COSINE, L.ROBUST),
        check_loss_pipeline(seed + 10, L.COSINE, L.HINGE),
        check_loss_pipeline(seed + 11, L.COSINE, L.CONTRASTIVE, margin=0.0),
        check_loss_pipeline(seed + 12, L.NEG_L2, L.ROBUST),
        check_loss_pipeline(seed + 13, L.NEG_L2, L.HINGE),
    ]
    return results
