"""Central finite-difference checks of every analytic gradient in the package.

Each registered check builds a small double-precision computation, runs
``backward`` and compares against (f(x+h) - f(x-h)) / 2h with
h = 1e-5 * max(1, |x|). The reported error is elementwise
|analytic - numeric| / max(|analytic|, |numeric|, 1e-6), maximised over the
probed entries.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from useg.autograd import OPS, ParameterStore, Tensor, apply_op, backward, constant, no_grad, ops, scan
from useg.backbone import ModelConfig, init_vss_params, vss_block
from useg.losses import dice_ce_loss

TOLERANCE = 1e-4
REL_FLOOR = 1e-6


def _h(x: float) -> float:
    return 1e-5 * max(1.0, abs(x))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)))


def check_function(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], rng: np.random.Generator,
                   max_probes: Optional[int] = None, wrt: Optional[Sequence[int]] = None) -> float:
    """Max relative error of d fn(*inputs) / d inputs; fn must return a scalar Tensor.

    ``max_probes`` limits how many randomly chosen entries per input are
    probed by finite differences.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out = fn(*tensors)
    backward(out)
    worst = 0.0
    for i in wrt:
        flat = arrays[i].reshape(-1)
        idx = np.arange(flat.size)
        if max_probes is not None and flat.size > max_probes:
            idx = rng.choice(flat.size, size=max_probes, replace=False)
        analytic = tensors[i].grad.reshape(-1)[idx] if tensors[i].grad is not None else np.zeros(idx.size)
        numeric = np.empty(idx.size)
        for j, k in enumerate(idx):
            orig = flat[k]
            h = _h(orig)
            vals = []
            for sign in (1.0, -1.0):
                flat[k] = orig + sign * h
                with no_grad():
                    vals.append(fn(*[Tensor(a) for a in arrays]).item())
            flat[k] = orig
            numeric[j] = (vals[0] - vals[1]) / (2 * h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _proj(rng, shape):
    """Random projection used to turn an array output into a scalar."""
    return constant(rng.normal(size=shape))


def _dot(y: Tensor, r: Tensor) -> Tensor:
    return ops.sum_(y * r)


@dataclass
class GradCheck:
    name: str
    covers: Tuple[str, ...]
    run: Callable[[np.random.Generator], float]


CHECKS: List[GradCheck] = []


def gradcheck(name: str, covers: Sequence[str] = ()):
    def deco(fn):
        CHECKS.append(GradCheck(name, tuple(covers), fn))
        return fn
    return deco


def _random_shape(rng, ndim, lo=1, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


def _elementwise_check(kind, positive=False):
    def run(rng):
        worst = 0.0
        for _ in range(20):
            shape = _random_shape(rng, int(rng.integers(1, 4)))
            x = rng.uniform(0.2, 2.0, size=shape) if positive else rng.normal(size=shape) * 2
            r = _proj(rng, shape)
            worst = max(worst, check_function(lambda t: _dot(_unary(kind, t), r), [x], rng))
        return worst
    return run


def _unary(kind, t):
    return apply_op(kind, [t])


for _kind, _pos in [("exp", False), ("log", True), ("sigmoid", False), ("silu", False), ("softplus", False)]:
    gradcheck(_kind, [_kind])(_elementwise_check(_kind, _pos))


def _binary_check(kind):
    def run(rng):
        worst = 0.0
        for _ in range(20):
            shape = _random_shape(rng, int(rng.integers(1, 4)))
            # second operand sometimes broadcast along a random subset of axes
            bshape = tuple(1 if rng.random() < 0.3 else s for s in shape)
            a = rng.normal(size=shape)
            b = rng.normal(size=bshape)
            if kind == "div":
                b = np.sign(b) * (np.abs(b) + 0.5)
            r = _proj(rng, shape)
            worst = max(worst, check_function(lambda x, y: _dot(apply_op(kind, [x, y]), r), [a, b], rng))
        return worst
    return run


for _kind in ("add", "sub", "mul", "div"):
    gradcheck(_kind, [_kind])(_binary_check(_kind))


@gradcheck("matmul", ["matmul"])
def _check_matmul(rng):
    worst = 0.0
    for _ in range(20):
        m, k, n = _random_shape(rng, 3)
        batch = _random_shape(rng, int(rng.integers(0, 2)), 1, 3)
        a = rng.normal(size=batch + (m, k))
        b = rng.normal(size=(k, n) if rng.random() < 0.5 else batch + (k, n))
        r = _proj(rng, batch + (m, n))
        worst = max(worst, check_function(lambda x, y: _dot(ops.matmul(x, y), r), [a, b], rng))
    return worst


def _reduction_check(kind):
    def run(rng):
        worst = 0.0
        for _ in range(20):
            nd = int(rng.integers(1, 4))
            shape = _random_shape(rng, nd)
            axis = None if rng.random() < 0.2 else tuple(sorted(rng.choice(nd, size=int(rng.integers(1, nd + 1)), replace=False).tolist()))
            keep = bool(rng.random() < 0.5)
            x = rng.normal(size=shape)
            with no_grad():
                oshape = apply_op(kind, [Tensor(x)], {"axis": axis, "keepdims": keep}).shape
            r = _proj(rng, oshape)
            worst = max(worst, check_function(lambda t: _dot(apply_op(kind, [t], {"axis": axis, "keepdims": keep}), r), [x], rng))
        return worst
    return run


gradcheck("sum", ["sum"])(_reduction_check("sum"))
gradcheck("mean", ["mean"])(_reduction_check("mean"))


@gradcheck("layer_norm", ["layer_norm"])
def _check_layer_norm(rng):
    worst = 0.0
    for _ in range(20):
        nd = int(rng.integers(1, 4))
        shape = _random_shape(rng, nd, 2, 5)
        axis = -1 if rng.random() < 0.5 else tuple(range(1, nd)) or -1
        x = rng.normal(size=shape)
        r = _proj(rng, shape)
        worst = max(worst, check_function(lambda t: _dot(ops.layer_norm(t, axis=axis), r), [x], rng))
    return worst


def _softmax_check(fn):
    def run(rng):
        worst = 0.0
        for _ in range(20):
            nd = int(rng.integers(1, 4))
            shape = _random_shape(rng, nd, 2, 5)
            axis = int(rng.integers(nd))
            x = rng.normal(size=shape) * 2
            r = _proj(rng, shape)
            worst = max(worst, check_function(lambda t: _dot(fn(t, axis=axis), r), [x], rng))
        return worst
    return run


gradcheck("softmax", ["softmax"])(_softmax_check(ops.softmax))
gradcheck("log_softmax", ["log_softmax"])(_softmax_check(ops.log_softmax))


@gradcheck("shape_ops", ["reshape", "transpose", "flip", "concat"])
def _check_shape_ops(rng):
    worst = 0.0
    for _ in range(20):
        shape = _random_shape(rng, 3, 1, 4)
        perm = tuple(rng.permutation(3).tolist())
        ax = int(rng.integers(3))
        x = rng.normal(size=shape)
        y = rng.normal(size=shape)
        r = _proj(rng, (2 * int(np.prod(shape)),))

        def f(a, b):
            z = ops.concat([ops.flip(a, ax), ops.transpose(b, perm)] if perm == (0, 1, 2)
                           else [ops.flip(a, ax), ops.transpose(ops.transpose(b, perm), tuple(np.argsort(perm)))], axis=ax)
            return _dot(ops.reshape(z, (-1,)), r)

        worst = max(worst, check_function(f, [x, y], rng))
    return worst


@gradcheck("conv2d", ["conv2d"])
def _check_conv2d(rng):
    worst = 0.0
    for _ in range(20):
        b, c, o = _random_shape(rng, 3, 1, 3)
        k = int(rng.choice([1, 2, 3]))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, k))
        h, w = _random_shape(rng, 2, k, 6)
        x = rng.normal(size=(b, c, h, w))
        wt = rng.normal(size=(o, c, k, k))
        bias = rng.normal(size=(o,))
        with no_grad():
            oshape = ops.conv2d(Tensor(x), Tensor(wt), Tensor(bias), stride, pad).shape
        r = _proj(rng, oshape)
        worst = max(worst, check_function(lambda a, ww, bb: _dot(ops.conv2d(a, ww, bb, stride, pad), r),
                                          [x, wt, bias], rng))
    return worst


@gradcheck("conv_transpose2d", ["conv_transpose2d"])
def _check_conv_transpose2d(rng):
    worst = 0.0
    for _ in range(20):
        b, c, o = _random_shape(rng, 3, 1, 3)
        k = int(rng.choice([1, 2, 3]))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, k)) if k > 1 else 0
        h, w = _random_shape(rng, 2, 1, 4)
        if (h - 1) * stride - 2 * pad + k < 1 or (w - 1) * stride - 2 * pad + k < 1:
            pad = 0
        x = rng.normal(size=(b, c, h, w))
        wt = rng.normal(size=(c, o, k, k))
        bias = rng.normal(size=(o,))
        with no_grad():
            oshape = ops.conv_transpose2d(Tensor(x), Tensor(wt), Tensor(bias), stride, pad).shape
        r = _proj(rng, oshape)
        worst = max(worst, check_function(lambda a, ww, bb: _dot(ops.conv_transpose2d(a, ww, bb, stride, pad), r),
                                          [x, wt, bias], rng))
    return worst


@gradcheck("selective_scan", ["selective_scan"])
def _check_scan(rng):
    worst = 0.0
    for _ in range(20):
        b, L, c, n = (int(rng.integers(1, 3)), int(rng.integers(1, 7)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        u = rng.normal(size=(b, L, c))
        delta = rng.uniform(0.1, 1.0, size=(b, L, c))
        A = -rng.uniform(0.5, 2.0, size=(c, n))
        Bm = rng.normal(size=(b, L, n))
        Cm = rng.normal(size=(b, L, n))
        D = rng.normal(size=(c,))
        r = _proj(rng, (b, L, c))
        worst = max(worst, check_function(lambda *xs: _dot(scan(*xs), r), [u, delta, A, Bm, Cm, D], rng))
    return worst


@gradcheck("mean_silu_linear", ["matmul", "silu", "mean"])
def _check_mean_silu(rng):
    worst = 0.0
    for _ in range(20):
        m, k = _random_shape(rng, 2, 2, 5)
        w = rng.normal(size=(m, k))
        x = rng.normal(size=(k, 1))
        worst = max(worst, check_function(lambda ww, xx: ops.mean(ops.silu(ops.matmul(ww, xx))), [w, x], rng))
    return worst


# --------------------------------------------------------------------------
# composite checks


def _store_check(store: ParameterStore, loss_fn: Callable[[], Tensor], rng, per_param: int = 5,
                 group_depth: Optional[int] = None) -> float:
    """Finite-difference check over a parameter store.

    Probes ``per_param`` random entries of every parameter, or, when
    ``group_depth`` is given, ``per_param`` random entries per name-prefix group.
    """
    store.zero_grad()
    backward(loss_fn())
    analytic = store.grads()
    groups: Dict[str, List[str]] = {}
    for name in store.names():
        key = name if group_depth is None else ".".join(name.split(".")[:group_depth])
        groups.setdefault(key, []).append(name)
    worst = 0.0
    for names in groups.values():
        probes = []
        for _ in range(per_param):
            name = names[int(rng.integers(len(names)))]
            probes.append((name, int(rng.integers(store[name].size))))
        a_vals, n_vals = [], []
        for name, k in probes:
            flat = store[name].data.reshape(-1)
            orig = flat[k]
            h = _h(orig)
            vals = []
            for sign in (1.0, -1.0):
                flat[k] = orig + sign * h
                with no_grad():
                    vals.append(loss_fn().item())
            flat[k] = orig
            g = analytic.get(name)
            a_vals.append(0.0 if g is None else g.reshape(-1)[k])
            n_vals.append((vals[0] - vals[1]) / (2 * h))
        worst = max(worst, relative_error(np.array(a_vals), np.array(n_vals)))
    return worst


def _tiny_config(**kw) -> ModelConfig:
    base = dict(image_size=32, widths=(4, 8, 16, 32, 64), blocks=(1, 1, 1, 1), state_dim=2, text_dim=8,
                text_len=8, text_blocks=1, mlp_ratio=2)
    base.update(kw)
    return ModelConfig(**base)


@gradcheck("vss_block", ["layer_norm", "matmul", "silu", "selective_scan", "softplus", "exp", "flip",
                         "transpose", "reshape", "add", "mul"])
def _check_vss(rng):
    worst = 0.0
    for _ in range(3):
        c = int(rng.integers(2, 5))
        h, w = _random_shape(rng, 2, 2, 4)
        cfg = _tiny_config(fusion="none", state_dim=int(rng.integers(1, 4)))
        store = ParameterStore(np.float64)
        init_vss_params(store, "blk", rng, c, cfg)
        _randomize(store, rng)
        x = constant(rng.normal(size=(2, c, h, w)))
        r = _proj(rng, (2, c, h, w))
        worst = max(worst, _store_check(store, lambda: _dot(vss_block(x, store.scope("blk")), r), rng))
        # input gradient as well
        worst = max(worst, check_function(lambda t: _dot(vss_block(t, store.scope("blk")), r), [x.data], rng,
                                          max_probes=10))
    return worst


def _randomize(store: ParameterStore, rng, scale: float = 0.3, prefixes: Sequence[str] = ("",)) -> None:
    """Perturb parameters so zero-initialised paths carry gradient.

    Step-size biases are redrawn around 0: the default init gives steps near
    1e-3, where A_log gradients are so small that central differences only
    resolve them to a few digits.
    """
    for name, p in store.items():
        if name.endswith("b_delta"):
            p.data = rng.normal(size=p.shape)
        elif any(name.startswith(pre) for pre in prefixes):
            p.data = p.data + scale * rng.normal(size=p.shape)


@gradcheck("fuse_stage", ["matmul", "transpose", "add", "reshape", "sigmoid", "mul"])
def _check_fusion(rng):
    from useg.fusion import fuse_stage

    worst = 0.0
    for mode in ("stage_add", "stage_gate", "tail"):
        for _ in range(5):
            b, c, d = _random_shape(rng, 3, 1, 4)
            h, w = _random_shape(rng, 2, 1, 3)
            f = rng.normal(size=(b, c, h, w))
            t = rng.normal(size=(b, d))
            W = rng.normal(size=(c, d))
            bias = rng.normal(size=(c,))
            r = _proj(rng, (b, c, h, w))
            worst = max(worst, check_function(
                lambda ff, tt, ww, bb: _dot(fuse_stage(ff, tt, {"w": ww, "b": bb}, mode), r), [f, t, W, bias], rng))
    return worst


@gradcheck("dice_ce_loss", ["log_softmax", "exp", "sum", "mean", "mul", "div", "add", "sub"])
def _check_loss(rng):
    worst = 0.0
    for _ in range(20):
        b = int(rng.integers(1, 3))
        h, w = _random_shape(rng, 2, 2, 5)
        logits = rng.normal(size=(b, 2, h, w)) * 2
        target = (rng.random((b, h, w)) < 0.4).astype(np.uint8)
        worst = max(worst, check_function(lambda t: dice_ce_loss(t, target), [logits], rng))
    return worst


@gradcheck("text_path", ["matmul", "softmax", "layer_norm", "silu", "sum", "mul", "transpose", "reshape"])
def _check_text(rng):
    from useg.text import TextConfig, TokenSequence, encode_text, init_text_params

    worst = 0.0
    for _ in range(3):
        cfg = TextConfig(vocab_size=7, dim=int(rng.integers(3, 6)), max_len=6, n_blocks=int(rng.integers(1, 3)))
        store = ParameterStore(np.float64)
        init_text_params(store, cfg, rng)
        seqs = []
        for _ in range(2):
            n = int(rng.integers(1, cfg.max_len + 1))
            ids = rng.integers(2, cfg.vocab_size, size=n).tolist()
            seqs.append(TokenSequence(tuple(ids + [0] * (cfg.max_len - n)), tuple([1] * n + [0] * (cfg.max_len - n))))
        r = _proj(rng, (2, cfg.dim))
        worst = max(worst, _store_check(store, lambda: _dot(encode_text(seqs, store.scope("text"), cfg), r), rng))
    return worst


@gradcheck("full_model", ["conv2d", "conv_transpose2d", "concat", "layer_norm", "selective_scan", "softmax",
                          "log_softmax"])
def _check_full_model(rng):
    from useg.model import SegmentationModel
    from useg.text import Vocabulary

    vocab = Vocabulary.build(["small dark nodule", "large bright mass"])
    model = SegmentationModel(_tiny_config(vocab_size=len(vocab), seed=int(rng.integers(1 << 30))), vocab,
                              dtype=np.float64)
    _randomize(model.store, rng, 0.3, prefixes=("fusion",))  # also moves b_delta
    imgs = rng.random((2, 1, 32, 32))
    target = (rng.random((2, 32, 32)) < 0.3).astype(np.uint8)
    caps = ["small dark nodule", "large bright mass"]
    return _store_check(model.store, lambda: dice_ce_loss(model.logits(imgs, caps), target), rng,
                        per_param=5, group_depth=3)


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool
    seconds: float
    error: str = ""  # exception text when the check crashed


def run_suite(seed: int = 0, names: Optional[Sequence[str]] = None, tol: float = TOLERANCE) -> List[CheckResult]:
    """Run the registered checks, each with its own seeded generator."""
    results = []
    for chk in CHECKS:
        if names is not None and chk.name not in names:
            continue
        rng = np.random.default_rng([seed, sum(map(ord, chk.name))])
        t0 = time.time()
        msg = ""
        try:
            err = chk.run(rng)
        except Exception as exc:  # a crashing check is a failed check
            err, msg = float("inf"), f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(chk.name, err, bool(err <= tol), time.time() - t0, msg))
    return results


def coverage() -> Dict[str, List[str]]:
    """operator id -> names of checks exercising it."""
    cov = {k: [] for k in OPS}
    for chk in CHECKS:
        for op in chk.covers:
            cov.setdefault(op, []).append(chk.name)
    return cov
