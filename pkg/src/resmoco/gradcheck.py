"""Central finite-difference gradient checking for every differentiable op."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor

ABS_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _numeric_grad(f: Callable[..., Tensor], xs: Sequence[Tensor], k: int, step: float) -> np.ndarray:
    x = xs[k]
    flat = x.data.reshape(-1)
    out = np.zeros_like(flat)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(*xs).item()
            flat[i] = orig - step
            fm = f(*xs).item()
            flat[i] = orig
            out[i] = (fp - fm) / (2 * step)
    return out.reshape(x.shape)


def finite_diff_check(
    f: Callable[..., Tensor],
    x: Union[Tensor, Sequence[Tensor]],
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f`` against central differences.

    The relative error of each element is ``|a - n| / max(|a|, |n|, 1e-6)``;
    the report carries the maximum over all elements of all inputs.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    loss = f(*xs)
    T.backward(loss)
    worst, count = 0.0, 0
    for k, t in enumerate(xs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = _numeric_grad(f, xs, k, step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ABS_FLOOR)
        err = np.abs(analytic - numeric) / denom
        worst = max(worst, float(err.max()))
        count += err.size
    return GradCheckReport(worst, tol, count)


# ---------------------------------------------------------------------------
# the op suite driven by ``resmoco gradcheck``
# ---------------------------------------------------------------------------


def _away_from_zero(a: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return a + margin * np.sign(a)


def _suite_cases(rng: np.random.Generator) -> Dict[str, Callable[[], GradCheckReport]]:
    def r(*shape: int) -> Tensor:
        return Tensor(rng.standard_normal(shape), dtype=np.float64)

    # weights for projecting outputs to a scalar, so that sum() is not the only path
    def proj(out: Tensor) -> Tensor:
        w = np.random.default_rng(out.size).standard_normal(out.shape)
        return (out * Tensor(w, dtype=np.float64)).sum()

    def positive(*shape: int) -> Tensor:
        return Tensor(rng.uniform(0.5, 2.0, shape), dtype=np.float64)

    cases: Dict[str, Callable[[], GradCheckReport]] = {
        "add": lambda: finite_diff_check(lambda a, b: proj(a + b), [r(3, 4), r(4)]),
        "sub": lambda: finite_diff_check(lambda a, b: proj(a - b), [r(3, 1), r(3, 4)]),
        "mul": lambda: finite_diff_check(lambda a, b: proj(a * b), [r(2, 3, 4), r(3, 1)]),
        "div": lambda: finite_diff_check(lambda a, b: proj(a / b), [r(3, 4), positive(4)]),
        "neg": lambda: finite_diff_check(lambda a: proj(-a), r(5)),
        "pow": lambda: finite_diff_check(lambda a: proj(a**3), r(2, 3)),
        "exp": lambda: finite_diff_check(lambda a: proj(T.exp(a)), r(2, 3)),
        "log": lambda: finite_diff_check(lambda a: proj(T.log(a)), positive(2, 3)),
        "relu": lambda: finite_diff_check(
            lambda a: proj(T.relu(a)), Tensor(_away_from_zero(rng.standard_normal((3, 5))), dtype=np.float64)
        ),
        "matmul": lambda: finite_diff_check(lambda a, b: proj(a @ b), [r(3, 4), r(4, 2)]),
        "conv2d": lambda: finite_diff_check(
            lambda x, w: proj(T.conv2d(x, w, stride=2, pad=1)), [r(2, 3, 5, 5), r(4, 3, 3, 3)]
        ),
        "softmax_t": lambda: finite_diff_check(lambda a: proj(T.softmax_t(a, -1, 0.7)), r(3, 5)),
        "log_softmax_t": lambda: finite_diff_check(lambda a: proj(T.log_softmax_t(a, 1, 0.3)), r(3, 5)),
        "l2_normalize": lambda: finite_diff_check(lambda a: proj(T.l2_normalize(a, 1)), r(4, 6)),
        "sum": lambda: finite_diff_check(lambda a: proj(a.sum(axis=1)), r(3, 4, 2)),
        "mean": lambda: finite_diff_check(lambda a: proj(a.mean(axis=(0, 2), keepdims=True)), r(3, 4, 2)),
        "reshape": lambda: finite_diff_check(lambda a: proj(a.reshape(6, 2)), r(3, 4)),
        "transpose": lambda: finite_diff_check(lambda a: proj(a.transpose(1, 0, 2)), r(2, 3, 4)),
        "index": lambda: finite_diff_check(lambda a: proj(a[np.arange(3), np.array([0, 2, 2])]), r(3, 4)),
        "concat": lambda: finite_diff_check(lambda a, b: proj(T.concat([a, b], axis=0)), [r(2, 3), r(1, 3)]),
        "batch_norm_train": lambda: finite_diff_check(
            lambda x, g, b: proj(T.batch_norm(x, g, b)[0]), [r(4, 3, 2, 2), positive(3), r(3)]
        ),
        "batch_norm_eval": lambda: finite_diff_check(
            lambda x, g, b: proj(T.batch_norm(x, g, b, stats=(np.zeros(5), np.full(5, 2.0)))[0]),
            [r(6, 5), positive(5), r(5)],
        ),
    }
    cases["res_moco_objective"] = lambda: _objective_case(rng)
    return cases


def _objective_case(rng: np.random.Generator) -> GradCheckReport:
    """Full training objective (inter InfoNCE + intra cosine) on a 4-sample batch."""
    from .objectives import BatchEmbeddings, ObjectiveConfig, total_loss

    b, d = 4, 6
    teacher = {k: Tensor(rng.standard_normal((b, d)), dtype=np.float64) for k in ("z1m", "z2m", "p1m", "p2m")}
    cfg = ObjectiveConfig(inter="infonce_ema", intra="cosine", tau=0.2)

    def f(p1: Tensor, p2: Tensor, z1: Tensor, z2: Tensor) -> Tensor:
        be = BatchEmbeddings(p1=p1, p2=p2, z1=z1, z2=z2, **teacher)
        return total_loss(be, cfg)[0]

    xs = [Tensor(rng.standard_normal((b, d)), dtype=np.float64) for _ in range(4)]
    return finite_diff_check(f, xs)


def op_names() -> List[str]:
    return list(_suite_cases(np.random.default_rng(0)).keys())


def run_suite(seed: int = 0) -> Dict[str, GradCheckReport]:
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        return {name: case() for name, case in _suite_cases(rng).items()}
