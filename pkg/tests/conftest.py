"""Shared fixtures: finite-difference oracle and a pretrained desk backbone."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from saltlab import tensor as T
from saltlab.harness import ExperimentConfig, pretrain_backbone

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")

FD_STEP = 1e-6
# Both norms below this: the gradient is structurally zero (e.g. a conv bias
# feeding train-mode batch norm) and only finite-difference roundoff remains.
ZERO_GRAD_ATOL = 1e-8


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error between two gradient arrays."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < ZERO_GRAD_ATOL:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(fn, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = fn()
        flat[i] = orig - h
        minus = fn()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return grad


def check_grads(build, inputs: list[T.Tensor]) -> float:
    """Largest relative error between autodiff and central differences over ``inputs``.

    ``build()`` must return a scalar Tensor computed from ``inputs``.
    """
    for t in inputs:
        t.grad = None
    build().backward()
    analytic = [t.grad.copy() for t in inputs]

    def value():
        with T.no_grad():
            return build().item()

    return max(rel_error(a, numeric_grad(value, t.data)) for a, t in zip(analytic, inputs))


def weighted_sum(out: T.Tensor, seed: int = 0) -> T.Tensor:
    """sum(out * R) for a fixed random R, so every output element contributes."""
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return T.tensor_sum(T.mul(out, T.Tensor(r.astype(out.dtype))))


@pytest.fixture(scope="session")
def backbone_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("backbone") / "backbone.smdl"
    result = pretrain_backbone(ExperimentConfig().dataset, 0, path)
    return path, result


# --------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion at the end of the run
# --------------------------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    detail = next((v for k, v in item.user_properties if k == "detail"), "")
    _CRITERIA[number] = (title, "FAIL" if call.excinfo is not None else "PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcome, detail = _CRITERIA[number]
        line = f"criterion {number:2d} {outcome}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
