import pytest
import torch

from masattn.model import ModelConfig, init_weights


def central_diff(fn, tensors, h=1e-5):
    """Central-difference gradient of scalar ``fn()`` w.r.t. each tensor (modified in place, restored)."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(fn())
                flat[i] = orig - h
                down = float(fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-8):
    err = (analytic - numeric).abs()
    denom = torch.maximum(analytic.abs(), numeric.abs()).clamp_min(floor)
    # entries where both are at the noise floor compare absolutely
    rel = torch.where(torch.maximum(analytic.abs(), numeric.abs()) < 1e-7, err, err / denom)
    return float(rel.max())


@pytest.fixture
def tiny_config():
    return ModelConfig(d=8, h=2, n_layers=2, d_m=12, vocab_size=11, max_seq=64)


@pytest.fixture
def tiny_weights(tiny_config):
    return init_weights(tiny_config, seed=3, std=0.3)


# ---- acceptance reporting: one line per criterion at the end of the session

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(rep.longrepr).strip().splitlines()[-1][:160]
    status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    _criteria[marker.args[0]] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, detail = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
