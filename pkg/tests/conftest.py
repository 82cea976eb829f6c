import os

import pytest
import torch

torch.set_num_threads(int(os.environ.get("ALMTOK_NUM_THREADS", "1")))

FD_STEP = 1e-5
FD_TOL = 1e-4


def central_difference(fn, tensor, step=FD_STEP, max_entries=None, generator=None):
    """Numerical gradient of scalar ``fn()`` w.r.t. ``tensor`` (perturbed in place).

    With ``max_entries`` only a random subset of entries is probed; the
    returned mask marks which ones.
    """
    flat = tensor.data.view(-1)
    idx = torch.arange(flat.numel())
    if max_entries is not None and flat.numel() > max_entries:
        idx = torch.randperm(flat.numel(), generator=generator)[:max_entries]
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for i in idx.tolist():
            orig = flat[i].item()
            flat[i] = orig + step
            up = float(fn())
            flat[i] = orig - step
            down = float(fn())
            flat[i] = orig
            grad[i] = (up - down) / (2 * step)
    mask = torch.zeros(flat.numel(), dtype=torch.bool)
    mask[idx] = True
    return grad.view_as(tensor), mask.view_as(tensor)


def relative_error(analytic, numeric):
    denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / denom


def check_gradients(fn, tensors, max_entries=40, seed=0):
    """Max relative error between autograd and central differences over ``tensors``."""
    gen = torch.Generator().manual_seed(seed)
    for t in tensors:
        t.grad = None
    out = fn()
    out.backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
        numeric, mask = central_difference(fn, t, max_entries=max_entries, generator=gen)
        worst = max(worst, relative_error(analytic[mask], numeric[mask]))
    return worst


@pytest.fixture
def fd_check():
    return check_gradients


@pytest.fixture(scope="session")
def corpus():
    from almtok.data import synthetic_corpus

    return synthetic_corpus()


@pytest.fixture(scope="session")
def toy_books():
    from almtok.config import toy_config
    from almtok.quantizer import random_codebooks

    cfg = toy_config()
    return random_codebooks(cfg.codebook_size, cfg.vq_layers, cfg.d_vq, seed=0)


@pytest.fixture(scope="session")
def stage1_ckpt(corpus):
    from almtok.config import toy_config
    from almtok.training import stage1_train

    return stage1_train(corpus, toy_config(), steps=20)


@pytest.fixture(scope="session")
def trained_codec(corpus, stage1_ckpt, toy_books):
    """A briefly trained toy codec (stage 1 then stage 2) and its checkpoint."""
    from almtok.config import toy_config
    from almtok.training import codec_from_checkpoint, stage2_train

    ckpt = stage2_train(corpus, toy_config(), stage1_ckpt, toy_books, steps=60)
    return codec_from_checkpoint(ckpt), ckpt


# ----------------------------------------------------------------- acceptance summary

_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or report.outcome != "passed":
        _CRITERIA.setdefault(report.nodeid, report)
        if report.when == "call":
            _CRITERIA[report.nodeid] = report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(_CRITERIA):
        rep = _CRITERIA[nodeid]
        num, _, label = nodeid.split("::")[-1].removeprefix("test_criterion_").partition("_")
        detail = dict(rep.user_properties).get("detail", "")
        if not rep.passed:
            crash = getattr(rep.longrepr, "reprcrash", None)
            detail = "; ".join(filter(None, [detail, crash.message.splitlines()[0] if crash else ""]))
        status = "PASS" if rep.passed else "FAIL"
        terminalreporter.write_line(f"criterion {int(num):2d} {label}: {status}  {detail}")
