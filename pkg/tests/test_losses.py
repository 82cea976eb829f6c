import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from almtok import losses as L
from almtok.config import SpectrogramConfig, toy_config
from almtok.quantizer import ResidualVQ, random_codebooks, straight_through

from conftest import FD_TOL

SC = SpectrogramConfig(fft_size=64, hop=16, mel_bins=8)


def loop_subband_l1(x, y, fft, hop, bands):
    """Explicit frame loop with numpy's rfft."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    window = np.hanning(fft + 1)[:-1]
    n_bins = fft // 2 + 1
    edges = [round(i * n_bins / bands) for i in range(bands + 1)]
    diffs = []
    for start in range(0, len(x) - fft + 1, hop):
        a = np.abs(np.fft.rfft(x[start : start + fft] * window))
        b = np.abs(np.fft.rfft(y[start : start + fft] * window))
        diffs.append(np.abs(a - b))
    diffs = np.array(diffs)
    return np.mean([diffs[:, edges[i] : edges[i + 1]].mean() for i in range(bands)])


# ----------------------------------------------------------------- reconstruction


def test_recon_time_analytic():
    assert L.recon_time(torch.zeros(10), torch.ones(10)).item() == 1.0
    x = torch.tensor([1.0, -2.0, 3.0, 0.0])
    assert L.recon_time(x, torch.zeros(4)).item() == 1.5
    with pytest.raises(ValueError, match="length mismatch"):
        L.recon_time(torch.zeros(3), torch.zeros(4))


def test_recon_freq_identical_is_zero():
    x = torch.randn(300, dtype=torch.float64)
    assert L.recon_freq_subband(x, x.clone(), SC).item() == 0.0


@pytest.mark.parametrize("bands", [1, 2, 4, 7])
def test_recon_freq_matches_loop(bands):
    gen = torch.Generator().manual_seed(bands)
    x = torch.randn(257, dtype=torch.float64, generator=gen)
    y = torch.randn(257, dtype=torch.float64, generator=gen)
    got = L.recon_freq_subband(x, y, SC, bands).item()
    assert got == pytest.approx(loop_subband_l1(x, y, 64, 16, bands), rel=1e-12)


def test_recon_freq_multiscale_loop():
    gen = torch.Generator().manual_seed(11)
    x = torch.randn(400, dtype=torch.float64, generator=gen)
    y = torch.randn(400, dtype=torch.float64, generator=gen)
    assert L.recon_freq(x, y, SC, 4, scales=1).item() == L.recon_freq_subband(x, y, SC, 4).item()
    expected = np.mean([loop_subband_l1(x, y, 64 >> k, 16 >> k, 4) for k in range(3)])
    assert L.recon_freq(x, y, SC, 4, scales=3).item() == pytest.approx(expected, rel=1e-12)


def test_recon_freq_errors():
    with pytest.raises(ValueError, match="bands"):
        L.recon_freq_subband(torch.zeros(100), torch.zeros(100), SC, 0)
    with pytest.raises(ValueError, match="length mismatch"):
        L.recon_freq_subband(torch.zeros(100), torch.zeros(101), SC)


# ----------------------------------------------------------------- adversarial


def test_hinge_losses_analytic():
    assert L.disc_loss([torch.full((3,), 2.0)], [torch.full((3,), -2.0)]).item() == 0.0
    assert L.disc_loss([torch.zeros(5)], [torch.zeros(5)]).item() == 2.0
    # two discriminators: (0.5 + 1.5) and (0 + 0) averaged
    real = [torch.tensor([0.5]), torch.tensor([3.0])]
    fake = [torch.tensor([0.5]), torch.tensor([-3.0])]
    assert L.disc_loss(real, fake).item() == 1.0
    assert L.gen_adv_loss([torch.full((4,), 2.0)]).item() == 0.0
    assert L.gen_adv_loss([torch.zeros(4), torch.tensor([-1.0, 3.0])]).item() == 1.0


@settings(max_examples=30, deadline=None)
@given(
    real=st.lists(st.floats(-5, 5), min_size=1, max_size=6),
    fake=st.lists(st.floats(-5, 5), min_size=1, max_size=6),
)
def test_hinge_loop_oracle(real, fake):
    r, f = torch.tensor(real, dtype=torch.float64), torch.tensor(fake, dtype=torch.float64)
    expected = np.mean([max(0, 1 - v) for v in real]) + np.mean([max(0, 1 + v) for v in fake])
    assert L.disc_loss([r], [f]).item() == pytest.approx(expected, abs=1e-12)
    assert L.gen_adv_loss([f]).item() == pytest.approx(np.mean([max(0, 1 - v) for v in fake]), abs=1e-12)
    assert L.disc_loss([r], [f]).item() >= 0


def test_feature_matching():
    feats = [[torch.randn(2, 3), torch.randn(4)] for _ in range(3)]
    assert L.feature_match_loss(feats, feats).item() == 0.0
    shifted = [[f + 0.25 for f in fs] for fs in feats]
    assert L.feature_match_loss(feats, shifted).item() == pytest.approx(0.25)


def test_discriminator_shapes():
    cfg = toy_config()
    torch.manual_seed(0)
    ens = L.DiscriminatorEnsemble(cfg)
    assert len(ens.members) == 6
    outs = ens(torch.randn(2, 4000))
    for logits, feats in outs:
        assert logits.shape[0] == 2 and logits.shape[1] == 1
        assert len(feats) == 4


# ----------------------------------------------------------------- auxiliary


def test_mae_loss_masked_rows_only():
    pred = torch.zeros(2, 4, 3)
    target = torch.arange(24, dtype=torch.float32).reshape(2, 4, 3)
    mask = torch.tensor([[True, False, False, False], [False, False, True, False]])
    rows = torch.cat([target[0, 0], target[1, 2]])
    assert L.mae_loss(pred, target, mask).item() == pytest.approx((rows**2).mean().item())
    unmasked_change = pred.clone()
    unmasked_change[0, 1] = 100.0
    assert L.mae_loss(unmasked_change, target, mask).item() == L.mae_loss(pred, target, mask).item()
    assert L.mae_loss(pred, target, mask, l1_all_frames=True).item() == target.abs().mean().item()
    with pytest.raises(ValueError, match="empty mask"):
        L.mae_loss(pred, target, torch.zeros(2, 4, dtype=torch.bool))


def test_ar_loss_analytic_and_detached():
    preds = torch.zeros(3, 2, 4, requires_grad=True)
    targets = torch.full((3, 2, 4), 2.0, requires_grad=True)
    loss = L.ar_loss(preds, targets)
    assert loss.item() == 4.0
    loss.backward()
    assert targets.grad is None
    with pytest.raises(ValueError):
        L.ar_loss(torch.zeros(2), torch.zeros(3))


# ----------------------------------------------------------------- composition


def test_total_generator_loss_weights():
    parts = {"l_rec": 0.0, "l_adv": 0.0, "l_feat": 0.0, "l_mae": 2.0, "l_ar": 5.0}
    assert L.total_generator_loss(parts).total == 1.5
    report = L.total_generator_loss({"l_rec_time": 1.0, "l_rec_freq": 2.0, "l_adv": 3.0, "l_feat": 4.0})
    assert report.total == 10.0
    assert L.total_generator_loss({"l_commit": 4.0}, commit_weight=0.25).total == 1.0


def test_total_generator_loss_rejects_bad_parts():
    with pytest.raises(ValueError, match="non-finite"):
        L.total_generator_loss({"l_adv": float("nan")})
    with pytest.raises(ValueError, match="unknown"):
        L.total_generator_loss({"l_bogus": 1.0})


def test_report_key_order():
    assert tuple(L.LossReport().to_dict()) == L.LossReport.KEYS


# ----------------------------------------------------------------- gradients


def _rand(*shape, seed=0, grad=True):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, dtype=torch.float64, generator=gen).requires_grad_(grad)


def test_gradient_recon_time(fd_check):
    x, y = _rand(40, seed=1, grad=False), _rand(40, seed=2)
    assert fd_check(lambda: L.recon_time(x, y), [y]) < FD_TOL


def test_gradient_recon_freq(fd_check):
    x, y = _rand(160, seed=3, grad=False), _rand(160, seed=4)
    assert fd_check(lambda: L.recon_freq_subband(x, y, SC, 4), [y]) < FD_TOL


def test_gradient_hinge_and_feature_matching(fd_check):
    # logits kept away from the hinge kinks at +-1
    real = (_rand(6, seed=5, grad=False) * 0.2).detach().requires_grad_(True)
    fake = (_rand(6, seed=6, grad=False) * 0.2).detach().requires_grad_(True)
    assert fd_check(lambda: L.disc_loss([real], [fake]), [real, fake]) < FD_TOL
    assert fd_check(lambda: L.gen_adv_loss([fake]), [fake]) < FD_TOL
    rf = [_rand(5, seed=7, grad=False), _rand(3, seed=8, grad=False)]
    ff = [_rand(5, seed=9), _rand(3, seed=10)]
    assert fd_check(lambda: L.feature_match_loss([rf], [ff]), ff) < FD_TOL


def test_gradient_mae_and_ar(fd_check):
    pred, target = _rand(2, 5, 3, seed=11), _rand(2, 5, 3, seed=12, grad=False)
    mask = torch.tensor([[True, False, True, False, False], [False, True, False, False, True]])
    assert fd_check(lambda: L.mae_loss(pred, target, mask), [pred]) < FD_TOL
    preds = _rand(4, 2, 3, seed=13)
    targets = _rand(4, 2, 3, seed=14, grad=False)
    assert fd_check(lambda: L.ar_loss(preds, targets), [preds]) < FD_TOL


def test_gradient_discriminator(fd_check):
    torch.manual_seed(15)
    disc = L.MelDiscriminator(8000, 32, 4, 8).double()
    x = _rand(1, 400, seed=16)
    target = [torch.randn_like(f) for f in disc(x.detach())[1]]
    fn = lambda: disc(x)[0].mean() + sum(((f - t) ** 2).mean() for f, t in zip(disc(x)[1], target))  # noqa: E731
    assert fd_check(fn, [x, *disc.parameters()], max_entries=10) < FD_TOL


def test_gradient_straight_through_contract(fd_check):
    """d f(ST(h, q)) / dh equals the finite-difference gradient of f at the quantized point."""
    h = _rand(3, 4, seed=17)
    q = _rand(3, 4, seed=18, grad=False)
    w = _rand(3, 4, seed=19, grad=False)
    f = lambda z: torch.sin(z * w).sum() + (z**2).sum()  # noqa: E731
    f(straight_through(h, q)).backward()
    q_var = q.clone().requires_grad_(True)
    assert fd_check(lambda: f(q_var), [q_var]) < FD_TOL
    torch.testing.assert_close(h.grad, q_var.grad, rtol=1e-12, atol=1e-12)


def test_gradient_through_residual_vq(fd_check):
    """Projection gradients through the quantizer match FD of the identity surrogate."""
    torch.manual_seed(20)
    books = random_codebooks(8, 2, 4, seed=1)
    vq = ResidualVQ(6, books).double()
    h = _rand(5, 6, seed=21)
    target = _rand(5, 4, seed=22, grad=False)
    with torch.no_grad():
        res, _, _ = vq(h)
        offset = (res.quantized_sum - res.projected).detach()
    _, q_sum, _ = vq(h)
    ((q_sum - target) ** 2).sum().backward()
    analytic = [vq.proj.weight.grad.clone(), h.grad.clone()]
    surrogate = lambda: ((vq.proj(h) + offset - target) ** 2).sum()  # noqa: E731
    assert fd_check(surrogate, [vq.proj.weight, h]) < FD_TOL
    torch.testing.assert_close(vq.proj.weight.grad, analytic[0])
    torch.testing.assert_close(h.grad, analytic[1])
