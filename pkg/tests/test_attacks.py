import hashlib
import math
from fractions import Fraction

import pytest
import torch

from forgeshield.attacks import (
    Algorithm,
    AttackSpec,
    CwParams,
    PgnParams,
    attack_loss,
    bim,
    cw,
    fgsm,
    mi_fgsm,
    pgd,
    pgn,
    run_attack,
)
from forgeshield.losses import BCE_EPS, DICE_SMOOTH

PHI = 3 / 255
STEP = PHI / 10 * 1.25


def probe_grad(model, x, m, lambda_bce=0.3):
    """Closed-form attack-loss gradient for the pixelwise LinearProbe.

    dJ/dx[c, i, j] = (w / 3) * [lambda * (P - M) / (P (1 - P)) / N
                                + (1 - lambda) * ddice/dP[i, j]]
    with ddice/dP derived from the smoothed Dice loss.
    """
    p = 0.5 + model.w * (x.mean(dim=0) - 0.5)
    mf = m.float()
    n = p.numel()
    pc = p.clamp(BCE_EPS, 1 - BCE_EPS)
    dbce = (pc - mf) / (pc * (1 - pc)) / n
    inter = (p * mf).sum()
    denom = (p * p).sum() + (mf * mf).sum() + DICE_SMOOTH
    num = 2 * inter + DICE_SMOOTH
    ddice = -(2 * mf * denom - num * 2 * p) / denom**2
    dj_dp = lambda_bce * dbce + (1 - lambda_bce) * ddice
    return (dj_dp * model.w / 3.0).unsqueeze(0).expand(3, -1, -1)


def test_fgsm_zero_intensity_is_identity(linear_probe, rand_image, rand_mask):
    x, m = rand_image(0), rand_mask(0)
    result = fgsm(linear_probe, x, m, 0.0)
    assert torch.equal(result.adversarial, x)
    assert result.linf == 0.0


def test_fgsm_matches_analytic_sign_oracle(linear_probe, rand_image, rand_mask):
    x, m = rand_image(1), rand_mask(1)
    result = fgsm(linear_probe, x, m, PHI)
    expected = (x + PHI * torch.sign(probe_grad(linear_probe, x, m))).clamp(0, 1)
    assert torch.allclose(result.adversarial, expected, atol=1e-6)


def test_fgsm_certificate(tiny_victim, rand_image, rand_mask):
    result = fgsm(tiny_victim, rand_image(2), rand_mask(2), PHI)
    assert result.linf <= PHI + 2**-23
    assert result.iterations_run == 1 and len(result.loss_trace) == 1


def test_bim_single_step_reduces_to_fgsm(tiny_victim, rand_image, rand_mask):
    x, m = rand_image(3), rand_mask(3)
    a = fgsm(tiny_victim, x, m, PHI)
    b = bim(tiny_victim, x, m, PHI, steps=1, step_size=PHI)
    assert (a.adversarial - b.adversarial).abs().max().item() <= 1e-6


def test_bim_projection_bound(tiny_victim, rand_image, rand_mask):
    x, m = rand_image(4), rand_mask(4)
    result = bim(tiny_victim, x, m, 2 / 255, steps=10, step_size=2 / 255)
    assert result.linf <= 2 / 255 + 2**-23


def test_pgd_zero_radius_reduces_to_bim(tiny_victim, rand_image, rand_mask):
    x, m = rand_image(5), rand_mask(5)
    a = bim(tiny_victim, x, m, PHI, 5, STEP)
    b = pgd(tiny_victim, x, m, PHI, 5, STEP, random_start_radius=0.0, seed=9)
    assert torch.equal(a.adversarial, b.adversarial)


def test_pgd_deterministic_and_bounded(tiny_victim, rand_image, rand_mask):
    x, m = rand_image(6), rand_mask(6)
    a = pgd(tiny_victim, x, m, PHI, 5, STEP, PHI, seed=4)
    b = pgd(tiny_victim, x, m, PHI, 5, STEP, PHI, seed=4)
    assert torch.equal(a.adversarial, b.adversarial)
    assert a.loss_trace == b.loss_trace
    assert a.linf <= PHI + 2**-23


def test_pgd_rejects_radius_beyond_budget(tiny_victim, rand_image, rand_mask):
    with pytest.raises(ValueError):
        pgd(tiny_victim, rand_image(0), rand_mask(0), PHI, 2, STEP, 2 * PHI)


def test_mi_fgsm_zero_momentum_reduces_to_bim(tiny_victim, rand_image, rand_mask):
    x, m = rand_image(7), rand_mask(7)
    a = bim(tiny_victim, x, m, PHI, 5, STEP)
    b = mi_fgsm(tiny_victim, x, m, PHI, 5, STEP, momentum=0.0)
    assert (a.adversarial - b.adversarial).abs().max().item() <= 1e-6


def test_mi_fgsm_matches_hand_unrolled_recursion(linear_probe, rand_image, rand_mask):
    x, m = rand_image(8), rand_mask(8)
    mu, steps = 0.9, 2
    result = mi_fgsm(linear_probe, x, m, PHI, steps, STEP, mu)

    adv = x.clone()
    g = torch.zeros_like(x)
    for _ in range(steps):
        grad = probe_grad(linear_probe, adv, m)
        g = mu * g + grad / grad.abs().sum()
        adv = adv + STEP * torch.sign(g)
        adv = (x + (adv - x).clamp(-PHI, PHI)).clamp(0, 1)
    assert torch.allclose(result.adversarial, adv, atol=1e-6)


def test_mi_fgsm_momentum_bound(tiny_victim, rand_image, rand_mask):
    result = mi_fgsm(tiny_victim, rand_image(9), rand_mask(9), PHI, 10, STEP, 1.0)
    assert result.linf <= PHI + 2**-23


def test_pgn_reduces_to_mi_fgsm(tiny_victim, rand_image, rand_mask):
    x, m = rand_image(10), rand_mask(10)
    a = mi_fgsm(tiny_victim, x, m, PHI, 5, STEP, 1.0)
    b = pgn(
        tiny_victim, x, m, PHI, 5, STEP, 1.0,
        PgnParams(samples=1, balance=0.0, neighborhood=0.0), seed=2,
    )
    assert (a.adversarial - b.adversarial).abs().max().item() <= 1e-6


def test_pgn_deterministic_and_bounded(tiny_victim, rand_image, rand_mask):
    x, m = rand_image(11), rand_mask(11)
    params = PgnParams(samples=2, balance=0.5)
    a = pgn(tiny_victim, x, m, PHI, 3, STEP, 1.0, params, seed=5)
    b = pgn(tiny_victim, x, m, PHI, 3, STEP, 1.0, params, seed=5)
    assert torch.equal(a.adversarial, b.adversarial)
    assert a.linf <= PHI + 2**-23


def test_cw_zero_steps_is_identity(tiny_victim, rand_image):
    x = rand_image(12)
    result = cw(tiny_victim, x, 0.5, CwParams(steps=0))
    assert torch.equal(result.adversarial, x)
    assert result.linf == 0.0 and result.loss_trace == [] and result.iterations_run == 0


def test_cw_symmetric_threshold_zeroes_offset(tiny_victim, rand_image):
    """At threshold 0.5 the target offset k vanishes, so the first recorded
    loss is exactly mean(2P - 1) for the unperturbed image."""
    x = rand_image(13)
    with torch.no_grad():
        p = tiny_victim(x.unsqueeze(0)).squeeze(0)
    expected = (2.0 * p - 1.0).mean().item()
    result = cw(tiny_victim, x, 0.5, CwParams(steps=1, lr=0.01))
    assert result.loss_trace[0] == pytest.approx(expected, abs=1e-6)


def test_cw_hinge_clamps_per_pixel(tiny_victim, rand_image):
    x = rand_image(14)
    with torch.no_grad():
        p = tiny_victim(x.unsqueeze(0)).squeeze(0)
    expected = (2.0 * p - 1.0).clamp_min(0.0).mean().item()
    result = cw(tiny_victim, x, 0.5, CwParams(steps=1, lr=0.01, hinge=True))
    assert result.loss_trace[0] == pytest.approx(expected, abs=1e-6)


def test_cw_trace_length(tiny_victim, rand_image):
    result = cw(tiny_victim, rand_image(15), 0.5, CwParams(steps=7, lr=0.01))
    assert len(result.loss_trace) == 7 and result.iterations_run == 7


def _param_digest(model):
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.numpy().tobytes())
    return h.hexdigest()


def test_attacks_never_mutate_parameters(tiny_victim, rand_image, rand_mask):
    x, m = rand_image(16), rand_mask(16)
    before = _param_digest(tiny_victim)
    fgsm(tiny_victim, x, m, PHI)
    bim(tiny_victim, x, m, PHI, 3, STEP)
    pgd(tiny_victim, x, m, PHI, 3, STEP, PHI, seed=1)
    mi_fgsm(tiny_victim, x, m, PHI, 3, STEP, 1.0)
    pgn(tiny_victim, x, m, PHI, 2, STEP, 1.0, PgnParams(samples=1), seed=1)
    cw(tiny_victim, x, 0.5, CwParams(steps=3, lr=0.01))
    assert _param_digest(tiny_victim) == before


def test_attack_results_in_range(tiny_victim, rand_image, rand_mask):
    x, m = rand_image(17), rand_mask(17)
    for result in (
        fgsm(tiny_victim, x, m, 0.3),
        bim(tiny_victim, x, m, 0.3, 3, 0.2),
        cw(tiny_victim, x, 0.5, CwParams(steps=3, lr=5.0)),
    ):
        assert result.adversarial.min().item() >= 0.0
        assert result.adversarial.max().item() <= 1.0


def test_attack_loss_matches_probe_formula(linear_probe, rand_image, rand_mask):
    x, m = rand_image(18), rand_mask(18)
    x = x.requires_grad_(True)
    loss = attack_loss(linear_probe, x, m)
    (grad,) = torch.autograd.grad(loss, x)
    assert torch.allclose(grad, probe_grad(linear_probe, x.detach(), m), atol=1e-6)


# ---------------------------------------------------------------------------
# AttackSpec


def test_spec_parses_fraction_strings():
    spec = AttackSpec(algorithm=Algorithm.FGSM, intensity="3/255")
    assert spec.intensity == Fraction(3, 255)
    assert float(spec.intensity) == pytest.approx(3 / 255)


def test_spec_tag_uses_255_convention():
    assert AttackSpec(algorithm=Algorithm.FGSM, intensity="3/255").tag() == "fgsm-3_255"
    assert AttackSpec(algorithm=Algorithm.PGD, intensity="1/255").tag() == "pgd-1_255"
    assert AttackSpec(algorithm=Algorithm.CW, cw=CwParams(steps=250)).tag() == "cw-m250"


def test_spec_round_trip():
    spec = AttackSpec(
        algorithm=Algorithm.PGN,
        intensity="2/255",
        steps=7,
        momentum=0.8,
        pgn=PgnParams(samples=3, balance=0.25),
    )
    again = AttackSpec.from_dict(spec.to_dict())
    assert again == spec
    assert again.spec_hash() == spec.spec_hash()


def test_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec(algorithm=Algorithm.FGSM, intensity="-1/255")
    with pytest.raises(ValueError):
        AttackSpec(algorithm=Algorithm.BIM, steps=5, step_size=0.0)
    with pytest.raises(ValueError):
        AttackSpec(algorithm=Algorithm.BIM, momentum=-0.1)


def test_spec_default_step_size():
    spec = AttackSpec(algorithm=Algorithm.BIM, intensity="3/255", steps=10)
    assert spec.effective_step_size == pytest.approx(3 / 255 / 10 * 1.25)


def test_run_attack_dispatch(tiny_victim, rand_image, rand_mask):
    x, m = rand_image(19), rand_mask(19)
    for algo in Algorithm:
        spec = AttackSpec(algorithm=algo, intensity="2/255", steps=2,
                          cw=CwParams(steps=2, lr=0.01), pgn=PgnParams(samples=1))
        result = run_attack(tiny_victim, x, m, spec, seed=3)
        assert result.adversarial.shape == x.shape


def test_run_attack_deterministic_per_seed(tiny_victim, rand_image, rand_mask):
    x, m = rand_image(20), rand_mask(20)
    spec = AttackSpec(algorithm=Algorithm.PGD, intensity="3/255", steps=3)
    a = run_attack(tiny_victim, x, m, spec, seed=7)
    b = run_attack(tiny_victim, x, m, spec, seed=7)
    c = run_attack(tiny_victim, x, m, spec, seed=8)
    assert torch.equal(a.adversarial, b.adversarial)
    assert not torch.equal(a.adversarial, c.adversarial)
