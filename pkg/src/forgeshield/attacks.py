"""White-box attacks against localization models.

All attacks operate on canonical (0, 1) images, so the range width used in
the step and budget formulas is 1; a model with a different native range
converts at its own boundary, which scales steps by the native width without
changing gradient signs. Bounded attacks certify the measured L-infinity
distance in AttackResult.linf.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

import torch
from torch import Tensor

from .errors import CapabilityError
from .losses import mask_loss
from .types import CANONICAL_RANGE, trunc, validate_image
from .util import config_hash, format_fraction, parse_fraction

DELTA = CANONICAL_RANGE.width
ATTACK_LAMBDA_BCE = 0.3


class Algorithm(Enum):
    FGSM = "fgsm"
    BIM = "bim"
    PGD = "pgd"
    MIFGSM = "mifgsm"
    PGN = "pgn"
    CW = "cw"


BOUNDED_ALGORITHMS = frozenset(
    {Algorithm.FGSM, Algorithm.BIM, Algorithm.PGD, Algorithm.MIFGSM, Algorithm.PGN}
)


@dataclass(frozen=True)
class CwParams:
    """Optimization-attack settings: iteration count, learning rate, the
    weight on the mask-suppression term, and an optional per-pixel hinge."""

    steps: int = 250
    lr: float = 0.01
    weight: float = 1.0
    hinge: bool = False
    clamp_each_step: bool = False


@dataclass(frozen=True)
class PgnParams:
    """Neighborhood-sampled, lookahead-regularized gradient settings.

    ``neighborhood`` and ``lookahead`` default to 3*intensity and
    intensity/steps respectively when left as None.
    """

    samples: int = 4
    balance: float = 0.5
    neighborhood: float | None = None
    lookahead: float | None = None


@dataclass
class AttackSpec:
    """Declarative attack configuration, serializable into run configs."""

    algorithm: Algorithm
    intensity: Fraction = Fraction(3, 255)
    steps: int = 10
    step_size: float | None = None
    momentum: float = 1.0
    random_start_radius: Fraction | None = None
    cw: CwParams = field(default_factory=CwParams)
    pgn: PgnParams = field(default_factory=PgnParams)
    threshold: float = 0.5

    def __post_init__(self):
        if isinstance(self.algorithm, str):
            self.algorithm = Algorithm(self.algorithm.lower().replace("-", ""))
        self.intensity = parse_fraction(self.intensity)
        if self.random_start_radius is not None:
            self.random_start_radius = parse_fraction(self.random_start_radius)
        if self.intensity < 0:
            raise ValueError("intensity must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.steps > 0 and self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive when steps > 0")
        if self.momentum < 0:
            raise ValueError("momentum must be non-negative")
        if self.pgn.samples < 1:
            raise ValueError("neighborhood sample count must be >= 1")
        if self.cw.steps < 0:
            raise ValueError("optimization step count must be >= 0")

    @property
    def effective_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.steps == 0:
            return 0.0
        return float(self.intensity) / self.steps * 1.25

    @property
    def effective_start_radius(self) -> float:
        if self.random_start_radius is None:
            return float(self.intensity)
        return float(self.random_start_radius)

    def tag(self) -> str:
        """Short stable label used for variant directories and report rows."""
        if self.algorithm is Algorithm.CW:
            return f"cw-m{self.cw.steps}"
        # display 8-bit-friendly intensities in the x/255 convention
        scaled = self.intensity * 255
        if scaled.denominator == 1:
            phi = f"{scaled.numerator}_255"
        else:
            phi = format_fraction(self.intensity).replace("/", "_")
        return f"{self.algorithm.value}-{phi}"

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm.value,
            "intensity": format_fraction(self.intensity),
            "steps": self.steps,
            "step_size": self.step_size,
            "momentum": self.momentum,
            "random_start_radius": None
            if self.random_start_radius is None
            else format_fraction(self.random_start_radius),
            "cw": {
                "steps": self.cw.steps,
                "lr": self.cw.lr,
                "weight": self.cw.weight,
                "hinge": self.cw.hinge,
                "clamp_each_step": self.cw.clamp_each_step,
            },
            "pgn": {
                "samples": self.pgn.samples,
                "balance": self.pgn.balance,
                "neighborhood": self.pgn.neighborhood,
                "lookahead": self.pgn.lookahead,
            },
            "threshold": self.threshold,
        }

    @staticmethod
    def from_dict(d: dict) -> "AttackSpec":
        return AttackSpec(
            algorithm=Algorithm(d["algorithm"]),
            intensity=parse_fraction(d["intensity"]),
            steps=d.get("steps", 10),
            step_size=d.get("step_size"),
            momentum=d.get("momentum", 1.0),
            random_start_radius=None
            if d.get("random_start_radius") is None
            else parse_fraction(d["random_start_radius"]),
            cw=CwParams(**d.get("cw", {})),
            pgn=PgnParams(**d.get("pgn", {})),
            threshold=d.get("threshold", 0.5),
        )

    def spec_hash(self) -> str:
        return config_hash(self.to_dict())


@dataclass
class AttackResult:
    adversarial: Tensor
    linf: float
    loss_trace: list[float]
    iterations_run: int

    def write_trace_csv(self, path) -> None:
        """Dump the per-step loss trace as CSV with step and loss columns."""
        from pathlib import Path

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["step,loss"] + [f"{i},{v!r}" for i, v in enumerate(self.loss_trace)]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def attack_loss(model, image: Tensor, target: Tensor, lambda_bce: float = ATTACK_LAMBDA_BCE) -> Tensor:
    """Mask loss of the model's prediction against a target mask; the scalar
    whose input gradient drives the gradient-sign attacks."""
    p = model(image.unsqueeze(0)).squeeze(0)
    return mask_loss(p, target, lambda_bce)


def _input_grad(model, x: Tensor, target: Tensor) -> tuple[Tensor, float]:
    x = x.detach().requires_grad_(True)
    loss = attack_loss(model, x, target)
    try:
        (grad,) = torch.autograd.grad(loss, x)
    except RuntimeError as exc:
        raise CapabilityError(f"model forward is not differentiable: {exc}") from exc
    return grad, loss.item()


def _l1_normalize(g: Tensor) -> Tensor:
    norm = g.abs().sum()
    if norm == 0:
        return torch.zeros_like(g)
    return g / norm


class _FrozenEval:
    """Context that runs the model in eval mode and restores its prior mode."""

    def __init__(self, model):
        self.model = model

    def __enter__(self):
        self.was_training = self.model.training
        self.model.eval()
        return self.model

    def __exit__(self, *exc):
        self.model.train(self.was_training)
        return False


def _certified(image: Tensor, adv: Tensor, intensity: float, trace, iterations) -> AttackResult:
    """Package a bounded attack's output, asserting its budget certificate."""
    linf = (adv - image).abs().max().item()
    assert linf <= intensity * DELTA + 2**-23, f"budget violated: {linf} > {intensity * DELTA}"
    return AttackResult(adversarial=adv, linf=linf, loss_trace=trace, iterations_run=iterations)


def fgsm(model, image: Tensor, target: Tensor, intensity: float) -> AttackResult:
    """One signed-gradient step of size intensity * range-width, clamped."""
    validate_image(image)
    with _FrozenEval(model):
        grad, loss = _input_grad(model, image, target)
        adv = trunc(image + intensity * DELTA * torch.sign(grad))
    return _certified(image, adv.detach(), intensity, [loss], 1)


def _iterate_signed(
    image: Tensor,
    start: Tensor,
    intensity: float,
    steps: int,
    step_size: float,
    grad_fn,
) -> tuple[Tensor, list[float]]:
    """Shared loop: signed update, project into the budget ball around the
    original image, clamp into the pixel range."""
    budget = intensity * DELTA
    adv = start.clone()
    trace = []
    for _ in range(steps):
        direction, loss = grad_fn(adv)
        trace.append(loss)
        adv = adv + step_size * DELTA * torch.sign(direction)
        adv = trunc(image + (adv - image).clamp(-budget, budget))
    return adv.detach(), trace


def bim(
    model, image: Tensor, target: Tensor, intensity: float, steps: int, step_size: float
) -> AttackResult:
    """Iterated signed-gradient steps with projection into the budget ball."""
    validate_image(image)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    with _FrozenEval(model):
        adv, trace = _iterate_signed(
            image, image, intensity, steps, step_size,
            lambda x: _input_grad(model, x, target),
        )
    return _certified(image, adv, intensity, trace, steps)


def pgd(
    model,
    image: Tensor,
    target: Tensor,
    intensity: float,
    steps: int,
    step_size: float,
    random_start_radius: float,
    seed: int = 0,
) -> AttackResult:
    """BIM from a uniformly random start inside the given radius ball."""
    validate_image(image)
    if random_start_radius > intensity:
        raise ValueError("random_start_radius must not exceed the intensity budget")
    start = image
    if random_start_radius > 0:
        gen = torch.Generator().manual_seed(seed)
        noise = torch.empty_like(image).uniform_(
            -random_start_radius * DELTA, random_start_radius * DELTA, generator=gen
        )
        start = trunc(image + noise)
    with _FrozenEval(model):
        adv, trace = _iterate_signed(
            image, start, intensity, steps, step_size,
            lambda x: _input_grad(model, x, target),
        )
    return _certified(image, adv, intensity, trace, steps)


def mi_fgsm(
    model,
    image: Tensor,
    target: Tensor,
    intensity: float,
    steps: int,
    step_size: float,
    momentum: float,
) -> AttackResult:
    """Signed-gradient iteration with an L1-normalized momentum accumulator."""
    validate_image(image)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    g = torch.zeros_like(image)

    def grad_fn(x):
        nonlocal g
        grad, loss = _input_grad(model, x, target)
        g = momentum * g + _l1_normalize(grad)
        return g, loss

    with _FrozenEval(model):
        adv, trace = _iterate_signed(image, image, intensity, steps, step_size, grad_fn)
    return _certified(image, adv, intensity, trace, steps)


def pgn(
    model,
    image: Tensor,
    target: Tensor,
    intensity: float,
    steps: int,
    step_size: float,
    momentum: float,
    params: PgnParams,
    seed: int = 0,
) -> AttackResult:
    """Momentum attack whose gradient is averaged over a sampled neighborhood,
    blending each sample's gradient with a lookahead gradient taken after a
    small normalized step; flattens sharp loss regions."""
    validate_image(image)
    if params.samples < 1:
        raise ValueError("samples must be >= 1")
    if not 0.0 <= params.balance <= 1.0:
        raise ValueError("balance must lie in [0, 1]")
    zeta = 3.0 * intensity if params.neighborhood is None else params.neighborhood
    if zeta < 0:
        raise ValueError("neighborhood must be non-negative")
    lookahead = (intensity / steps if steps else 0.0) if params.lookahead is None else params.lookahead
    gen = torch.Generator().manual_seed(seed)
    g = torch.zeros_like(image)

    def grad_fn(x):
        nonlocal g
        acc = torch.zeros_like(x)
        loss_sum = 0.0
        for _ in range(params.samples):
            probe = x
            if zeta > 0:
                offset = torch.empty_like(x).uniform_(-zeta * DELTA, zeta * DELTA, generator=gen)
                probe = x + offset
            g1, loss = _input_grad(model, probe, target)
            loss_sum += loss
            if params.balance > 0:
                ahead = probe + lookahead * DELTA * _l1_normalize(g1)
                g2, _ = _input_grad(model, ahead, target)
            else:
                g2 = g1
            acc = acc + (1.0 - params.balance) * g1 + params.balance * g2
        acc = acc / params.samples
        g = momentum * g + _l1_normalize(acc)
        return g, loss_sum / params.samples

    with _FrozenEval(model):
        adv, trace = _iterate_signed(image, image, intensity, steps, step_size, grad_fn)
    return _certified(image, adv, intensity, trace, steps)


def cw(
    model,
    image: Tensor,
    threshold: float = 0.5,
    params: CwParams = CwParams(),
) -> AttackResult:
    """Optimization attack driving the predicted mask toward all-zero while
    penalizing the squared L2 norm of the noise.

    Minimizes ||xi||_2^2 + weight * reduce(P - (1 - P) - k) over the additive
    noise xi, where k = threshold - (1 - threshold) and reduce is the spatial
    mean (per-pixel hinged at zero first when ``hinge`` is set). The noise is
    applied unclamped during optimization and the final image is clamped.
    """
    validate_image(image)
    k = threshold - (1.0 - threshold)
    xi = torch.zeros_like(image)
    trace: list[float] = []
    with _FrozenEval(model):
        for _ in range(params.steps):
            xi = xi.detach().requires_grad_(True)
            p_a = model((image + xi).unsqueeze(0)).squeeze(0)
            attack_term = p_a - (1.0 - p_a) - k
            if params.hinge:
                attack_term = attack_term.clamp_min(0.0)
            loss = (xi * xi).sum() + params.weight * attack_term.mean()
            try:
                (grad,) = torch.autograd.grad(loss, xi)
            except RuntimeError as exc:
                raise CapabilityError(f"model forward is not differentiable: {exc}") from exc
            trace.append(loss.item())
            xi = (xi - params.lr * grad).detach()
            if params.clamp_each_step:
                xi = trunc(image + xi) - image
    adv = trunc(image + xi).detach()
    return AttackResult(adv, (adv - image).abs().max().item(), trace, params.steps)


def run_attack(model, image: Tensor, target: Tensor, spec: AttackSpec, seed: int = 0) -> AttackResult:
    """Dispatch an AttackSpec against one image. ``target`` is the ground-truth
    mask for the gradient-sign attacks and is ignored by the optimization
    attack, which always drives toward the all-zero mask."""
    phi = float(spec.intensity)
    if spec.algorithm is Algorithm.FGSM:
        return fgsm(model, image, target, phi)
    if spec.algorithm is Algorithm.BIM:
        return bim(model, image, target, phi, spec.steps, spec.effective_step_size)
    if spec.algorithm is Algorithm.PGD:
        return pgd(
            model, image, target, phi, spec.steps, spec.effective_step_size,
            spec.effective_start_radius, seed=seed,
        )
    if spec.algorithm is Algorithm.MIFGSM:
        return mi_fgsm(model, image, target, phi, spec.steps, spec.effective_step_size, spec.momentum)
    if spec.algorithm is Algorithm.PGN:
        return pgn(
            model, image, target, phi, spec.steps, spec.effective_step_size,
            spec.momentum, spec.pgn, seed=seed,
        )
    if spec.algorithm is Algorithm.CW:
        return cw(model, image, spec.threshold, spec.cw)
    raise ValueError(f"unknown algorithm: {spec.algorithm}")
