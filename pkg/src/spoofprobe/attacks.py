"""Head-targeted L-infinity attacks: FGSM, PGD and the SFA-anchored variant.

Every attack maximises the unweighted loss of one head ``s`` of the
multitask model (see :func:`spoofprobe.losses.head_loss`). With SFA enabled
the gradient is evaluated at ``clamp(x + SFA(x))`` but the signed step is
added to the original ``x``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, List, Optional, Tuple

import torch

from .errors import AttackLookupError, ConfigurationError, NumericError, RegistrationError
from .losses import HEADS, head_loss
from .models import predict_binary
from .sfa import SfaGenerators, clamp_pixels, sfa_apply


@dataclass(frozen=True)
class AttackSpec:
    method: str = "fgsm"
    head: str = "c"
    epsilon: float = 0.06
    steps: Optional[int] = None
    step_size: Optional[float] = None
    use_sfa: bool = False
    random_start: bool = False
    # Ablation: step from the SFA-shifted image instead of the original.
    perturb_sfa_image: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.head not in HEADS:
            raise ConfigurationError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        steps = self.resolved_steps
        if steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {steps}")
        if self.method == "fgsm" and steps != 1:
            raise ConfigurationError("fgsm is a one-step attack; use method='pgd' for steps > 1")
        if steps > 1 and self.resolved_step_size <= 0:
            raise ConfigurationError("step_size must be positive for iterative attacks")

    @property
    def resolved_steps(self) -> int:
        if self.steps is not None:
            return int(self.steps)
        return 10 if self.method == "pgd" else 1

    @property
    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return float(self.step_size)
        return self.epsilon / 4 if self.resolved_steps > 1 else self.epsilon

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackResult:
    """Per-sample outcome of one attack over a batch (all tensors have length N)."""

    x_adv: torch.Tensor
    head_loss_before: torch.Tensor
    head_loss_after: torch.Tensor
    pred_before: torch.Tensor
    pred_after: torch.Tensor
    perturbation_linf: torch.Tensor


def input_gradient(model, x: torch.Tensor, labels, targets, head: str) -> torch.Tensor:
    """Gradient of the summed per-sample head loss with respect to the input."""
    x = x.detach().clone().requires_grad_(True)
    loss = head_loss(model(x), labels, targets, head, reduction="sum")
    (grad,) = torch.autograd.grad(loss, x)
    if not torch.isfinite(grad).all():
        raise NumericError(f"non-finite input gradient for head {head!r}")
    return grad


@torch.no_grad()
def _evaluate(model, x, labels, targets, head) -> Tuple[torch.Tensor, torch.Tensor]:
    out = model(x)
    return head_loss(out, labels, targets, head, reduction="none"), predict_binary(out.v_c)[0]


def _result(model, x, x_adv, labels, targets, head, anchor=None) -> AttackResult:
    loss_b, pred_b = _evaluate(model, x, labels, targets, head)
    loss_a, pred_a = _evaluate(model, x_adv, labels, targets, head)
    ref = x if anchor is None else anchor
    linf = (x_adv - ref).abs().flatten(1).amax(dim=1) if len(x) else torch.zeros(0)
    return AttackResult(x_adv.detach(), loss_b, loss_a, pred_b, pred_a, linf)


@torch.no_grad()
def sfa_anchor(x: torch.Tensor, labels, gens: SfaGenerators) -> torch.Tensor:
    gens.eval()
    return sfa_apply(x, labels.y, gens)


def fgsm(model, x, labels, targets, spec: AttackSpec, gens: Optional[SfaGenerators] = None) -> AttackResult:
    """One signed-gradient step of size epsilon, clamped to [0, 1]."""
    if spec.use_sfa:
        return fine_grained_attack(model, gens, x, labels, targets, spec)
    model.eval()
    grad = input_gradient(model, x, labels, targets, spec.head)
    x_adv = clamp_pixels(x + spec.epsilon * grad.sign())
    return _result(model, x, x_adv, labels, targets, spec.head)


def fine_grained_attack(model, gens: Optional[SfaGenerators], x, labels, targets,
                        spec: AttackSpec) -> AttackResult:
    """FGSM whose gradient is taken at the SFA-shifted image.

    ``x_adv = clamp(x + eps * sign(grad L_s at clamp(x + SFA(x))))``.
    With ``spec.perturb_sfa_image`` the step is applied to the shifted image
    instead and the reported perturbation is measured from that image.
    """
    if gens is None:
        raise ConfigurationError("an SFA attack needs trained generators")
    model.eval()
    anchor = sfa_anchor(x, labels, gens)
    grad = input_gradient(model, anchor, labels, targets, spec.head)
    base = anchor if spec.perturb_sfa_image else x
    x_adv = clamp_pixels(base + spec.epsilon * grad.sign())
    return _result(model, x, x_adv, labels, targets, spec.head,
                   anchor=anchor if spec.perturb_sfa_image else None)


def pgd(model, x, labels, targets, spec: AttackSpec, gens: Optional[SfaGenerators] = None) -> AttackResult:
    """Iterated signed steps projected onto the epsilon-ball around ``x`` and [0, 1].

    With SFA the iteration starts from ``clamp(x + SFA(x))``; projection stays
    centred on ``x``.
    """
    model.eval()
    eps, step = spec.epsilon, spec.resolved_step_size
    lo, hi = x - eps, x + eps
    if spec.use_sfa:
        if gens is None:
            raise ConfigurationError("an SFA attack needs trained generators")
        xk = sfa_anchor(x, labels, gens)
    else:
        xk = x.clone()
    if spec.random_start:
        g = torch.Generator(device=x.device).manual_seed(spec.seed)
        noise = (torch.rand(x.shape, generator=g, device=x.device, dtype=x.dtype) * 2 - 1) * eps
        xk = torch.min(torch.max(xk + noise, lo), hi).clamp(0.0, 1.0)
    for _ in range(spec.resolved_steps):
        grad = input_gradient(model, xk, labels, targets, spec.head)
        xk = torch.min(torch.max(xk + step * grad.sign(), lo), hi).clamp(0.0, 1.0)
    return _result(model, x, xk.detach(), labels, targets, spec.head)


# ---------------------------------------------------------------------------
# registry

AttackFn = Callable[..., AttackResult]


@dataclass(frozen=True)
class AttackDescriptor:
    name: str
    fn: AttackFn
    capabilities: Tuple[str, ...] = ()


class AttackRegistry:
    """Name -> attack function. Functions take ``(model, x, labels, targets, spec, gens=None)``."""

    def __init__(self, builtins: bool = True):
        self._attacks: Dict[str, AttackDescriptor] = {}
        if builtins:
            self.register("fgsm", fgsm, ("linf", "one-step", "sfa"))
            self.register("pgd", pgd, ("linf", "iterative", "sfa", "random-start"))

    def register(self, name: str, fn: AttackFn, capabilities=()) -> AttackDescriptor:
        if name in self._attacks:
            raise RegistrationError(f"attack {name!r} is already registered")
        desc = AttackDescriptor(name, fn, tuple(capabilities))
        self._attacks[name] = desc
        return desc

    def get(self, name: str) -> AttackDescriptor:
        try:
            return self._attacks[name]
        except KeyError:
            raise AttackLookupError(
                f"unknown attack method {name!r}; valid methods: {', '.join(sorted(self._attacks))}") from None

    def list(self) -> List[AttackDescriptor]:
        return list(self._attacks.values())

    def names(self) -> List[str]:
        return list(self._attacks)

    def run(self, spec: AttackSpec, model, x, labels, targets, gens=None) -> AttackResult:
        return self.get(spec.method).fn(model, x, labels, targets, spec, gens=gens)


REGISTRY = AttackRegistry()


def attack_registry() -> List[AttackDescriptor]:
    return REGISTRY.list()


def register_attack(name: str, fn: AttackFn, capabilities=()) -> AttackDescriptor:
    return REGISTRY.register(name, fn, capabilities)


def run_attack(spec: AttackSpec, model, x, labels, targets, gens=None) -> AttackResult:
    return REGISTRY.run(spec, model, x, labels, targets, gens)


def with_epsilon(spec: AttackSpec, epsilon: float) -> AttackSpec:
    return replace(spec, epsilon=epsilon)
