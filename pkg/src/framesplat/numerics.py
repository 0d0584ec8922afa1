"""Differentiable-tensor substrate and gradient verification harness.

torch.autograd supplies the reverse-mode engine. This module pins down the
conventions every trainable operation in the package relies on:

* training runs in float32, verification in float64 end to end;
* a deterministic mode (fixed seeds, deterministic kernels) for bit-exact
  reruns;
* NaN/Inf surfacing as a structured :class:`NumericalFault` instead of
  silently poisoning downstream state;
* a central-difference grad-check harness with a registry of primitives,
  swept by the self-test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import torch

# A differentiable tensor is a torch.Tensor: `shape`/`values` are the tensor
# itself, the gradient accumulator is `.grad`, present iff `requires_grad`.
DiffTensor = torch.Tensor


class ContractViolation(ValueError):
    """An operation was called outside its stated preconditions."""


class NumericalFault(RuntimeError):
    """NaN or Inf surfaced during a forward or backward pass."""

    def __init__(self, message: str, op_name: str = "unknown"):
        super().__init__(message)
        self.op_name = op_name


def set_deterministic(flag: bool = True) -> None:
    """Toggle deterministic kernels and fixed reduction order.

    On for tests and reproducibility checks, off if raw speed matters.
    """
    torch.use_deterministic_algorithms(flag)


def seeded_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def check_finite(value: torch.Tensor, op_name: str) -> torch.Tensor:
    if not torch.isfinite(value).all():
        kind = "NaN" if torch.isnan(value).any() else "Inf"
        raise NumericalFault(f"{kind} produced by op '{op_name}'", op_name=op_name)
    return value


def forward_backward(root: torch.Tensor, named_leaves: Iterable[tuple[str, torch.Tensor]] | None = None,
                     retain_graph: bool = False) -> None:
    """Backpropagate from a scalar root, populating `.grad` on trainable leaves.

    Repeated calls accumulate gradients unless the caller clears them. A root
    with no trainable leaves is a no-op. Non-finite values in the root or in
    any named leaf gradient raise :class:`NumericalFault` naming the producer.
    """
    if root.numel() != 1:
        raise ContractViolation(f"forward_backward needs a scalar root, got shape {tuple(root.shape)}")
    fn = root.grad_fn.name() if root.grad_fn is not None else "leaf"
    check_finite(root, fn)
    if not root.requires_grad:
        return
    root.backward(retain_graph=retain_graph)
    if named_leaves is not None:
        for name, leaf in named_leaves:
            if leaf.grad is not None:
                check_finite(leaf.grad, f"grad[{name}]")


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    element_count: int
    passed: bool
    tol: float

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (f"[{status}] {self.op_name}: max_rel_err={self.max_rel_error:.3e} "
                f"over {self.element_count} probes (tol={self.tol:.1e})")


# Input factory: given a seeded generator, returns the op's input tensors.
# Float inputs sampled by the factory must sit inside the op's smooth region
# (away from sort ties, clamps, sign flips); the factory owns that exclusion.
InputFactory = Callable[[torch.Generator], Sequence[torch.Tensor]]


@dataclass
class PrimitiveSpec:
    name: str
    fn: Callable[..., torch.Tensor]
    make_inputs: InputFactory
    max_probes_per_input: int = 6
    note: str = ""


_REGISTRY: dict[str, PrimitiveSpec] = {}


def register_primitive(spec: PrimitiveSpec) -> PrimitiveSpec:
    if spec.name in _REGISTRY:
        raise ValueError(f"primitive '{spec.name}' registered twice")
    _REGISTRY[spec.name] = spec
    return spec


def registered_primitives() -> dict[str, PrimitiveSpec]:
    return dict(_REGISTRY)


def uniform_inputs(*shapes: tuple[int, ...], low: float = -1.0, high: float = 1.0) -> InputFactory:
    """Factory for plain box-bounded float64 inputs."""

    def make(gen: torch.Generator) -> list[torch.Tensor]:
        out = []
        for shape in shapes:
            t = torch.rand(shape, generator=gen, dtype=torch.float64) * (high - low) + low
            out.append(t.requires_grad_(True))
        return out

    return make


def _scalarize(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
               gen: torch.Generator) -> tuple[Callable[[], torch.Tensor], torch.Tensor]:
    """Reduce an arbitrary-shaped op to a scalar via a fixed random projection."""
    with torch.no_grad():
        probe_out = fn(*[x.detach() for x in inputs])
    proj = torch.rand(probe_out.shape, generator=gen, dtype=torch.float64) + 0.25

    def scalar() -> torch.Tensor:
        return (fn(*inputs) * proj).sum()

    return scalar, proj


def grad_check(fn: Callable[..., torch.Tensor], make_inputs: InputFactory, *,
               name: str = "op", eps: float = 1e-5, tol: float = 1e-4,
               seeds: Iterable[int] = range(10), max_probes_per_input: int = 6) -> GradCheckReport:
    """Compare analytic gradients against central differences in float64.

    For each seed, inputs are drawn from the factory, the op output is
    projected to a scalar, and a deterministic sample of input coordinates is
    probed:  rel_err = |analytic - central| / max(1, |central|).  Coordinate
    subsampling keeps composite ops (full model loss included) inside the
    self-test time budget; `element_count` reports how many were probed.
    """
    max_rel = 0.0
    count = 0
    for seed in seeds:
        gen = seeded_generator(seed * 7919 + 13)
        inputs = list(make_inputs(gen))
        scalar, _ = _scalarize(fn, inputs, gen)

        out_a = scalar()
        out_b = scalar()
        if not torch.equal(out_a.detach(), out_b.detach()):
            raise RuntimeError(f"op '{name}' is nondeterministic under a fixed seed")

        for x in inputs:
            if x.grad is not None:
                x.grad = None
        root = scalar()
        check_finite(root, name)
        root.backward()

        for x in inputs:
            if not (x.is_floating_point() and x.requires_grad):
                continue
            analytic = x.grad if x.grad is not None else torch.zeros_like(x)
            n = x.numel()
            k = min(max_probes_per_input, n)
            coords = torch.randperm(n, generator=gen)[:k]
            for c in coords.tolist():
                # index through the original tensor so non-contiguous leaves
                # are perturbed in place, not on a reshaped copy
                idx = torch.unravel_index(torch.tensor(c), x.shape)
                orig = x.detach()[idx].item()
                with torch.no_grad():
                    x.detach()[idx] = orig + eps
                    f_plus = scalar().item()
                    x.detach()[idx] = orig - eps
                    f_minus = scalar().item()
                    x.detach()[idx] = orig
                central = (f_plus - f_minus) / (2.0 * eps)
                a = analytic.reshape(-1)[c].item()
                rel = abs(a - central) / max(1.0, abs(central))
                max_rel = max(max_rel, rel)
                count += 1
    return GradCheckReport(op_name=name, max_rel_error=max_rel, element_count=count,
                           passed=max_rel < tol, tol=tol)


def check_registered(names: Iterable[str] | None = None, *, eps: float = 1e-5, tol: float = 1e-4,
                     seeds: Iterable[int] = range(10)) -> list[GradCheckReport]:
    """Run grad_check over (a subset of) the primitive registry."""
    seeds = list(seeds)
    specs = _REGISTRY if names is None else {n: _REGISTRY[n] for n in names}
    reports = []
    for spec in specs.values():
        reports.append(grad_check(spec.fn, spec.make_inputs, name=spec.name, eps=eps, tol=tol,
                                  seeds=seeds, max_probes_per_input=spec.max_probes_per_input))
    return reports
