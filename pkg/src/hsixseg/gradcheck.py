"""Finite-difference derivative oracle for every differentiable block.

A block's analytic gradients (autograd) of a fixed random scalar projection
of its output are compared coordinate-by-coordinate against central
differences in 64-bit arithmetic. Inputs are nudged away from exact lattice
points so bilinear-sampling kinks do not poison the differences.
"""

import math
from dataclasses import dataclass, field

import torch

from .cmfex import CmfexBlock
from .dcn2d import Dcn2dBlock
from .hsi3d import Dcn3dBlock, PairedAttention
from .model import AllMlpDecoder, Ffm, HsiXSegNet, ModelConfig
from . import primitives

DEFAULT_EPS = 1e-5
BLOCK_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class TensorReport:
    name: str
    max_rel_err: float
    max_abs_err: float
    worst_index: int
    passed: bool


@dataclass
class GradReport:
    block: str
    tolerance: float
    tensors: list[TensorReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(t.passed for t in self.tensors)

    @property
    def max_rel_err(self) -> float:
        return max((t.max_rel_err for t in self.tensors), default=0.0)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.block}: max rel err {self.max_rel_err:.3e} "
                f"(tol {self.tolerance:.0e}, {len(self.tensors)} tensors)")


def finite_diff_grad(f, x: torch.Tensor, eps: float = DEFAULT_EPS,
                     indices=None) -> torch.Tensor:
    """Central differences (f(x+eps e_i) - f(x-eps e_i)) / (2 eps) per coordinate.

    ``indices`` restricts the probe to a subset of flat coordinates; the
    rest of the returned tensor is nan.
    """
    flat = x.detach().reshape(-1)
    grad = torch.full_like(flat, float("nan"))
    if indices is None:
        indices = range(flat.numel())
    for i in indices:
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(f())
        flat[i] = orig - eps
        lo = float(f())
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise ValueError(f"non-finite function value at probe coordinate {i}")
        grad[i] = (hi - lo) / (2 * eps)
    return grad.reshape(x.shape)


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def check_block(
    block,
    inputs: list[torch.Tensor],
    tol: float = BLOCK_TOL,
    eps: float = DEFAULT_EPS,
    max_coords_per_tensor: int | None = None,
    seed: int = 0,
    name: str | None = None,
) -> GradReport:
    """Compare autograd against finite differences for inputs and parameters.

    ``block`` is a module or callable taking the inputs positionally. Large
    tensors may be spot-checked by capping coordinates per tensor (seeded
    random subset). Reports only; never raises on mismatch.
    """
    gen = torch.Generator().manual_seed(seed)
    report = GradReport(block=name or type(block).__name__, tolerance=tol)

    inputs = [t.detach().double().requires_grad_(True) for t in inputs]
    params = list(block.named_parameters()) if isinstance(block, torch.nn.Module) else []

    out = block(*inputs)
    outs = out if isinstance(out, tuple) else (out,)
    projs = [torch.randn(o.shape, generator=gen, dtype=torch.float64) for o in outs]

    def scalar():
        o = block(*inputs)
        os_ = o if isinstance(o, tuple) else (o,)
        return sum((r * t).sum() for r, t in zip(projs, os_))

    loss = scalar()
    grads = torch.autograd.grad(
        loss, inputs + [p for _, p in params], allow_unused=True)

    targets = [(f"input{i}", t) for i, t in enumerate(inputs)] + params
    for (tname, tensor), analytic in zip(targets, grads):
        if analytic is None:
            analytic = torch.zeros_like(tensor)
        n = tensor.numel()
        if max_coords_per_tensor is not None and n > max_coords_per_tensor:
            indices = torch.randperm(n, generator=gen)[:max_coords_per_tensor].tolist()
        else:
            indices = list(range(n))
        with torch.no_grad():
            fd = finite_diff_grad(scalar, tensor, eps, indices)
        a = analytic.reshape(-1)
        f = fd.reshape(-1)
        max_rel, max_abs, worst = 0.0, 0.0, -1
        for i in indices:
            rel = _rel_err(float(a[i]), float(f[i]))
            max_abs = max(max_abs, abs(float(a[i]) - float(f[i])))
            if rel > max_rel:
                max_rel, worst = rel, i
        report.tensors.append(TensorReport(tname, max_rel, max_abs, worst, max_rel < tol))
    return report


def _nudged(shape, gen, scale=0.5, shift=0.01):
    return torch.randn(shape, generator=gen, dtype=torch.float64) * scale + shift


def _primitive_checks(gen) -> list[GradReport]:
    reports = []

    class BilinearProbe(torch.nn.Module):
        def forward(self, field, coords):
            return primitives.bilinear_sample(field, coords[..., 0], coords[..., 1])

    field = _nudged((5, 5), gen)
    coords = torch.rand(6, 2, generator=gen, dtype=torch.float64) * 3.5 + 0.26
    reports.append(check_block(BilinearProbe(), [field, coords], name="bilinear_sample"))

    class SoftmaxProbe(torch.nn.Module):
        def forward(self, v):
            return primitives.softmax(v, scale=0.7)

    reports.append(check_block(SoftmaxProbe(), [_nudged((7,), gen)], name="softmax"))

    class LayerNormProbe(torch.nn.Module):
        def forward(self, x, gain, bias):
            return primitives.layer_norm(x, gain, bias)

    reports.append(check_block(
        LayerNormProbe(),
        [_nudged((3, 6), gen), _nudged((6,), gen), _nudged((6,), gen)],
        name="layer_norm"))

    mlp = primitives.Mlp(5, 8, 4).double()
    reports.append(check_block(mlp, [_nudged((3, 5), gen)], name="mlp"))

    class DwProbe(torch.nn.Module):
        def forward(self, x, kernel):
            return primitives.dwconv2d(x, kernel)

    reports.append(check_block(
        DwProbe(), [_nudged((5, 5, 3), gen), _nudged((3, 3, 3), gen)], name="dwconv2d"))
    return reports


def standard_checks(scope: str | None = None, end_to_end_coords: int = 6) -> list[GradReport]:
    """Gradcheck every block at micro shapes; scope filters by name."""
    gen = torch.Generator().manual_seed(1234)
    checks = []

    def register(name, fn):
        if scope is None or scope == name:
            checks.append((name, fn))

    register("primitives", lambda: _primitive_checks(gen))

    def dcn2d_check():
        block = Dcn2dBlock(8, groups=2, kernel_size=3).double()
        return [check_block(block, [_nudged((5, 5, 8), gen)], name="dcn2d_block")]
    register("dcn2d", dcn2d_check)

    def epa_check():
        block = PairedAttention(6, tokens=4 * 4 * 3, rank=4).double()
        return [check_block(block, [_nudged((4, 4, 3, 6), gen)], name="epa")]
    register("epa", epa_check)

    def dcn3d_check():
        block = Dcn3dBlock(6, tokens=4 * 4 * 3, rank=4).double()
        return [check_block(block, [_nudged((4, 4, 3, 6), gen)], name="dcn3d_block")]
    register("dcn3d", dcn3d_check)

    def cmfex_check():
        block = CmfexBlock(6, tokens=16, rank=3, hsi_depth=2).double()
        return [check_block(
            block, [_nudged((4, 4, 2, 6), gen), _nudged((4, 4, 6), gen)],
            name="cmfex_forward")]
    register("cmfex", cmfex_check)

    def ffm_check():
        block = Ffm(6).double()
        return [check_block(
            block, [_nudged((4, 4, 6), gen), _nudged((4, 4, 6), gen)], name="ffm")]
    register("ffm", ffm_check)

    def decoder_check():
        block = AllMlpDecoder((4, 4, 4, 4), width=6, num_classes=3).double()

        class DecoderProbe(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.inner = block

            def forward(self, f0, f1, f2, f3):
                return self.inner([f0, f1, f2, f3], (4, 4))

        fused = [_nudged((4, 4, 4), gen), *(_nudged((2, 2, 4), gen) for _ in range(3))]
        return [check_block(DecoderProbe(), fused, name="decoder")]
    register("decoder", decoder_check)

    def end_to_end_check():
        cfg = ModelConfig(
            bands=6, x_channels=1, num_classes=3, tile_size=16,
            stage_depths=(1, 1, 1, 1), stage_channels=(8, 8, 8, 8),
            groups_per_stage=(2, 4, 4, 4), attention_rank=4,
            hsi_depth_schedule=(2, 1, 1, 1), decoder_width=8)
        model = HsiXSegNet(cfg).double()
        model.eval()  # batch norm with fixed statistics
        hsi = torch.rand(16, 16, 6, dtype=torch.float64) * 0.8 + 0.11
        x = torch.rand(16, 16, 1, dtype=torch.float64) * 0.8 + 0.11
        return [check_block(
            model, [hsi, x], tol=END_TO_END_TOL,
            max_coords_per_tensor=end_to_end_coords, name="end-to-end")]
    register("end-to-end", end_to_end_check)

    if not checks:
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    reports = []
    for _, fn in checks:
        reports.extend(fn())
    return reports
