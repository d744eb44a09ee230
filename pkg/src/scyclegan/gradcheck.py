"""Central finite-difference verification of analytic gradients.

The miniature configuration (8x8 canvas, U-Net widths (4, 8, 16) with a
32-wide bottleneck, 2 classes, a (4, 8) discriminator stack) is small enough
to difference every parameter. Probes are evaluated in ensembles via
``torch.func.vmap`` over substituted parameter tensors; the finite-difference
side always runs in double precision, while analytic gradients run at the
precision under test.

Relative error per coordinate is |analytic - fd| / max(1, |analytic|, |fd|);
a check passes when the maximum over all coordinates is below tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import losses, networks
from .errors import UsageError

MINI_CANVAS = 8
MINI_WIDTHS = (4, 8, 16)
MINI_BOTTLENECK = 32
MINI_CLASSES = 2
MINI_DISC_WIDTHS = (4, 8)

FD_STEP_DOUBLE = 1e-4

CHECK_NAMES = ("generator_total", "seg_loss", "adversarial_d", "adversarial_g")


@dataclass
class GradCheckResult:
    name: str
    n_params: int
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _mini_nets(precision: str):
    g_cfg = networks.generator_config_for_classes(
        MINI_CLASSES, widths=MINI_WIDTHS, bottleneck=MINI_BOTTLENECK
    )
    s_cfg = networks.SegmentorConfig(
        num_classes=MINI_CLASSES, widths=MINI_WIDTHS, bottleneck=MINI_BOTTLENECK
    )
    d_cfg = networks.DiscriminatorConfig(widths=MINI_DISC_WIDTHS)
    return {
        "gen_ct2us": networks.build_generator(g_cfg, 11, precision),
        "gen_us2ct": networks.build_generator(g_cfg, 12, precision),
        "disc_ct": networks.build_discriminator(d_cfg, 13, precision),
        "disc_us": networks.build_discriminator(d_cfg, 14, precision),
        "seg_ct": networks.build_segmentor(s_cfg, 15, precision),
        "seg_us": networks.build_segmentor(s_cfg, 16, precision),
    }


def _mini_inputs(dtype):
    rng = np.random.default_rng(np.random.SeedSequence([2024]))
    out = {}
    for dom in ("ct", "us"):
        img = rng.uniform(-0.9, 0.9, (1, 3, MINI_CANVAS, MINI_CANVAS))
        mask = rng.integers(0, MINI_CLASSES, (MINI_CANVAS, MINI_CANVAS))
        planes = np.zeros((1, MINI_CLASSES, MINI_CANVAS, MINI_CANVAS))
        for c in range(MINI_CLASSES):
            planes[0, c] = mask == c
        out[dom] = {
            "image": torch.from_numpy(img).to(dtype),
            "onehot": torch.from_numpy(planes).to(dtype),
            "mask": torch.from_numpy(mask.astype(np.int64)),
        }
    return out


class MiniProblem:
    """Fixed networks + inputs for the miniature configuration, with a
    double-precision shadow copy for the finite-difference side."""

    def __init__(self, precision: str = "double", gan_mode: str = "non_saturating"):
        self.precision = precision
        self.gan_mode = gan_mode
        self.nets = _mini_nets(precision)
        self.inputs = _mini_inputs(networks.torch_dtype(precision))
        self.inputs64 = _mini_inputs(torch.float64)
        self.params64 = {
            name: [p.detach().double() for p in net.params]
            for name, net in self.nets.items()
        }

    def loss_fn(self, name: str):
        """Composite scalar as a function of a {net_name: params} override map.

        With an empty override the stored parameters are used (analytic path);
        double-precision overrides pair with the double shadow inputs.
        """
        if name not in CHECK_NAMES:
            raise UsageError(f"unknown gradient check {name!r}; choose from {CHECK_NAMES}")

        def resolve(overrides, net_name, use64):
            if net_name in overrides:
                return overrides[net_name]
            if use64:
                return self.params64[net_name]
            return self.nets[net_name].params

        def fn(overrides: dict, use64: bool = False):
            inp = self.inputs64 if use64 else self.inputs
            ct, us = inp["ct"], inp["us"]
            nets = self.nets

            def gen(net_name, image, planes):
                return networks.generator_forward(
                    nets[net_name], image, planes, params=resolve(overrides, net_name, use64)
                )

            def disc(net_name, image):
                return networks.discriminator_forward(
                    nets[net_name], image, params=resolve(overrides, net_name, use64)
                )

            def seg(net_name, image):
                return networks.segmentor_forward(
                    nets[net_name], image, params=resolve(overrides, net_name, use64)
                )

            if name == "seg_loss":
                return losses.seg_loss(seg("seg_ct", ct["image"]), ct["mask"])
            if name == "adversarial_d":
                fake = gen("gen_ct2us", ct["image"], ct["onehot"])
                return losses.adversarial_d_loss(
                    disc("disc_us", us["image"]), disc("disc_us", fake), self.gan_mode
                )
            if name == "adversarial_g":
                fake = gen("gen_ct2us", ct["image"], ct["onehot"])
                return losses.adversarial_g_loss(disc("disc_us", fake), self.gan_mode)
            # generator_total: the full phase-1 objective.
            fake_us = gen("gen_ct2us", ct["image"], ct["onehot"])
            rec_ct = gen("gen_us2ct", fake_us, ct["onehot"])
            fake_ct = gen("gen_us2ct", us["image"], us["onehot"])
            rec_us = gen("gen_ct2us", fake_ct, us["onehot"])
            adv1 = losses.adversarial_g_loss(disc("disc_us", fake_us), self.gan_mode)
            adv2 = losses.adversarial_g_loss(disc("disc_ct", fake_ct), self.gan_mode)
            cyc = losses.cycle_loss(ct["image"], rec_ct, us["image"], rec_us)
            s_us = losses.seg_loss(seg("seg_us", fake_us), ct["mask"])
            s_ct = losses.seg_loss(seg("seg_ct", fake_ct), us["mask"])
            return losses.generator_total(adv1, adv2, cyc, s_ct, s_us)

        return fn

    def involved_nets(self, name: str) -> list[str]:
        return {
            "generator_total": list(self.nets.keys()),
            "seg_loss": ["seg_ct"],
            "adversarial_d": ["gen_ct2us", "disc_us"],
            "adversarial_g": ["gen_ct2us", "disc_us"],
        }[name]


def analytic_gradient(problem: MiniProblem, name: str) -> np.ndarray:
    """Autograd gradient w.r.t. every parameter of the involved networks."""
    involved = problem.involved_nets(name)
    leaves = []
    for net_name in involved:
        for p in problem.nets[net_name].params:
            p.requires_grad_(True)
            leaves.append(p)
    out = problem.loss_fn(name)({})
    grads = torch.autograd.grad(out, leaves, allow_unused=False)
    return np.concatenate([g.detach().contiguous().view(-1).double().numpy() for g in grads])


def fd_gradient(
    problem: MiniProblem, name: str, step: float = FD_STEP_DOUBLE, chunk: int = 256
) -> np.ndarray:
    """Central finite differences over every involved parameter, evaluated in
    double precision with vmapped probe ensembles."""
    fn = problem.loss_fn(name)
    involved = problem.involved_nets(name)
    pieces = []
    for net_name in involved:
        base_params = problem.params64[net_name]
        for ti, p in enumerate(base_params):
            flat = p.contiguous().view(-1)
            n = flat.numel()
            grad = torch.empty(n, dtype=torch.float64)

            def member(vec):
                sub = list(base_params)
                sub[ti] = vec.view(p.shape)
                return fn({net_name: sub}, use64=True)

            batched = torch.vmap(member)
            for s in range(0, n, chunk):
                k = min(chunk, n - s)
                probes = flat.unsqueeze(0).repeat(2 * k, 1)
                idx = torch.arange(k)
                probes[idx, s + idx] += step
                probes[k + idx, s + idx] -= step
                vals = batched(probes)
                grad[s : s + k] = (vals[:k] - vals[k:]) / (2.0 * step)
            pieces.append(grad.numpy())
    return np.concatenate(pieces)


def relative_error(analytic: np.ndarray, fd: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(fd)))
    return float(np.max(np.abs(analytic - fd) / denom))


def run_gradcheck(
    precision: str = "double",
    tolerance: float | None = None,
    names=CHECK_NAMES,
    step: float = FD_STEP_DOUBLE,
    chunk: int = 256,
) -> list[GradCheckResult]:
    """Run the requested checks; default tolerance 1e-5 double / 1e-3 single."""
    if tolerance is None:
        tolerance = 1e-5 if precision == "double" else 1e-3
    problem = MiniProblem(precision)
    results = []
    for name in names:
        an = analytic_gradient(problem, name)
        fd = fd_gradient(problem, name, step=step, chunk=chunk)
        if an.shape != fd.shape or not np.isfinite(an).all() or not np.isfinite(fd).all():
            raise UsageError(f"gradient check {name}: malformed gradients")
        results.append(
            GradCheckResult(
                name=name,
                n_params=int(an.size),
                max_rel_err=relative_error(an, fd),
                tolerance=tolerance,
            )
        )
    return results
