"""Convex combination of smoothing filters with trainable coefficients.

Four member filters of equal size (average, gaussian, learned, identity)
are blended with softmax weights over free logits, so the realized kernel
stays on the simplex by construction through any sequence of gradient
updates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sdconv.autodiff import Node, Tape
from sdconv.conv import SmoothingFilter, build_smoothing_filter
from sdconv.errors import ParameterError
from sdconv.tensor import Rng, Tensor

MEMBER_ORDER = ("average", "gaussian", "learned", "none")

TRAJECTORY_HEADER = "step,alpha_ave,alpha_gauss,alpha_learned,alpha_none"


@dataclass
class AlphaTrajectory:
    """Ordered (step, alpha) samples of the softmax coefficients."""

    samples: list[tuple[int, np.ndarray]] = field(default_factory=list)

    def append(self, step: int, alphas: np.ndarray) -> None:
        if step < 0:
            raise ParameterError(f"trajectory step must be >= 0, got {step}")
        if self.samples and step <= self.samples[-1][0]:
            raise ParameterError(
                f"trajectory steps must increase: {step} after {self.samples[-1][0]}"
            )
        self.samples.append((int(step), np.asarray(alphas, dtype=np.float64).copy()))

    def __len__(self) -> int:
        return len(self.samples)

    def to_csv(self) -> str:
        lines = [TRAJECTORY_HEADER]
        for step, a in self.samples:
            lines.append(f"{step},{a[0]!r},{a[1]!r},{a[2]!r},{a[3]!r}")
        return "\n".join(lines) + "\n"


def mean_trajectory(trajectories: list[AlphaTrajectory]) -> AlphaTrajectory:
    """Across-layer mean at each recorded step (all layers share steps)."""
    out = AlphaTrajectory()
    if not trajectories:
        return out
    for i, (step, _) in enumerate(trajectories[0].samples):
        stacked = np.stack([t.samples[i][1] for t in trajectories])
        out.append(step, stacked.mean(axis=0))
    return out


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


class AggregatedFilter:
    """Simplex-weighted blend of the four member smoothing filters.

    ``logits`` (free, trainable) and ``learned_member_weights`` are stored
    as tensors so an optimizer can update them in place; fixed members keep
    their construction-time kernels.
    """

    def __init__(
        self,
        size: int,
        logits: Tensor,
        fixed_members: dict[str, SmoothingFilter],
        learned_member_weights: Tensor,
    ):
        self.size = size
        self.logits = logits  # (1, 1, 1, 4), order per MEMBER_ORDER
        self.fixed_members = fixed_members
        self.learned_member_weights = learned_member_weights  # (1, 1, s, s)

    def alphas(self) -> np.ndarray:
        """Current softmax coefficients (ave, gauss, learned, none)."""
        return _softmax(self.logits.data.ravel())

    def member_kernels(self) -> list[np.ndarray]:
        """Realized member kernels in MEMBER_ORDER."""
        return [
            self.fixed_members["average"].weights,
            self.fixed_members["gaussian"].weights,
            self.learned_member_weights.data[0, 0],
            self.fixed_members["none"].weights,
        ]

    def realize(self) -> SmoothingFilter:
        """Alpha-weighted sum of the member kernels."""
        a = self.alphas()
        kernel = np.zeros((self.size, self.size), dtype=np.float64)
        for ai, mk in zip(a, self.member_kernels()):
            kernel += ai * mk
        return SmoothingFilter(
            kind="aggregated", size=self.size, weights=kernel, trainable=True
        )

    def realize_on_tape(
        self, tape: Tape, name_prefix: str = "agg"
    ) -> tuple[Node, dict[str, Node]]:
        """Record the realization so gradients reach logits and learned weights."""
        logits_node = tape.leaf(
            self.logits, trainable=True, name=f"{name_prefix}.logits"
        )
        learned_node = tape.leaf(
            self.learned_member_weights,
            trainable=True,
            name=f"{name_prefix}.learned",
        )
        members: list[Node] = []
        for kind in MEMBER_ORDER:
            if kind == "learned":
                members.append(learned_node)
            else:
                w2d = self.fixed_members[kind].weights
                members.append(tape.leaf(Tensor(w2d[None, None])))
        alphas = tape.softmax(logits_node)
        kernel = tape.combine(alphas, members)
        return kernel, {"logits": logits_node, "learned": learned_node}


def new_aggregated(r: int, sigma: float, rng: Rng) -> AggregatedFilter:
    """Aggregate with uniform initial coefficients (equal logits)."""
    if r < 1 or r % 2 == 0:
        raise ParameterError(f"aggregation requires odd dilation rate, got r={r}")
    fixed = {
        "average": build_smoothing_filter("average", r),
        "gaussian": build_smoothing_filter("gaussian", r, sigma=sigma),
        "none": build_smoothing_filter("none", r),
    }
    learned = build_smoothing_filter("learned", r, rng=rng)
    return AggregatedFilter(
        size=r,
        logits=Tensor(np.zeros((1, 1, 1, 4))),
        fixed_members=fixed,
        learned_member_weights=Tensor(learned.weights[None, None].copy()),
    )


def realize(agg: AggregatedFilter) -> SmoothingFilter:
    return agg.realize()


def record_alphas(
    agg: AggregatedFilter, step: int, traj: AlphaTrajectory
) -> AlphaTrajectory:
    """Append the current coefficients at a strictly increasing step."""
    traj.append(step, agg.alphas())
    return traj
