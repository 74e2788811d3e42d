"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .tensor import Parameter, Tape, Tensor, get_dtype


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    coords: int
    skipped: bool = False


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        errs = [e.max_rel_error for e in self.entries if not e.skipped]
        return max(errs) if errs else 0.0

    def by_group(self, group_of: Callable[[str], str]) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in self.entries:
            if e.skipped:
                continue
            g = group_of(e.name)
            out[g] = max(out.get(g, 0.0), e.max_rel_error)
        return out


def relative_error(analytic: float, numeric: float, floor: float = 1e-10) -> float:
    """|a - n| / max(|a|, |n|), with ``floor`` guarding the 0/0 case."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _name(t: Tensor, i: int) -> str:
    return getattr(t, "name", None) or f"input{i}"


def central_difference(f: Callable[[], Tensor], p: Tensor, idx: tuple, steps: Sequence[float],
                       agree: float = 1e-6, floor: float = 1e-10) -> float:
    """Central-difference derivative of ``f`` along one entry of ``p``.

    With several ``steps`` (decreasing), estimates are computed in turn until
    two consecutive ones agree to ``agree`` relative; the larger-step member
    of that pair is returned. Otherwise the most consistent pair wins. This
    sidesteps ReLU/max-pool kinks that a large step straddles, without ever
    consulting the analytic gradient.
    """
    orig = p.data[idx].copy()
    est: list[float] = []
    try:
        for h in steps:
            p.data[idx] = orig + h
            fp = float(f().data)
            p.data[idx] = orig - h
            fm = float(f().data)
            p.data[idx] = orig
            est.append((fp - fm) / (2 * h))
            if len(est) >= 2 and relative_error(est[-2], est[-1], floor) <= agree:
                return est[-2]
    finally:
        p.data[idx] = orig
    if len(est) == 1:
        return est[0]
    k = min(range(len(est) - 1), key=lambda i: abs(est[i] - est[i + 1]))
    return est[k]


def gradcheck_report(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                     coords: int | None = None, rng: np.random.Generator | None = None,
                     floor: float = 1e-10, indices: dict[int, Iterable[tuple]] | None = None,
                     steps: Sequence[float] | None = None) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    ``coords`` limits checking to that many randomly sampled entries per
    tensor (all entries when None). Frozen parameters are skipped and left
    untouched. Perturbed entries are restored bit-for-bit. ``steps`` enables
    the step ladder of :func:`central_difference` (default: the single ``h``).
    """
    steps = (h,) if steps is None else tuple(steps)
    if get_dtype() != np.float64:
        raise RuntimeError("gradcheck needs 64-bit precision; wrap the call in precision(np.float64)")
    rng = rng if rng is not None else np.random.default_rng(0)
    active = [p for p in params if not (isinstance(p, Parameter) and p.frozen)]

    for p in active:
        if isinstance(p, Parameter):
            p.zero_grad()
        else:
            p.grad = None
    with Tape() as tape:
        loss = f()
    tape.backward(loss)

    report = GradCheckReport()
    for i, p in enumerate(params):
        if isinstance(p, Parameter) and p.frozen:
            report.entries.append(GradCheckEntry(_name(p, i), 0.0, 0, skipped=True))
            continue
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        if indices is not None and i in indices:
            idxs = list(indices[i])
        elif coords is None or coords >= p.data.size:
            idxs = list(np.ndindex(*p.data.shape))
        else:
            flat = rng.choice(p.data.size, size=coords, replace=False)
            idxs = [np.unravel_index(k, p.data.shape) for k in flat]
        worst = 0.0
        for idx in idxs:
            numeric = central_difference(f, p, idx, steps, floor=floor)
            worst = max(worst, relative_error(float(analytic[idx]), numeric, floor))
        report.entries.append(GradCheckEntry(_name(p, i), worst, len(idxs)))
    return report


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               coords: int | None = None, rng: np.random.Generator | None = None,
               floor: float = 1e-10) -> float:
    """Maximum relative error between tape and finite-difference gradients."""
    return gradcheck_report(f, params, h=h, coords=coords, rng=rng, floor=floor).max_rel_error


@dataclass
class ModelGradCheck:
    groups: dict[str, float]
    coords: dict[str, int]
    loss: float

    @property
    def max_rel_error(self) -> float:
        return max(self.groups.values()) if self.groups else 0.0


FD_STEPS = (1e-5, 1e-6, 1e-7, 1e-8)


def model_gradcheck(cfg, seed: int = 0, coords: int = 20, batch: int = 4,
                    steps: Sequence[float] = FD_STEPS, floor: float = 1e-5) -> ModelGradCheck:
    """Check the joint training loss of a freshly initialized model.

    Runs in 64-bit with dropout disabled and batch norm in training mode.
    ``coords`` entries are sampled per parameter group (first dotted
    component of the parameter name), uniformly over the group's entries.

    A batch of 2 would make every batch-normalized feature nearly +-1
    whatever the input, starving upstream layers of gradient, hence the
    default of 4. ``floor`` bounds the relative-error denominator: a
    gradient below it must match to ``tol * floor`` absolute, which is
    where central differences on an O(1) loss stop resolving anything
    (conv biases feeding batch norm have an exactly zero gradient).
    """
    from . import ops
    from .model import MuDeep, parameter_group
    from .tensor import precision
    from .training import TrainConfig

    with precision(np.float64):
        cfg = cfg.replace(dropout=0.0)
        model = MuDeep(cfg, seed=seed)
        rng = np.random.default_rng([seed, 0x6C])
        xa = rng.normal(size=(batch, *cfg.input_shape))
        xb = rng.normal(size=(batch, *cfg.input_shape))
        same = np.arange(batch) % 2
        w = TrainConfig()
        use_cls = model.classifier is not None
        if use_cls:
            la = rng.integers(cfg.num_identities, size=batch)
            lb = rng.integers(cfg.num_identities, size=batch)

        def loss() -> Tensor:
            out = model.forward_pair(xa, xb, training=True, with_cls=use_cls)
            l_ver = ops.softmax_cross_entropy(out.ver_logits, same)
            if not use_cls:
                return l_ver
            l_cls = ops.add(ops.softmax_cross_entropy(out.cls_a, la), ops.softmax_cross_entropy(out.cls_b, lb))
            return ops.add(ops.mul(l_cls, w.cls_loss_weight), ops.mul(l_ver, w.ver_loss_weight))

        params = model.parameters()
        by_group: dict[str, list[int]] = {}
        for i, p in enumerate(params):
            by_group.setdefault(parameter_group(p.name), []).append(i)
        indices: dict[int, list[tuple]] = {}
        counts: dict[str, int] = {}
        for g, members in by_group.items():
            sizes = np.array([params[i].size for i in members])
            total = int(sizes.sum())
            picks = rng.choice(total, size=min(coords, total), replace=False)
            offsets = np.concatenate([[0], np.cumsum(sizes)])
            for k in np.sort(picks):
                j = int(np.searchsorted(offsets, k, side="right") - 1)
                i = members[j]
                indices.setdefault(i, []).append(np.unravel_index(int(k - offsets[j]), params[i].shape))
            counts[g] = len(picks)
        checked = [params[i] for i in sorted(indices)]
        remap = {n: indices[i] for n, i in enumerate(sorted(indices))}
        report = gradcheck_report(loss, checked, floor=floor, indices=remap, steps=steps)
        value = float(loss().data)
    return ModelGradCheck(report.by_group(parameter_group), counts, value)
