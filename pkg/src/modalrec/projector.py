"""Mixture-of-experts content projectors.

Each modality has its own projector mapping raw feature vectors of width
``d_in`` to the model width ``d_out``.  Every expert is a parametric
whitening map ``(e - b) @ W``; a softmax router weights the experts, and
the router reads the raw feature itself, not any whitened version of it.
A projector can also be built "plain": a single linear map with the shift
fixed at zero and no router, which is the degraded form used by ablations.

Items missing a modality project to the zero vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import MODALITIES, StoreSet
from .errors import ConfigError, ShapeError

INIT_STD = 0.02


@dataclass
class WhiteningExpert:
    """One whitening map: learned shift ``b`` then linear map ``W``."""

    w: Tensor  # (d_in, d_out)
    b: Tensor  # (d_in,)


@dataclass
class MoEProjector:
    modality: str
    experts: list[WhiteningExpert]
    router_w: Tensor | None  # (d_in, n_experts); None when plain
    router_b: Tensor | None  # (n_experts,)
    plain: bool = False

    @property
    def d_in(self) -> int:
        return self.experts[0].w.shape[0]

    @property
    def d_out(self) -> int:
        return self.experts[0].w.shape[1]

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for k, expert in enumerate(self.experts):
            out[f"{prefix}.expert{k}.w"] = expert.w
            if not self.plain:
                out[f"{prefix}.expert{k}.b"] = expert.b
        if not self.plain:
            out[f"{prefix}.router_w"] = self.router_w
            out[f"{prefix}.router_b"] = self.router_b
        return out


def init_projector(rng: np.random.Generator, modality: str, d_in: int,
                   d_out: int, n_experts: int, plain: bool = False
                   ) -> MoEProjector:
    """Weights ~ N(0, 0.02); shifts and router bias start at zero.

    Plain projectors keep exactly one expert whose shift is frozen at zero.
    """
    if modality not in MODALITIES:
        raise ConfigError(f"unknown modality {modality!r}")
    if d_in < 1 or d_out < 1:
        raise ConfigError(f"projector dims must be positive, got {d_in}->{d_out}")
    if plain:
        expert = WhiteningExpert(
            w=Tensor(rng.normal(0.0, INIT_STD, (d_in, d_out)), requires_grad=True),
            b=Tensor(np.zeros(d_in), requires_grad=False))
        return MoEProjector(modality=modality, experts=[expert],
                            router_w=None, router_b=None, plain=True)
    if n_experts < 1:
        raise ConfigError(f"need at least one expert, got {n_experts}")
    experts = [WhiteningExpert(
        w=Tensor(rng.normal(0.0, INIT_STD, (d_in, d_out)), requires_grad=True),
        b=Tensor(np.zeros(d_in), requires_grad=True))
        for _ in range(n_experts)]
    router_w = Tensor(rng.normal(0.0, INIT_STD, (d_in, n_experts)),
                      requires_grad=True)
    router_b = Tensor(np.zeros(n_experts), requires_grad=True)
    return MoEProjector(modality=modality, experts=experts,
                        router_w=router_w, router_b=router_b)


def _as_rows(e) -> tuple[Tensor, bool]:
    t = e if isinstance(e, Tensor) else Tensor(e)
    if t.ndim == 1:
        return ad.reshape(t, (1, t.shape[0])), True
    if t.ndim == 2:
        return t, False
    raise ShapeError(f"expected a feature vector or row matrix, got {t.shape}")


def whiten(e, expert: WhiteningExpert) -> Tensor:
    """Shift-then-project: ``(e - b) @ W`` for one row or a row matrix."""
    rows, squeeze = _as_rows(e)
    if rows.shape[1] != expert.w.shape[0]:
        raise ShapeError(f"feature width {rows.shape[1]} != expert input "
                         f"width {expert.w.shape[0]}")
    out = ad.matmul(ad.sub(rows, expert.b), expert.w)
    return ad.reshape(out, (out.shape[1],)) if squeeze else out


def route(e, projector: MoEProjector) -> Tensor:
    """Expert weights from the raw feature: softmax(e @ Wr + br)."""
    if projector.plain:
        raise ConfigError("plain projector has no router")
    rows, squeeze = _as_rows(e)
    if rows.shape[1] != projector.d_in:
        raise ShapeError(f"feature width {rows.shape[1]} != router input "
                         f"width {projector.d_in}")
    gates = ad.softmax(ad.add(ad.matmul(rows, projector.router_w),
                              projector.router_b), axis=-1)
    return ad.reshape(gates, (gates.shape[1],)) if squeeze else gates


def moe_project(e, projector: MoEProjector) -> Tensor:
    """Router-weighted sum of expert whitenings of the raw feature."""
    rows, squeeze = _as_rows(e)
    if projector.plain:
        out = whiten(rows, projector.experts[0])
    else:
        gates = route(rows, projector)  # (n, G)
        n = rows.shape[0]
        stacked = ad.concat([ad.reshape(whiten(rows, ex), (1, n, projector.d_out))
                             for ex in projector.experts], axis=0)  # (G, n, d)
        weights = ad.reshape(ad.swapaxes(gates, 0, 1), (projector.n_experts, n, 1))
        out = ad.sum_(ad.mul(weights, stacked), axis=0)
    return ad.reshape(out, (out.shape[1],)) if squeeze else out


@dataclass(frozen=True)
class ProjectedItem:
    """Projected content for one item, one slot per modality; a missing
    modality yields a zero vector and a flag."""

    text: np.ndarray
    image: np.ndarray
    cross: np.ndarray
    missing: frozenset[str]

    def by_modality(self, modality: str) -> np.ndarray:
        return getattr(self, modality)


def project_item(item: str, stores: StoreSet,
                 projectors: dict[str, MoEProjector]) -> ProjectedItem:
    """Project one item's raw features through all three projectors.

    The router is never consulted for a missing modality; its slot is a
    zero vector of the projector's output width.
    """
    parts: dict[str, np.ndarray] = {}
    missing: set[str] = set()
    for modality in MODALITIES:
        raw = stores.by_modality(modality).get(item)
        projector = projectors[modality]
        if raw is None:
            missing.add(modality)
            parts[modality] = np.zeros(projector.d_out)
        else:
            parts[modality] = moe_project(raw, projector).data
    return ProjectedItem(text=parts["text"], image=parts["image"],
                         cross=parts["cross"], missing=frozenset(missing))
