"""Low-rank adapters on frozen denoiser weights, in two named branches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensorcore as tc
from .errors import PhyCustomError
from .tensorcore import ParamStore, Tensor

BRANCHES = ("object", "physics")
INIT_STD = 0.02


class LoraError(PhyCustomError):
    code = "E_LORA"


@dataclass(frozen=True)
class LoraAdapter:
    host: str
    branch: str
    rank: int

    @property
    def a_name(self) -> str:
        return f"lora.{self.branch}.{self.host}.A"

    @property
    def b_name(self) -> str:
        return f"lora.{self.branch}.{self.host}.B"


@dataclass(frozen=True)
class LoraSet:
    branch: str
    adapters: tuple[LoraAdapter, ...]

    @property
    def hosts(self) -> list[str]:
        return [a.host for a in self.adapters]

    @property
    def param_names(self) -> list[str]:
        return sorted(n for a in self.adapters for n in (a.a_name, a.b_name))


def default_hosts(params: Mapping[str, Tensor]) -> list[str]:
    """Cross-attention Q/K/V/O and both MLP linears of every denoiser block."""
    suffixes = (".cross.q", ".cross.k", ".cross.v", ".cross.o", ".mlp.fc1.weight", ".mlp.fc2.weight")
    return sorted(n for n in params if n.startswith("den.block") and n.endswith(suffixes))


def attach(params: ParamStore, hosts: Sequence[str], rank: int, branch: str, seed: int) -> LoraSet:
    """Register one branch of adapters in ``params`` and freeze every base weight.

    B starts at zero, so the merged weight equals the host weight bit for bit.
    A is drawn per host from ``(seed, host index)``.
    """
    if branch not in BRANCHES:
        raise LoraError(f"unknown LoRA branch {branch!r}")
    adapters = []
    for i, host in enumerate(sorted(hosts)):
        if host not in params:
            raise LoraError(f"unknown LoRA host {host!r}")
        w = params[host]
        if w.ndim != 2:
            raise LoraError(f"LoRA host {host!r} is not a matrix (shape {w.shape})")
        n, m = w.shape
        r = min(rank, n, m)
        adapter = LoraAdapter(host, branch, r)
        rng = np.random.default_rng([seed, i])
        params[adapter.a_name] = tc.tensor(rng.normal(0.0, INIT_STD, size=(r, m)), requires_grad=True)
        params[adapter.b_name] = tc.tensor(np.zeros((n, r)), requires_grad=True)
        adapters.append(adapter)
    for name in params:
        if not name.startswith("lora."):
            params[name].requires_grad = False
    return LoraSet(branch, tuple(adapters))


def attached_branches(params: Mapping[str, Tensor]) -> set[str]:
    return {n.split(".")[1] for n in params if n.startswith("lora.")}


def set_active(selector: Iterable[str], params: Mapping[str, Tensor] | None = None) -> frozenset[str]:
    """Validate a branch selector; ``params`` restricts it to attached branches."""
    active = frozenset(selector)
    allowed = set(BRANCHES) if params is None else attached_branches(params)
    unknown = active - allowed
    if unknown:
        raise LoraError(f"unknown LoRA branch(es): {sorted(unknown)}")
    return active


def merged_weight(w: Tensor, pairs: Sequence[tuple[Tensor, Tensor]], weights: Sequence[float]) -> Tensor:
    """W + sum_i w_i * B_i @ A_i."""
    if len(pairs) != len(weights):
        raise LoraError("one merge weight per adapter is required")
    out = w
    for (b, a), wi in zip(pairs, weights):
        if b.shape[0] != w.shape[0] or a.shape[1] != w.shape[1] or b.shape[1] != a.shape[0]:
            raise tc.ShapeError(f"adapter {b.shape}x{a.shape} does not fit host {w.shape}")
        delta = b @ a
        out = out + (delta if wi == 1.0 else tc.scale(delta, wi))
    return out


def effective_weight(params: Mapping[str, Tensor], host: str, active: frozenset[str]) -> Tensor:
    w = params[host]
    pairs = []
    for branch in BRANCHES:
        if branch in active:
            b_name, a_name = f"lora.{branch}.{host}.B", f"lora.{branch}.{host}.A"
            if b_name in params:
                pairs.append((params[b_name], params[a_name]))
    if not pairs:
        return w
    return merged_weight(w, pairs, [1.0] * len(pairs))


def branch_params(params: ParamStore, branch: str) -> ParamStore:
    if branch not in BRANCHES:
        raise LoraError(f"unknown LoRA branch {branch!r}")
    return params.with_prefix(f"lora.{branch}.")


def branch_grads(loss: Tensor, params: ParamStore, branch: str, create_graph: bool = False):
    """Backward restricted to one branch.

    Returns ``(flat, grad_map)``; the map keeps graph-recorded values when
    ``create_graph`` is set.
    """
    store = branch_params(params, branch)
    if len(store) == 0:
        raise LoraError(f"branch {branch!r} has no parameters")
    grads = tc.backward(loss, store, create_graph=create_graph)
    return tc.flatten_grads(grads, store), grads
