"""Retained post-burn-in chain states."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hier_model import CovarianceSpec, HierParams


@dataclass
class ChainTrace:
    """Thinned record of one chain.

    Array fields are indexed by retained iteration along axis 0. ``perm``
    holds the 0-based position of each segment and ``selected`` the 0-based
    realization index chosen for each segment.
    """

    kind: str
    iteration: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    perm: np.ndarray
    selected: np.ndarray
    sigma2: np.ndarray | None = None
    rho: np.ndarray | None = None
    cov: np.ndarray | None = None
    chain_id: int = 0
    info: dict = field(default_factory=dict, compare=False, repr=False)

    def __len__(self) -> int:
        return int(self.iteration.shape[0])

    @property
    def n_segments(self) -> int:
        return int(self.alpha.shape[1])

    @property
    def n_seasons(self) -> int:
        return int(self.beta.shape[1]) + 1

    def params_at(self, r: int) -> HierParams:
        spec = CovarianceSpec(
            kind=self.kind,
            sigma2=None if self.sigma2 is None else float(self.sigma2[r]),
            rho=None if self.rho is None else float(self.rho[r]),
            matrix=None if self.cov is None else self.cov[r].copy(),
        )
        return HierParams(
            alpha=self.alpha[r].copy(),
            beta=self.beta[r].copy(),
            gamma=self.gamma[r].copy(),
            cov=spec,
            perm=self.perm[r].copy(),
        )

    def continuous(self) -> dict[str, np.ndarray]:
        """Named scalar series for every continuous parameter."""
        out = {}
        for i in range(self.n_segments):
            out[f"alpha_{i + 1}"] = self.alpha[:, i]
        for j in range(self.beta.shape[1]):
            out[f"beta_{j + 1}"] = self.beta[:, j]
        if self.sigma2 is not None:
            out["sigma2"] = self.sigma2
        if self.rho is not None:
            out["rho"] = self.rho
        if self.cov is not None:
            n = self.n_segments
            for a in range(n):
                for b in range(a, n):
                    out[f"sigma_{a + 1}_{b + 1}"] = self.cov[:, a, b]
        return out

    def equals(self, other: "ChainTrace") -> bool:
        if self.kind != other.kind or len(self) != len(other):
            return False
        for name in ("iteration", "alpha", "beta", "gamma", "perm", "selected",
                     "sigma2", "rho", "cov"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True


def concat(traces: list[ChainTrace]) -> ChainTrace:
    """Pool several chains into one trace (chain id of the first)."""
    if not traces:
        raise ValueError("no traces to pool")

    def cat(name):
        parts = [getattr(t, name) for t in traces]
        return None if parts[0] is None else np.concatenate(parts, axis=0)

    return ChainTrace(
        kind=traces[0].kind,
        iteration=cat("iteration"),
        alpha=cat("alpha"),
        beta=cat("beta"),
        gamma=cat("gamma"),
        perm=cat("perm"),
        selected=cat("selected"),
        sigma2=cat("sigma2"),
        rho=cat("rho"),
        cov=cat("cov"),
        chain_id=traces[0].chain_id,
    )
