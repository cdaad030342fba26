"""Adam with per-group learning rates, operating in place on numpy arrays."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, lrs: dict[str, float], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.lrs = dict(lrs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lrs[name] * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def remap_rows(self, source: np.ndarray, fresh: np.ndarray | None = None) -> None:
        """Reindex moments after Gaussians are cloned, split or pruned.

        Row ``i`` of the new state copies row ``source[i]``; rows flagged in
        ``fresh`` start from zero.
        """
        for store in (self.m, self.v):
            for name, arr in store.items():
                new = arr[source].copy()
                if fresh is not None:
                    new[fresh] = 0.0
                store[name] = new

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}step": np.array([self.step_count], dtype=np.int64)}
        for name in sorted(self.m):
            out[f"{prefix}m/{name}"] = self.m[name]
            out[f"{prefix}v/{name}"] = self.v[name]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        self.step_count = int(state[f"{prefix}step"][0])
        self.m, self.v = {}, {}
        for key, arr in state.items():
            if not key.startswith(prefix):
                continue
            rest = key[len(prefix):]
            if rest.startswith("m/"):
                self.m[rest[2:]] = np.array(arr, dtype=np.float64)
            elif rest.startswith("v/"):
                self.v[rest[2:]] = np.array(arr, dtype=np.float64)
