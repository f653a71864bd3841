"""Adam optimizer over named tape parameters, with serializable state."""

import numpy as np


class Adam:
    """Adam with per-parameter learning rates.

    `params` is a list of (name, Value, lr) triples; names must be unique
    and are the keys under which first/second moments serialize, so a
    checkpointed run resumes with bit-identical updates.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        names = [n for n, _, _ in params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.params = [(n, v, float(lr)) for n, v, lr in params]
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {n: np.zeros_like(v.data) for n, v, _ in self.params}
        self.v = {n: np.zeros_like(v.data) for n, v, _ in self.params}

    def step(self):
        """Apply one update from the gradients currently on the parameters."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p, lr in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for _, p, _ in self.params:
            p.zero_grad()

    def state(self) -> dict:
        return {
            "t": self.t,
            "m": {n: a.copy() for n, a in self.m.items()},
            "v": {n: a.copy() for n, a in self.v.items()},
        }

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for n, a in state["m"].items():
            self.m[n][...] = a
        for n, a in state["v"].items():
            self.v[n][...] = a
