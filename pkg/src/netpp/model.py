"""Trainable model variants and the model file.

Three variants share one interface:

``gat``
    alpha from one attention layer times free strengths.
``free``
    alpha = exp(rho) with every entry free (attention ablation).
``etas``
    planar diffusion-kernel baseline.

Trainable parameters live in a flat dict of arrays so that the optimiser is
variant-agnostic.  Positive scalars are stored as logs.
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np

from .attention import (AttentionParams, ablation_alpha, ablation_backward, attention_backward,
                        attention_forward, init_attention, init_strength)
from .errors import StructuralError
from .intensity import EtasState, HawkesState, etas_loglik, hawkes_loglik
from .zoning import DEFAULT_MARKS, MarkSpace

KINDS = ("gat", "free", "etas")
MODEL_HEADER = "NETPP-MODEL v1"


class Model:
    """A parameterised intensity with fixed base rates ``mu``."""

    def __init__(self, kind, params, mu, marks=DEFAULT_MARKS, slope=0.2, mass_mode="full",
                 eps=1e-8, meta=None):
        if kind not in KINDS:
            raise StructuralError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.params = {k: np.array(v, dtype=float) for k, v in params.items()}
        self.mu = np.array(mu, dtype=float)
        self.marks = marks
        self.slope = float(slope)
        self.mass_mode = mass_mode
        self.eps = float(eps)
        self.meta = dict(meta or {})
        self._X = marks.features()

    # -- construction

    @classmethod
    def initial(cls, kind, mu, rng=None, heads=8, hidden=8, slope=0.2, beta=1.0, sigma=1.0,
                row_total=0.5, marks=DEFAULT_MARKS, **kw):
        rng = np.random.default_rng(rng)
        n = marks.n_marks
        p = {"log_beta": np.array(math.log(beta))}
        if kind == "gat":
            att = init_attention(heads, marks.dim, hidden, rng, slope)
            p.update(W=att.W, b=att.b, rho=init_strength(n, row_total))
        elif kind == "free":
            p["rho"] = np.full((n, n), math.log(row_total / n))
        elif kind == "etas":
            p["log_eta"] = np.full((n, n), math.log(row_total / n))
            p["log_sigma_x"] = np.array(math.log(sigma))
            p["log_sigma_y"] = np.array(math.log(sigma))
        else:
            raise StructuralError(f"unknown model kind {kind!r}")
        if kind != "etas":
            p["log_sigma"] = np.array(math.log(sigma))
        return cls(kind, p, mu, marks, slope, **kw)

    def copy(self):
        return Model(self.kind, {k: v.copy() for k, v in self.params.items()}, self.mu.copy(),
                     self.marks, self.slope, self.mass_mode, self.eps, dict(self.meta))

    # -- derived quantities

    @property
    def beta(self):
        return float(np.exp(self.params["log_beta"]))

    @property
    def sigma(self):
        return float(np.exp(self.params["log_sigma"])) if "log_sigma" in self.params else float("nan")

    def attention(self):
        return AttentionParams(self.params["W"], self.params["b"], self.slope)

    def alpha(self):
        """Mark coefficients (``eta`` for the baseline)."""
        if self.kind == "gat":
            return np.exp(self.params["rho"]) * attention_forward(self._X, self.attention())
        if self.kind == "free":
            return ablation_alpha(self.params["rho"])
        return np.exp(self.params["log_eta"])

    def state(self, alpha=None):
        alpha = self.alpha() if alpha is None else alpha
        if self.kind == "etas":
            return EtasState(self.mu, alpha, self.beta, float(np.exp(self.params["log_sigma_x"])),
                             float(np.exp(self.params["log_sigma_y"])), self.marks)
        return HawkesState(self.mu, alpha, self.beta, self.sigma, self.mass_mode, self.eps, self.marks)

    def compensator_state(self, alpha=None):
        """State whose ``alpha`` is the expected offspring count per source.

        For the diffusion baseline the kernel's total mass is ``eta / beta``
        and its spatial mass covers the plane, so the full mass mode applies.
        """
        if self.kind != "etas":
            return self.state(alpha)
        eta = self.alpha() if alpha is None else alpha
        return HawkesState(self.mu, eta / self.beta, self.beta, 1.0, "full", 0.0, self.marks)

    def n_trainable(self):
        """Number of trained scalars (``mu`` is closed-form and excluded)."""
        return int(sum(v.size for v in self.params.values()))

    # -- likelihood

    def loglik(self, seq, need_grad=True, alpha=None):
        """Log-likelihood of a prepared sequence and its gradient w.r.t. ``params``."""
        if self.kind == "etas":
            L, g = etas_loglik(seq, self.state(alpha), need_grad)
            if not need_grad:
                return L, None
            eta = self.state(alpha).eta
            return L, {"log_eta": g["eta"] * eta, "log_beta": np.array(g["log_beta"]),
                       "log_sigma_x": np.array(g["log_sigma_x"]),
                       "log_sigma_y": np.array(g["log_sigma_y"])}
        cache = None
        if alpha is None and self.kind == "gat":
            p, cache = attention_forward(self._X, self.attention(), return_cache=True)
            alpha = np.exp(self.params["rho"]) * p
        L, g = hawkes_loglik(seq, self.state(alpha), need_grad)
        if not need_grad:
            return L, None
        out = {"log_beta": np.array(g["log_beta"]), "log_sigma": np.array(g["log_sigma"])}
        if self.kind == "gat":
            out.update(attention_backward(self._X, self.attention(), self.params["rho"], g["alpha"], cache))
        else:
            out.update(ablation_backward(self.params["rho"], g["alpha"]))
        return L, out

    # -- serialisation

    def to_dict(self):
        return {
            "kind": self.kind,
            "n_crime": self.marks.n_crime,
            "n_landmark": self.marks.n_landmark,
            "slope": self.slope,
            "mass_mode": self.mass_mode,
            "eps": self.eps,
            "mu": self.mu.tolist(),
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                       for k, v in self.params.items()},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            marks = MarkSpace(int(d["n_crime"]), int(d["n_landmark"]))
            params = {k: np.array(v["data"], dtype=float).reshape(v["shape"])
                      for k, v in d["params"].items()}
            return cls(d["kind"], params, d["mu"], marks, d["slope"], d["mass_mode"], d["eps"],
                       d.get("meta"))
        except (KeyError, TypeError, ValueError) as exc:
            raise StructuralError(f"malformed model description: {exc}") from exc


def config_digest(config_dict):
    blob = json.dumps(config_dict, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def save_model(model, path):
    """Header line then JSON; floats are written with full round-trip precision."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(MODEL_HEADER + "\n")
        json.dump(model.to_dict(), fh, indent=1)
        fh.write("\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != MODEL_HEADER:
            raise StructuralError(f"{path}: not a model file (header {header!r})")
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise StructuralError(f"{path}: {exc}") from exc
    return Model.from_dict(d)
