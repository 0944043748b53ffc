"""Left-to-right HMMs with diagonal-covariance GMM state emissions."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from ..errors import FormatError, InputError

LOG_2PI = np.log(2.0 * np.pi)
AHMM_MAGIC = b"AHMM"
AHMM_VERSION = 1


@dataclass
class GmmHmm:
    """One unit model. ``log_trans[s] = (log p(stay), log p(advance))``."""

    label: str
    means: np.ndarray  # (S, K, D)
    variances: np.ndarray  # (S, K, D)
    log_weights: np.ndarray  # (S, K)
    log_trans: np.ndarray  # (S, 2)

    @property
    def n_states(self) -> int:
        return self.means.shape[0]

    @property
    def n_mix(self) -> int:
        return self.means.shape[1]

    @property
    def dim(self) -> int:
        return self.means.shape[2]

    def copy(self) -> "GmmHmm":
        return GmmHmm(self.label, self.means.copy(), self.variances.copy(),
                      self.log_weights.copy(), self.log_trans.copy())

    def component_log_likelihood(self, x: np.ndarray) -> np.ndarray:
        """``log w_k + log N(x_t; mu_sk, var_sk)`` for every frame, state and component: (N, S, K)."""
        x = np.atleast_2d(x)
        s, k, d = self.means.shape
        prec = 1.0 / self.variances.reshape(s * k, d)
        mu = self.means.reshape(s * k, d)
        quad = (x * x) @ prec.T - 2.0 * x @ (mu * prec).T + np.sum(mu * mu * prec, axis=1)
        const = -0.5 * (d * LOG_2PI + np.sum(np.log(self.variances.reshape(s * k, d)), axis=1))
        ll = const - 0.5 * quad + self.log_weights.reshape(s * k)
        return ll.reshape(x.shape[0], s, k)

    def log_emission(self, x: np.ndarray) -> np.ndarray:
        """Per-state GMM log density, shape (N, S)."""
        return logsumexp(self.component_log_likelihood(x), axis=2)

    def check(self, var_floor=None) -> None:
        w = np.exp(self.log_weights).sum(axis=1)
        if not np.allclose(w, 1.0, atol=1e-9):
            raise InputError(f"{self.label}: mixture weights do not sum to 1")
        t = np.exp(self.log_trans).sum(axis=1)
        if not np.allclose(t, 1.0, atol=1e-9):
            raise InputError(f"{self.label}: transition probabilities do not sum to 1")
        floor = 0.0 if var_floor is None else var_floor
        if np.any(self.variances < np.asarray(floor) * (1 - 1e-12)) or np.any(self.variances <= 0):
            raise InputError(f"{self.label}: variance below floor")


@dataclass
class GmmHmmSet:
    models: dict[str, GmmHmm]
    var_floor: np.ndarray
    fingerprint: str = ""
    log_likelihoods: list[float] = field(default_factory=list, compare=False)

    def __getitem__(self, label) -> GmmHmm:
        return self.models[str(getattr(label, "value", label))]

    def __contains__(self, label) -> bool:
        return str(getattr(label, "value", label)) in self.models

    @property
    def labels(self) -> list[str]:
        return list(self.models)

    @property
    def dim(self) -> int:
        return next(iter(self.models.values())).dim

    def copy(self) -> "GmmHmmSet":
        return GmmHmmSet({k: m.copy() for k, m in self.models.items()}, self.var_floor.copy(),
                         self.fingerprint)

    def check(self) -> None:
        for m in self.models.values():
            m.check(self.var_floor)

    # ------------------------------------------------------------ persistence

    def save(self, path, meta: dict | None = None) -> None:
        labels = sorted(self.models)
        header = {
            "labels": labels,
            "shapes": {lab: list(self.models[lab].means.shape) for lab in labels},
            "fingerprint": self.fingerprint,
            "meta": meta or {},
        }
        blob = json.dumps(header, sort_keys=True).encode()
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(AHMM_MAGIC + struct.pack("<II", AHMM_VERSION, len(blob)) + blob)
            for lab in labels:
                m = self.models[lab]
                for arr in (m.means, m.variances, m.log_weights, m.log_trans):
                    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.var_floor, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "GmmHmmSet":
        raw = Path(path).read_bytes()
        if raw[:4] != AHMM_MAGIC:
            raise FormatError(f"{path}: not an AHMM model file")
        version, hlen = struct.unpack_from("<II", raw, 4)
        if version != AHMM_VERSION:
            raise FormatError(f"{path}: unsupported model version {version}")
        header = json.loads(raw[12:12 + hlen])
        buf = np.frombuffer(raw, dtype="<f8", offset=12 + hlen)
        pos = 0

        def take(shape):
            nonlocal pos
            n = int(np.prod(shape))
            if pos + n > buf.size:
                raise FormatError(f"{path}: truncated parameter block")
            out = buf[pos:pos + n].reshape(shape).copy()
            pos += n
            return out

        models = {}
        for lab in header["labels"]:
            s, k, d = header["shapes"][lab]
            models[lab] = GmmHmm(lab, take((s, k, d)), take((s, k, d)), take((s, k)), take((s, 2)))
        dim = next(iter(models.values())).dim if models else 0
        return cls(models, take((dim,)), header.get("fingerprint", ""))
