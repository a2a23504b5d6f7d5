"""JSON run configuration and named model presets.

A configuration file looks like::

    {
      "model": {"A": [[1.0]], "C": [[1.0]], "Sigma_A": [1.0], "Sigma_I": [0.01]},
      "filter": {"N": 20, "M": 1, "seed": 0, "anomaly_threshold": 0.5},
      "horizons": null,
      "prior": null
    }

``Sigma_A`` and ``Sigma_I`` are the diagonals of the noise covariances
(variances, not standard deviations). ``horizons`` is either ``null`` for the
calibrated default or one list of positive integers per state component.
Optional filter keys are ``r``, ``s`` (scalars or per-component lists),
``shape``, ``rho`` (autocorrelation adjustment of the anomaly probabilities)
and ``history_window``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .engine import FilterConfig
from .errors import ConfigError
from .model import GaussianState, StateSpaceModel

_FILTER_KEYS = {"N", "M", "seed", "anomaly_threshold", "r", "s", "shape", "rho", "history_window"}
_TOP_KEYS = {"model", "filter", "horizons", "prior", "input", "output", "name"}


@dataclass
class RunConfig:
    model: dict
    filter: dict = field(default_factory=dict)
    horizons: list[list[int]] | None = None
    prior: dict | None = None
    input: str | None = None
    output: str | None = None
    name: str | None = None

    # ------------------------------------------------------------- building

    def build_model(self) -> StateSpaceModel:
        m = self.model
        for key in ("A", "C", "Sigma_A", "Sigma_I"):
            if key not in m:
                raise ConfigError(f"model.{key}: missing")
        try:
            return StateSpaceModel(
                A=_floats(m["A"], "model.A"),
                C=_floats(m["C"], "model.C"),
                Sigma_A=_floats(m["Sigma_A"], "model.Sigma_A"),
                Sigma_I=_floats(m["Sigma_I"], "model.Sigma_I"),
            )
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"model: {exc}") from exc

    def build_filter(self, model: StateSpaceModel | None = None, seed: int | None = None) -> FilterConfig:
        model = self.build_model() if model is None else model
        f = dict(self.filter)
        if seed is not None:
            f["seed"] = seed
        horizons = None
        if self.horizons is not None:
            if len(self.horizons) != model.q:
                raise ConfigError(f"horizons: need {model.q} lists, got {len(self.horizons)}")
            horizons = []
            for j, B in enumerate(self.horizons):
                if not isinstance(B, list) or not all(isinstance(h, int) and h >= 1 for h in B) or not B:
                    raise ConfigError(f"horizons[{j}]: expected a non-empty list of positive integers")
                horizons.append(set(B))
        try:
            return FilterConfig.calibrated(
                model,
                N=_int(f.get("N", 20), "filter.N"),
                M=_int(f.get("M", 1), "filter.M"),
                horizons=horizons,
                r=f.get("r"),
                s=f.get("s"),
                shape=float(f.get("shape", 3.0)),
                rho=f.get("rho"),
                seed=f.get("seed", 0),
                anomaly_threshold=float(f.get("anomaly_threshold", 0.5)),
                history_window=f.get("history_window"),
            )
        except ValueError as exc:
            raise ConfigError(f"filter: {exc}") from exc

    def build_prior(self, model: StateSpaceModel) -> GaussianState | None:
        if not self.prior:
            return None
        mu = self.prior.get("mu")
        Sigma = self.prior.get("Sigma")
        if mu is None or Sigma is None:
            raise ConfigError("prior: both 'mu' and 'Sigma' are required")
        mu = np.asarray(_floats(mu, "prior.mu"), dtype=float)
        Sigma = np.asarray(_floats(Sigma, "prior.Sigma"), dtype=float)
        if mu.shape != (model.q,) or Sigma.shape != (model.q, model.q):
            raise ConfigError(f"prior: expected mu of length {model.q} and a {model.q}x{model.q} Sigma")
        return GaussianState(mu, Sigma)

    # ------------------------------------------------------- serialisation

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"model": self.model, "filter": self.filter, "horizons": self.horizons}
        for key in ("prior", "input", "output", "name"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config: top level must be a JSON object")
        unknown = set(d) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"config: unknown key(s) {sorted(unknown)}")
        if "model" not in d or not isinstance(d["model"], dict):
            raise ConfigError("model: missing or not an object")
        filt = d.get("filter") or {}
        if not isinstance(filt, dict):
            raise ConfigError("filter: must be an object")
        unknown = set(filt) - _FILTER_KEYS
        if unknown:
            raise ConfigError(f"filter: unknown key(s) {sorted(unknown)}")
        return cls(
            model=d["model"],
            filter=filt,
            horizons=d.get("horizons"),
            prior=d.get("prior"),
            input=d.get("input"),
            output=d.get("output"),
            name=d.get("name"),
        )

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.loads(text)


def _floats(x, where):
    try:
        arr = np.asarray(x, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: expected numbers") from exc
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{where}: non-finite value")
    return arr.tolist()


def _int(x, where):
    if isinstance(x, bool) or not isinstance(x, int):
        raise ConfigError(f"{where}: expected an integer")
    return x


# ----------------------------------------------------------------- presets

def _example1():
    return RunConfig(
        name="example1",
        model={"A": [[1.0]], "C": [[1.0]], "Sigma_A": [1.0], "Sigma_I": [0.01]},
        filter={"N": 20, "M": 1, "seed": 0, "anomaly_threshold": 0.5},
    )


def _example2():
    return RunConfig(
        name="example2",
        model={"A": [[1.0, 1.0], [0.0, 1.0]], "C": [[1.0, 0.0]], "Sigma_A": [1.0], "Sigma_I": [0.01, 0.0001]},
        filter={"N": 40, "M": 1, "seed": 0, "anomaly_threshold": 0.5},
        horizons=[list(range(1, 41)), list(range(2, 41))],
    )


def _router():
    # level plus AR(1) component, observed through their sum
    rho = 0.815
    return RunConfig(
        name="router",
        model={
            "A": [[1.0, 0.0], [0.0, rho]],
            "C": [[1.0, 1.0]],
            "Sigma_A": [0.0516 ** 2],
            "Sigma_I": [0.0157 ** 2, 0.516 ** 2],
        },
        filter={"N": 20, "M": 1, "seed": 0, "anomaly_threshold": 0.5},
    )


def _machine_temperature():
    # random walk with very small innovation scale; rescale Sigma_A to the data
    sigma_a = 1.0
    return RunConfig(
        name="machine_temperature",
        model={"A": [[1.0]], "C": [[1.0]], "Sigma_A": [sigma_a ** 2], "Sigma_I": [(sigma_a / 10000) ** 2]},
        filter={"N": 20, "M": 1, "seed": 0, "anomaly_threshold": 0.5, "rho": 0.99},
        horizons=[[1, 5, 10, 20, 40, 80, 150, 250]],
    )


PRESETS = {
    "example1": _example1,
    "example2": _example2,
    "router": _router,
    "machine_temperature": _machine_temperature,
}


def preset(name: str) -> RunConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
