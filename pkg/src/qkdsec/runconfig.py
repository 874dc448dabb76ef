"""Run configuration: flat dotted-key text (or JSON) in, evaluators out.

The config format is a grep-friendly list of `section.key = value` lines;
unknown keys are rejected so typos fail loudly.  A RunConfig plus a
parameter dict (the optimizer's current point) fully determines one
key-rate evaluation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from . import channelsim as cs
from . import corrbound as cb
from . import finitekey as fk
from . import optimsweep as osw
from . import protocolkit as pk


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


_DEFAULTS = {
    "protocol.kind": "bb84",
    "protocol.delta_theta": 0.0,
    "protocol.epsilon": 0.0,
    "protocol.corr_length": 0,
    "protocol.p_z": 0.9,
    "protocol.mu": 0.1,
    "protocol.p_key_given_z": 0.5,
    "protocol.intensities": (0.48, 0.1, 1e-5),
    "protocol.intensity_probs": (0.7, 0.2, 0.1),
    "protocol.n_cut": 3,
    "protocol.vacuum_convention": False,
    "protocol.drop_cross_terms": False,
    "corr.eps_ic1": 0.0,
    "corr.zeta": 6.0,
    "corr.context_mode": "reduced",
    "channel.distance_km": 0.0,
    "channel.alpha_db_per_km": 0.2,
    "channel.eta_det": 1.0,
    "channel.p_dark": 0.0,
    "detector.delta_eta": 0.0,
    "detector.delta_dc": 0.0,
    "budget.eps_sec": 1e-10,
    "budget.eps_ev": 1e-10,
    "run.n_pulses": 1e10,
    "run.seed": 0,
    "run.f_ec": fk.F_EC_DEFAULT,
    "run.alpha": 0.3,
    "run.gamma_w": 30.0,
    "optimize.enabled": True,
    "optimize.max_evals": 60,
    "optimize.params": (),           # empty = protocol default set
    "sweep.distances": (),
}

_TUPLE_KEYS = {"protocol.intensities", "protocol.intensity_probs",
               "optimize.params", "sweep.distances"}
_INT_KEYS = {"protocol.corr_length", "protocol.n_cut", "run.seed",
             "optimize.max_evals"}
_BOOL_KEYS = {"protocol.vacuum_convention", "protocol.drop_cross_terms",
              "optimize.enabled"}
_STR_KEYS = {"protocol.kind", "corr.context_mode"}


@dataclass(frozen=True)
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = dict(_DEFAULTS)
        for key, val in self.values.items():
            if key not in _DEFAULTS:
                raise ConfigError(f"unknown config key: {key}")
            merged[key] = val
        object.__setattr__(self, "values", merged)
        self.validate()

    def __getitem__(self, key):
        return self.values[key]

    @property
    def kind(self) -> str:
        return self.values["protocol.kind"]

    def validate(self):
        v = self.values
        if v["protocol.kind"] not in ("bb84", "mdi", "decoy"):
            raise ConfigError(f"unknown protocol kind {v['protocol.kind']}")
        if not (0.0 < v["protocol.p_z"] < 1.0):
            raise ConfigError("protocol.p_z must be in (0, 1)")
        if not (0.0 <= v["protocol.epsilon"] <= 1.0):
            raise ConfigError("protocol.epsilon must be in [0, 1]")
        if v["protocol.corr_length"] < 0:
            raise ConfigError("protocol.corr_length must be >= 0")
        if v["run.n_pulses"] < 1:
            raise ConfigError("run.n_pulses must be >= 1")
        if v["protocol.kind"] == "decoy":
            ints = v["protocol.intensities"]
            probs = v["protocol.intensity_probs"]
            if len(ints) != len(probs):
                raise ConfigError("one intensity probability per intensity")
            if any(x <= 0 for x in ints) or list(ints) != sorted(ints, reverse=True):
                raise ConfigError("intensities must be positive and descending")

    # -- serialization ------------------------------------------------

    def dumps(self) -> str:
        lines = []
        for key in sorted(self.values):
            val = self.values[key]
            if isinstance(val, tuple):
                lines.append(f"{key} = " + ",".join(repr(x) for x in val))
            else:
                lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"


def _coerce(key: str, raw: str):
    raw = raw.strip()
    if key in _TUPLE_KEYS:
        if not raw:
            return ()
        parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
        if key in ("optimize.params",):
            return tuple(p.strip().strip("'\"") for p in parts)
        vals = tuple(float(p) for p in parts)
        return vals
    if key in _BOOL_KEYS:
        low = raw.strip("'\"").lower()
        if low in ("true", "on", "1", "yes"):
            return True
        if low in ("false", "off", "0", "no"):
            return False
        raise ConfigError(f"bad boolean for {key}: {raw}")
    if key in _STR_KEYS:
        return raw.strip("'\"")
    if key in _INT_KEYS:
        return int(float(raw))
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw}") from exc


def parse_config(text: str) -> RunConfig:
    """Parse dotted-key text; JSON (flat or nested one level) also accepted."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        data = json.loads(text)
        flat = {}
        for key, val in data.items():
            if isinstance(val, dict):
                for sub, v in val.items():
                    flat[f"{key}.{sub}"] = v
            else:
                flat[key] = val
        values = {}
        for key, val in flat.items():
            if key not in _DEFAULTS:
                raise ConfigError(f"unknown config key: {key}")
            if key in _TUPLE_KEYS and isinstance(val, (list, tuple)):
                values[key] = tuple(val)
            elif key in _INT_KEYS:
                values[key] = int(val)
            else:
                values[key] = val
        return RunConfig(values)
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = body.partition("=")
        key = key.strip()
        if key not in _DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown config key: {key}")
        values[key] = _coerce(key, raw)
    return RunConfig(values)


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------------------
# evaluators


def default_params(config: RunConfig) -> dict:
    v = config.values
    base = {"p_z": v["protocol.p_z"], "alpha": v["run.alpha"],
            "gamma_w": v["run.gamma_w"]}
    if config.kind == "mdi":
        base.update(mu=v["protocol.mu"], p_key_given_z=v["protocol.p_key_given_z"])
    if config.kind == "decoy":
        ints = v["protocol.intensities"]
        probs = v["protocol.intensity_probs"]
        base.update(intensity_0=ints[0], intensity_1=ints[1],
                    p_int_0=probs[0], p_int_1=probs[1])
    return base


def parameter_space(config: RunConfig) -> osw.ParameterSpace:
    if config.kind == "bb84":
        space = osw.bb84_space()
    elif config.kind == "mdi":
        space = osw.mdi_space()
    else:
        space = osw.decoy_space()
    chosen = config["optimize.params"]
    if chosen:
        keep = tuple(p for p in space.parameters if p.name in chosen)
        missing = set(chosen) - {p.name for p in keep}
        if missing:
            raise ConfigError(f"unknown optimize.params entries: {sorted(missing)}")
        space = osw.ParameterSpace(keep)
    return space


def _decoy_pieces(config: RunConfig, params: dict):
    v = config.values
    ints = list(v["protocol.intensities"])
    probs = list(v["protocol.intensity_probs"])
    ints[0] = params.get("intensity_0", ints[0])
    ints[1] = params.get("intensity_1", ints[1])
    p0 = params.get("p_int_0", probs[0])
    p1 = params.get("p_int_1", probs[1])
    # keep the simplex valid: renormalize the two free masses if needed
    floor = 0.01
    if p0 + p1 > 1.0 - floor:
        scale = (1.0 - floor) / (p0 + p1)
        p0, p1 = p0 * scale, p1 * scale
    probs = [p0, p1, 1.0 - p0 - p1]
    # keep the intensity ladder strictly descending
    ints[1] = min(ints[1], 0.9 * ints[0])
    ints[1] = max(ints[1], 2.0 * ints[2])
    model = pk.decoy_model(
        delta_theta=v["protocol.delta_theta"], epsilon=v["protocol.epsilon"],
        corr_length=v["protocol.corr_length"], p_z=params.get("p_z", v["protocol.p_z"]),
        intensities=tuple(ints), intensity_probs=tuple(probs),
        n_cut=v["protocol.n_cut"], vacuum_convention=v["protocol.vacuum_convention"],
        drop_cross_terms=v["protocol.drop_cross_terms"])
    p_high = float(sum(model.setting_probs[i]
                       for i, (_, mu) in enumerate(model.pairs) if mu == 0))
    icm = cb.IntensityCorrelationModel(
        avg_intensities=model.intensities,
        eps_ic1=v["corr.eps_ic1"], zeta=v["corr.zeta"],
        corr_length=v["protocol.corr_length"], p_high=p_high)
    return model, icm


@dataclass
class Evaluator:
    """Builds models from (distance, params) and runs the right pipeline.

    Holds the warm-start state so that consecutive evaluations (optimizer
    steps, neighbor distances) reuse solver information; results are
    independent of that reuse up to solver tolerance.
    """

    config: RunConfig
    warm_state: dict = field(default_factory=dict)

    def budget(self) -> fk.EpsilonBudget:
        return fk.budget_preset(self.config.kind,
                                eps_sec=self.config["budget.eps_sec"],
                                eps_ev=self.config["budget.eps_ev"])

    def channel(self, distance_km: float) -> cs.ChannelParams:
        v = self.config.values
        return cs.ChannelParams(distance_km=distance_km,
                                alpha_db_per_km=v["channel.alpha_db_per_km"],
                                eta_det=v["channel.eta_det"],
                                p_dark=v["channel.p_dark"])

    def tolerances(self) -> fk.DetectorTolerances:
        v = self.config.values
        return fk.DetectorTolerances(eta_det=v["channel.eta_det"],
                                     d_det=v["channel.p_dark"],
                                     delta_eta=v["detector.delta_eta"],
                                     delta_dc=v["detector.delta_dc"])

    def options(self, params: dict) -> fk.PipelineOptions:
        v = self.config.values
        return fk.PipelineOptions(gamma_w=params.get("gamma_w", v["run.gamma_w"]),
                                  alpha=params.get("alpha", v["run.alpha"]),
                                  f_ec=v["run.f_ec"],
                                  context_mode=v["corr.context_mode"],
                                  warm_state=self.warm_state)

    def __call__(self, distance_km: float, params: dict) -> fk.KeyRateResult:
        v = self.config.values
        budget = self.budget()
        channel = self.channel(distance_km)
        opts = self.options(params)
        try:
            if self.config.kind == "bb84":
                model = pk.bb84_model(delta_theta=v["protocol.delta_theta"],
                                      epsilon=v["protocol.epsilon"],
                                      corr_length=v["protocol.corr_length"],
                                      p_z=params.get("p_z", v["protocol.p_z"]))
                return fk.bb84_keyrate(model, channel, v["run.n_pulses"], budget,
                                       self.tolerances(), opts)
            if self.config.kind == "mdi":
                model = pk.mdi_model(mu=params.get("mu", v["protocol.mu"]),
                                     epsilon=v["protocol.epsilon"],
                                     corr_length=v["protocol.corr_length"],
                                     p_z=params.get("p_z", v["protocol.p_z"]),
                                     p_key_given_z=params.get(
                                         "p_key_given_z", v["protocol.p_key_given_z"]))
                return fk.mdi_keyrate(model, channel, v["run.n_pulses"], budget, opts)
            model, icm = _decoy_pieces(self.config, params)
            return fk.decoy_keyrate(model, icm, channel, v["run.n_pulses"], budget,
                                    self.tolerances(), opts)
        except (fk.InvalidRegime, ValueError, ArithmeticError):
            return fk.KeyRateResult(protocol=self.config.kind, l_key=0.0, rate=0.0,
                                    e_ph_upper=0.5, m_w_upper=math.nan,
                                    lambda_ec=math.nan, n_pulses=v["run.n_pulses"],
                                    params=dict(params), budget=budget,
                                    diagnostics={"error": "evaluation failed"})
