"""Decentralized damping-controller blocks attached to IBRs.

Each controller is a gain, a washout filter s*Tw/(1 + s*Tw) and one lead-lag
stage (1 + s*T1)/(1 + s*T2), with the output clipped to a symmetric power
limit. The composed IBR reference is P_ref = P_osc * q + P_ref_bar, so a
switched-off controller (q = 0) leaves the IBR on its quasi-stationary
reference while the filter states keep evolving.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CaseError


@dataclass
class DcConfig:
    """Parameters of one damping controller.

    gain: input gain (pu output per pu speed deviation)
    washout_tc: washout time constant Tw (s)
    lead_tc / lag_tc: lead-lag time constants T1, T2 (s)
    input_source: index of the generator whose COI-relative speed deviation
        drives the controller (wide-area input signal)
    p_max: symmetric output limit (pu)
    """

    gain: float
    washout_tc: float
    lead_tc: float
    lag_tc: float
    input_source: int
    p_max: float

    def validate(self):
        if self.washout_tc <= 0.0:
            raise CaseError("washout time constant must be positive")
        if self.lag_tc <= 0.0:
            raise CaseError("lag time constant must be positive")
        if self.p_max <= 0.0:
            raise CaseError("output limit must be positive")

    def to_dict(self):
        return {
            "gain": self.gain,
            "washout_tc": self.washout_tc,
            "lead_tc": self.lead_tc,
            "lag_tc": self.lag_tc,
            "input_source": self.input_source,
            "p_max": self.p_max,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            gain=float(d["gain"]),
            washout_tc=float(d["washout_tc"]),
            lead_tc=float(d["lead_tc"]),
            lag_tc=float(d["lag_tc"]),
            input_source=int(d["input_source"]),
            p_max=float(d["p_max"]),
        )


@dataclass
class DcState:
    """Internal filter states: one per first-order block.

    washout holds the low-pass state x_w with output u*K - x_w, so a constant
    input settles to zero output exactly. leadlag holds the lag state of the
    (1 + s*T1)/(1 + s*T2) stage.
    """

    washout: float = 0.0
    leadlag: float = 0.0


def filter_rates(gain, washout_tc, lag_tc, x_washout, x_leadlag, u):
    """State derivatives of the washout + lead-lag chain. Array friendly."""
    uk = gain * u
    yw = uk - x_washout
    dxw = yw / washout_tc
    dxll = (yw - x_leadlag) / lag_tc
    return dxw, dxll


def filter_output(gain, lead_tc, lag_tc, p_max, x_washout, x_leadlag, u):
    """Lead-lag output clipped to the symmetric limit. Array friendly."""
    uk = gain * u
    yw = uk - x_washout
    yll = x_leadlag + (lead_tc / lag_tc) * (yw - x_leadlag)
    return np.clip(yll, -p_max, p_max)


def dc_derivatives(cfg: DcConfig, state: DcState, input_signal: float) -> DcState:
    """Time derivatives of the controller states for a given input (pu)."""
    dxw, dxll = filter_rates(
        cfg.gain, cfg.washout_tc, cfg.lag_tc, state.washout, state.leadlag, input_signal
    )
    return DcState(washout=float(dxw), leadlag=float(dxll))


def dc_output(cfg: DcConfig, state: DcState, input_signal: float) -> float:
    """Supplementary power modulation P_osc (pu), limited to +-p_max."""
    return float(
        filter_output(
            cfg.gain, cfg.lead_tc, cfg.lag_tc, cfg.p_max,
            state.washout, state.leadlag, input_signal,
        )
    )


def compose_reference(p_osc: float, q: int, p_ref_bar: float) -> float:
    """Total IBR power reference P_osc * q + P_ref_bar; q must be 0 or 1."""
    if q not in (0, 1):
        raise ValueError(f"switching state must be 0 or 1, got {q!r}")
    return p_osc * q + p_ref_bar


def frequency_response(cfg: DcConfig, freq_hz: float) -> complex:
    """Transfer function K * sTw/(1+sTw) * (1+sT1)/(1+sT2) at s = j*2*pi*f.

    Small-signal response only; the output limit is ignored.
    """
    s = 2j * np.pi * freq_hz
    washout = s * cfg.washout_tc / (1.0 + s * cfg.washout_tc)
    leadlag = (1.0 + s * cfg.lead_tc) / (1.0 + s * cfg.lag_tc)
    return complex(cfg.gain * washout * leadlag)
