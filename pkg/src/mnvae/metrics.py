"""Scale-invariant SDR."""

from __future__ import annotations

import numpy as np

SDR_CAP_DB = 60.0


def si_sdr(reference, estimate, cap: float = SDR_CAP_DB) -> float:
    """``10 log10(|a s|^2 / |a s - e|^2)`` with ``a`` the least-squares scale of ``s``
    onto ``e``; clipped to ``[-cap, cap]`` dB."""
    s = np.asarray(getattr(reference, "samples", reference), dtype=np.float64)
    e = np.asarray(getattr(estimate, "samples", estimate), dtype=np.float64)
    if s.shape != e.shape:
        raise ValueError(f"length mismatch: reference {s.shape}, estimate {e.shape}")
    ref_energy = float(s @ s)
    if ref_energy == 0.0:
        raise ValueError("reference signal is all zeros")
    target = (float(e @ s) / ref_energy) * s
    num = float(target @ target)
    den = float(np.sum((target - e) ** 2))
    if num == 0.0:
        return -cap
    if den <= num * 10.0 ** (-cap / 10.0):
        return cap
    return float(np.clip(10.0 * np.log10(num / den), -cap, cap))
