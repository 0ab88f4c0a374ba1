"""Separation-window detection on per-epoch loss traces."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .trainer import LossTrace

MSE_THRESHOLD = 250.0
KL_THRESHOLD = 60.0


@dataclass(frozen=True)
class WindowConfig:
    mse_threshold: float = MSE_THRESHOLD
    kl_threshold: float = KL_THRESHOLD

    def __post_init__(self):
        if self.mse_threshold <= 0 or self.kl_threshold <= 0:
            raise ValueError("thresholds must be positive")

    def scaled_for_bins(self, bins: int, reference_bins: int = 512) -> "WindowConfig":
        # the MSE convention sums over bins, so it scales with the bin count
        return WindowConfig(self.mse_threshold * bins / reference_bins, self.kl_threshold)


@dataclass
class SeparationWindow:
    spans: list[tuple[int, int]] = field(default_factory=list)
    selected_epoch: int | None = None

    @property
    def empty(self) -> bool:
        return not self.spans

    def epochs(self) -> list[int]:
        return [e for a, b in self.spans for e in range(a, b + 1)]


def detect_window(trace: LossTrace, cfg: WindowConfig = WindowConfig()) -> SeparationWindow:
    """Epochs where both losses are at or below threshold, grouped into spans.

    The selected checkpoint is the midpoint of the widest span (earliest span
    on ties, lower midpoint for even widths).
    """
    if len(trace) == 0:
        raise ValueError("empty loss trace")
    epochs = np.array([r.epoch for r in trace.records])
    ok = (trace.mse <= cfg.mse_threshold) & (trace.kl <= cfg.kl_threshold)
    spans = []
    start = None
    prev = None
    for e, good in zip(epochs, ok):
        if good and start is not None and e == prev + 1:
            prev = e
            continue
        if start is not None:
            spans.append((int(start), int(prev)))
            start = None
        if good:
            start = prev = e
    if start is not None:
        spans.append((int(start), int(prev)))
    if not spans:
        return SeparationWindow()
    widest = max(spans, key=lambda s: (s[1] - s[0], -s[0]))
    return SeparationWindow(spans, (widest[0] + widest[1]) // 2)


def window_width(win: SeparationWindow) -> int:
    return sum(b - a + 1 for a, b in win.spans)


def write_window_csv(win: SeparationWindow, path, cfg: WindowConfig | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if cfg is not None:
            fh.write(f"# mse_threshold={cfg.mse_threshold!r} kl_threshold={cfg.kl_threshold!r}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["start", "end", "width", "selected"])
        for a, b in win.spans:
            sel = win.selected_epoch if win.selected_epoch is not None and a <= win.selected_epoch <= b else ""
            wr.writerow([a, b, b - a + 1, sel])
