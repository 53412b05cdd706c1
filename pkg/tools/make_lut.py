"""Regenerate src/coughfuse/data/heatmap_lut.bin (256 x RGB uint8).

Piecewise-linear ramp dark purple -> red -> orange -> pale yellow, chosen so
linear luminance strictly increases with the index.
"""
from pathlib import Path

import numpy as np

ANCHORS = np.array([
    [0, 0, 4],
    [60, 15, 110],
    [180, 40, 95],
    [240, 110, 40],
    [250, 200, 60],
    [252, 253, 191],
], dtype=float)


def build() -> np.ndarray:
    pos = np.linspace(0, 255, len(ANCHORS))
    idx = np.arange(256)
    lut = np.stack([np.interp(idx, pos, ANCHORS[:, c]) for c in range(3)], axis=1)
    return np.round(lut).astype(np.uint8)


if __name__ == "__main__":
    lut = build()
    lum = lut.astype(float) @ [0.2126, 0.7152, 0.0722]
    assert np.all(np.diff(lum) > 0), "luminance must increase"
    out = Path(__file__).resolve().parents[1] / "src/coughfuse/data/heatmap_lut.bin"
    out.write_bytes(lut.tobytes())
    print(f"wrote {out}")
