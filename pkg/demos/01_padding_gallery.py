"""Gallery of the classic padding methods on one structured image.

Pads the same synthetic photo with every non-learned method and tiles the
results into a single strip so the border behavior is easy to compare:
zero leaves a black frame, circular wraps content from the far side,
reflect mirrors it, replicate smears the edge row, bilinear extrapolates
the local gradient and distribution resamples edge statistics.

Run from the repo root after ``pip install -e .``:

    python3 demos/01_padding_gallery.py

Writes demos/out/padding_gallery.png and one PNG per method.
"""

import os

import numpy as np

from capad import PaddingMethod, save_image

OUT_DIR = os.path.join(os.path.dirname(__file__), "out")
METHODS = ("zero", "circular", "reflect", "replicate", "bilinear", "distribution")
PAD = 8


def make_photo(size=48):
    """Diagonal stripes over a corner-to-corner ramp, three channels."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    stripes = 0.5 + 0.45 * np.sin(2 * np.pi * (xx + 0.6 * yy) * 4.0)
    ramp = 0.25 + 0.5 * (0.6 * xx + 0.4 * yy)
    base = 0.55 * stripes + 0.45 * ramp
    return np.clip(np.stack([base, 0.85 * base + 0.1, 1.0 - 0.7 * base]), 0, 1)


def main():
    os.makedirs(OUT_DIR, exist_ok=True)
    image = make_photo()

    panels = []
    for tag in METHODS:
        padded = PaddingMethod(tag, PAD).apply(image)
        save_image(padded, os.path.join(OUT_DIR, f"pad_{tag}.png"))
        panels.append(padded)
        band = np.concatenate([padded[:, :PAD, :].ravel(),
                               padded[:, -PAD:, :].ravel(),
                               padded[:, :, :PAD].ravel(),
                               padded[:, :, -PAD:].ravel()])
        print(f"{tag:>12}: band mean {band.mean():.3f}  band std {band.std():.3f}")

    gap = np.ones((3, panels[0].shape[1], 4))
    strip = panels[0]
    for panel in panels[1:]:
        strip = np.concatenate([strip, gap, panel], axis=2)
    save_image(strip, os.path.join(OUT_DIR, "padding_gallery.png"))
    print(f"\nwrote {len(METHODS)} panels and the gallery strip to {OUT_DIR}/")


if __name__ == "__main__":
    main()
