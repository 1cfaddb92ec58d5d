"""Train a small context-aware padding model on a synthetic corpus.

Each of the four border directions gets its own displacement network.
Training strips are cut from the image edges: the outer ``p`` rows are
zeroed, the network predicts a displacement field over the strip, a
bilinear warp pulls known content into the zeroed band, and the loss
compares the warped band against the original pixels.

Run from the repo root after ``pip install -e .``:

    python3 demos/02_train_ca_model.py

Writes the model bundle to demos/out/ca_bundle/ plus a per-side loss CSV
and an SVG loss curve.  Takes about half a minute on one core.
"""

import csv
import os

import numpy as np

from capad import NetConfig, PadModel, TrainConfig, save_bundle, train_direction
from capad.bench import write_svg_plot

OUT_DIR = os.path.join(os.path.dirname(__file__), "out")
P, M = 2, 12
SIDES = ("left", "right", "top", "bottom")


def make_corpus(n=16, size=48, seed=3):
    """Striped ramps with enough short-range texture to be learnable."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    corpus = []
    for _ in range(n):
        theta = rng.uniform(-0.3, 0.3)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy)
                      * (size / 8.0) + phase)
        ramp = rng.uniform(0.3, 0.7) + 0.25 * (xx - 0.5) + 0.15 * (yy - 0.5)
        base = np.clip(ramp + 0.12 * wave, 0.02, 0.98)
        corpus.append(np.stack([base, 0.9 * base + 0.05, 1.0 - 0.5 * base]))
    return corpus


def main():
    os.makedirs(OUT_DIR, exist_ok=True)
    corpus = make_corpus()
    net_cfg = NetConfig(depth=1, base_channels=8, in_channels=3, seed=0)

    nets, histories = {}, {}
    for i, side in enumerate(SIDES):
        cfg = TrainConfig(lr=1e-3, batch_size=8, epochs=100, seed=10 + i,
                          loss_norm="l2", border_only=True)
        nets[side], histories[side] = train_direction(corpus, side, cfg,
                                                      net_cfg, p=P, m=M)
        print(f"{side:>7}: loss {histories[side][0]:.5f} -> {histories[side][-1]:.5f}")

    model = PadModel(**nets, p=P, m=M)
    bundle_dir = os.path.join(OUT_DIR, "ca_bundle")
    save_bundle(model, bundle_dir)

    with open(os.path.join(OUT_DIR, "train_loss.csv"), "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["side", "epoch", "loss"])
        for side in SIDES:
            for epoch, loss in enumerate(histories[side]):
                wr.writerow([side, epoch, f"{loss:.10g}"])

    epochs = list(range(len(histories["left"])))
    write_svg_plot(os.path.join(OUT_DIR, "train_loss.svg"), epochs,
                   histories["left"], kind="line", title="left-side training loss",
                   x_label="epoch", y_label="masked loss")
    print(f"\nwrote bundle to {bundle_dir}/ and the loss curve to {OUT_DIR}/")


if __name__ == "__main__":
    main()
