"""Score every padding method on the masked-border benchmark.

Each evaluation crop keeps its outer ``p`` pixel band as ground truth;
every method re-predicts that band from the crop interior and is scored
by PSNR/MSE over the band only.  The context-aware model comes from the
bundle written by 02_train_ca_model.py (run that first, or this script
falls back to an untrained model, which exactly matches replicate).

Run from the repo root after ``pip install -e .``:

    python3 demos/03_evaluate_padding.py

Writes demos/out/eval_metrics.csv and a PSNR bar chart SVG.
"""

import os

import numpy as np

from capad import NetConfig, PadModel, PaddingMethod, load_bundle, net_init
from capad.bench import eval_padding, write_metrics_csv, write_svg_plot
from capad.padding import METHOD_TAGS

OUT_DIR = os.path.join(os.path.dirname(__file__), "out")
BUNDLE = os.path.join(OUT_DIR, "ca_bundle")
P, M, CROP = 2, 12, 32


def make_corpus(n=12, size=48, seed=77):
    # same family as the training corpus in 02, but a held-out seed
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


def get_model():
    if os.path.isdir(BUNDLE):
        print(f"using trained bundle {BUNDLE}")
        return load_bundle(BUNDLE)
    print("no bundle found (run 02_train_ca_model.py first); "
          "falling back to an untrained model")
    net = net_init(NetConfig(depth=1, base_channels=8, in_channels=3, seed=0))
    return PadModel(left=net, right=net.copy(), top=net.copy(),
                    bottom=net.copy(), p=P, m=M)


def main():
    os.makedirs(OUT_DIR, exist_ok=True)
    model = get_model()
    corpus = make_corpus()
    methods = [PaddingMethod(tag, P, model if tag == "ca" else None)
               for tag in METHOD_TAGS]

    records = eval_padding(corpus, methods, p=P, crop=CROP, overlap="1/3", m=M)
    write_metrics_csv(records, os.path.join(OUT_DIR, "eval_metrics.csv"))

    print(f"\n{'method':>12}  {'psnr (dB)':>9}  {'mse':>10}")
    for r in sorted(records, key=lambda r: -r.psnr_db):
        print(f"{r.method:>12}  {r.psnr_db:9.2f}  {r.mse:10.3e}")
    print("\nOn a thin band over smooth synthetics, replicating the edge is "
          "near-optimal;\nthe learned model starts from a zero field (which "
          "reproduces replicate exactly)\nand this quick desk-scale training "
          "closes most, not all, of its gap.")

    write_svg_plot(os.path.join(OUT_DIR, "eval_psnr.svg"),
                   list(range(len(records))), [r.psnr_db for r in records],
                   kind="bar", title=f"band PSNR at p={P} "
                   f"({', '.join(r.method for r in records)})",
                   x_label="method index", y_label="psnr (dB)")
    print(f"\nwrote metrics and the PSNR chart to {OUT_DIR}/")


if __name__ == "__main__":
    main()
