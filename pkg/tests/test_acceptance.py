"""Release gate: nine end-to-end acceptance checks, one test per criterion.

Each test asserts one shipping criterion and prints a PASS/FAIL line with
the measured numbers (visible with ``pytest -s`` or on failure), so a plain
``pytest -v`` run yields exactly one verdict per criterion.  Criteria 5, 6
and 8 share the session-scoped trained model from conftest.py; everything
else builds its own inputs.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from capad import (IGNORE_INDEX, NetConfig, PadModel, TrainConfig, ca_pad,
                   net_backward, net_forward, net_init, pad_index_mapped,
                   partial_conv2d, save_image, train_direction, warp_backward,
                   warp_forward)
from capad.bench import border_miou, mask_center, miou
from capad.cli import main as cli_main

from synthetic import ramp_texture_corpus


def _verdict(ok: bool, label: str) -> None:
    print(("PASS" if ok else "FAIL") + " - " + label, flush=True)
    assert ok, label


# ---------------------------------------------------------------------------
# Criterion 1: warp identity and exact gradients


def test_criterion_1_warp_identity_and_gradients():
    t0 = time.monotonic()
    rng = np.random.default_rng(9001)

    # zero displacement must reproduce the input bitwise
    n_ident = 0
    for _ in range(40):
        c = int(rng.integers(1, 4))
        h = int(rng.integers(1, 9))
        w = int(rng.integers(1, 9))
        b = rng.random((c, h, w))
        assert np.array_equal(warp_forward(b, np.zeros((2, h, w))), b)
        n_ident += 1

    def warp_scalar(b, flow, g):
        return float(np.sum(warp_forward(b, flow) * g))

    worst_warp = 0.0
    n_warp = 0
    for _ in range(60):
        h = int(rng.integers(3, 7))
        w = int(rng.integers(3, 7))
        b = rng.random((2, h, w))
        flow = rng.uniform(-1.5, 1.5, size=(2, h, w))
        frac = flow - np.floor(flow)
        # the warp is piecewise linear; keep samples off the integer kinks
        flow = np.where((frac < 0.15) | (frac > 0.85), np.floor(flow) + 0.5, flow)
        g = rng.standard_normal((2, h, w))
        grad_b, grad_flow = warp_backward(g, b, flow)
        eps = 1e-5
        for arr, grad in ((b, grad_b), (flow, grad_flow)):
            flat = arr.reshape(-1)
            gflat = grad.reshape(-1)
            for k in rng.choice(flat.size, size=3, replace=False):
                orig = flat[k]
                flat[k] = orig + eps
                fp = warp_scalar(b, flow, g)
                flat[k] = orig - eps
                fm = warp_scalar(b, flow, g)
                flat[k] = orig
                fd = (fp - fm) / (2.0 * eps)
                # the 1e-3 floor only guards genuinely zero gradients
                rel = abs(fd - gflat[k]) / max(abs(fd), abs(gflat[k]), 1e-3)
                worst_warp = max(worst_warp, rel)
        n_warp += 1

    worst_net = 0.0
    n_net = 0
    skipped = 0
    for t in range(12):
        cfg = NetConfig(depth=1 + t % 2, base_channels=3, in_channels=2,
                        seed=300 + t)
        net = net_init(cfg)
        # the head starts at zero; randomize it so gradients reach every layer
        net.head.weight[...] = rng.uniform(-0.3, 0.3, size=net.head.weight.shape)
        net.head.bias[...] = rng.uniform(-0.1, 0.1, size=net.head.bias.shape)
        x = rng.random((2, cfg.in_channels, 8, 9))
        g = rng.standard_normal((2, 2, 8, 9))

        def net_scalar():
            field, _ = net_forward(net, x, training=True)
            return float(np.sum(field * g))

        field, cache = net_forward(net, x, training=True)
        grads, _ = net_backward(net, cache, g)
        f0 = float(np.sum(field * g))
        params = dict(net.named_params())
        eps = 1e-6
        for name in ("enc0.weight", "enc0.gamma", "dec0.weight",
                     "head.weight", "head.bias"):
            arr = params[name]
            ga = grads[name]
            for _ in range(2):
                idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
                orig = arr[idx]
                arr[idx] = orig + eps
                fp = net_scalar()
                arr[idx] = orig - eps
                fm = net_scalar()
                arr[idx] = orig
                central = (fp - fm) / (2.0 * eps)
                right = (fp - f0) / eps
                left = (f0 - fm) / eps
                if abs(right - left) > 1e-3 * max(1.0, abs(central)):
                    skipped += 1  # straddles a relu/maxpool kink
                    continue
                an = float(ga[idx])
                if abs(central) < 1e-7 and abs(an) < 1e-7:
                    continue  # e.g. conv bias ahead of batchnorm: exactly zero
                rel = abs(central - an) / max(abs(central), abs(an))
                worst_net = max(worst_net, rel)
        n_net += 1

    elapsed = time.monotonic() - t0
    total = n_ident + n_warp + n_net
    ok = (worst_warp < 1e-4 and worst_net < 1e-3 and total >= 100
          and elapsed < 60.0)
    _verdict(ok, f"criterion 1: {total} instances ({n_ident} identity, "
                 f"{n_warp} warp fd, {n_net} net fd, {skipped} kink-skips); "
                 f"warp rel {worst_warp:.2e} < 1e-4, net rel {worst_net:.2e} "
                 f"< 1e-3, {elapsed:.1f}s < 60s")


# ---------------------------------------------------------------------------
# Criterion 2: classic padding vs a brute-force index oracle


def _oracle_source(i: int, n: int, method: str):
    """Independent per-axis source index; None means a zero fill."""
    if 0 <= i < n:
        return i
    if method == "zero":
        return None
    if method == "circular":
        return i % n
    if method == "replicate":
        return min(max(i, 0), n - 1)
    if method == "reflect":
        period = 2 * n - 2
        j = i % period
        return j if j < n else period - j
    raise AssertionError(method)


def test_criterion_2_classic_padding_matches_oracle():
    rng = np.random.default_rng(4242)
    checked = 0
    raised = 0
    for h in range(1, 17):
        for w in range(1, 17):
            t = rng.random((2, h, w))
            for p in (1, 2, 3):
                for method in ("zero", "circular", "reflect", "replicate"):
                    bad = ((method == "reflect" and p > min(h, w) - 1)
                           or (method == "circular" and p > min(h, w)))
                    if bad:
                        with pytest.raises(ValueError):
                            pad_index_mapped(t, method, p)
                        raised += 1
                        continue
                    got = pad_index_mapped(t, method, p)
                    exp = np.zeros((2, h + 2 * p, w + 2 * p))
                    for y in range(h + 2 * p):
                        sy = _oracle_source(y - p, h, method)
                        if sy is None:
                            continue
                        for x in range(w + 2 * p):
                            sx = _oracle_source(x - p, w, method)
                            if sx is not None:
                                exp[:, y, x] = t[:, sy, sx]
                    assert np.array_equal(got, exp), (h, w, p, method)
                    checked += 1
    ok = checked >= 2500
    _verdict(ok, f"criterion 2: {checked} exact shape/width/method combos "
                 f"(all h,w <= 16, p <= 3) plus {raised} invalid-width raises")


# ---------------------------------------------------------------------------
# Criterion 3: partial convolution vs plain convolution


def _loop_conv2d(t, weights, bias):
    out_c, _, kh, kw = weights.shape
    _, h, w = t.shape
    oh, ow = h - kh + 1, w - kw + 1
    out = np.zeros((out_c, oh, ow))
    for o in range(out_c):
        for y in range(oh):
            for x in range(ow):
                out[o, y, x] = np.sum(t[:, y:y + kh, x:x + kw] * weights[o]) + bias[o]
    return out


def test_criterion_3_partial_conv_reference():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        c = int(rng.integers(1, 4))
        oc = int(rng.integers(1, 4))
        h = int(rng.integers(5, 10))
        w = int(rng.integers(5, 10))
        t = rng.random((c, h, w))
        wts = rng.standard_normal((oc, c, 3, 3))
        bias = rng.standard_normal(oc)
        out, covered = partial_conv2d(t, np.ones((h, w), np.uint8), wts, bias)
        ref = _loop_conv2d(t, wts, bias)
        worst = max(worst, float(np.max(np.abs(out - ref))))
        assert covered.all()

    # 2x2 valid corner of ones under a 3x3 ones kernel: raw sum 4, window
    # renormalization k*k/valid = 9/4, so the output must be exactly 9
    t = np.ones((1, 4, 4))
    mask = np.zeros((4, 4), np.uint8)
    mask[:2, :2] = 1
    out, _ = partial_conv2d(t, mask, np.ones((1, 1, 3, 3)), np.zeros(1))
    corner = float(out[0, 0, 0])

    ok = worst <= 1e-6 and corner == 9.0
    _verdict(ok, f"criterion 3: 20 all-ones-mask runs, max|diff|={worst:.2e} "
                 f"<= 1e-6; corner renormalization 4 -> {corner} (want 9.0)")


# ---------------------------------------------------------------------------
# Criterion 4: the trainer actually reduces the loss


def test_criterion_4_training_reduces_loss():
    t0 = time.monotonic()
    corpus = ramp_texture_corpus(64, 64, seed=202)
    cfg = TrainConfig(lr=1e-4, batch_size=8, epochs=150, seed=0)
    net_cfg = NetConfig(depth=2, base_channels=16, in_channels=3, seed=0)
    _, history = train_direction(corpus, "left", cfg, net_cfg, p=3, m=20)
    elapsed = time.monotonic() - t0
    ratio = history[-1] / history[0]
    ok = ratio < 0.5 and elapsed < 900.0
    _verdict(ok, f"criterion 4: epoch loss {history[0]:.5f} -> {history[-1]:.5f} "
                 f"(ratio {ratio:.3f} < 0.5) in {elapsed:.0f}s < 900s")


# ---------------------------------------------------------------------------
# Criteria 5 and 6: benchmark ranking of the padding methods


def test_criterion_5_psnr_ranking_with_trained_ca(padding_records):
    by = {r.method: r.psnr_db for r in padding_records[1]}
    order_ok = by["zero"] < by["circular"] < by["reflect"] <= by["replicate"]
    ca_ok = by["ca"] >= by["replicate"] - 1.0
    ok = order_ok and ca_ok
    _verdict(ok, "criterion 5: p=1 psnr(dB) zero={zero:.2f} circular={circular:.2f} "
                 "reflect={reflect:.2f} replicate={replicate:.2f} ca={ca:.2f}; "
                 "classic order {o}, ca within 1 dB of replicate {c}".format(
                     o=order_ok, c=ca_ok, **by))


def test_criterion_6_error_grows_with_width(padding_records):
    r1 = {r.method: r.mse for r in padding_records[1]}
    r3 = {r.method: r.mse for r in padding_records[3]}
    assert set(r1) == set(r3)
    bad = [m for m in r1 if r1[m] > r3[m]]
    ok = not bad
    pairs = " ".join(f"{m}:{r1[m]:.2e}<={r3[m]:.2e}" for m in sorted(r1))
    _verdict(ok, f"criterion 6: mse(p=1) <= mse(p=3) for every method; {pairs}"
                 + (f"; violations {bad}" if bad else ""))


# ---------------------------------------------------------------------------
# Criterion 7: segmentation metrics vs per-pixel oracles


def _oracle_miou(pred, gt, k):
    inter = [0] * k
    union = [0] * k
    for y in range(gt.shape[0]):
        for x in range(gt.shape[1]):
            g = int(gt[y, x])
            q = int(pred[y, x])
            if g == IGNORE_INDEX:
                continue
            if q == IGNORE_INDEX:
                union[g] += 1  # a miss charged to the true class only
            elif g == q:
                inter[g] += 1
                union[g] += 1
            else:
                union[g] += 1
                union[q] += 1
    per = np.array([inter[c] / union[c] if union[c] else np.nan for c in range(k)])
    present = [inter[c] / union[c] for c in range(k) if union[c]]
    return per, sum(present) / len(present)


def test_criterion_7_segmentation_metric_oracles():
    rng = np.random.default_rng(555)
    n_pairs = 0
    for _ in range(200):
        k = int(rng.integers(2, 7))
        h = int(rng.integers(1, 13))
        w = int(rng.integers(1, 13))
        gt = rng.integers(0, k, size=(h, w)).astype(np.int64)
        gt[rng.random((h, w)) < 0.25] = IGNORE_INDEX
        if (gt == IGNORE_INDEX).all():
            gt[0, 0] = 0
        pred = rng.integers(0, k, size=(h, w)).astype(np.int64)
        pred[rng.random((h, w)) < 0.1] = IGNORE_INDEX
        got_per, got_mean = miou(pred, gt, k)
        exp_per, exp_mean = _oracle_miou(pred, gt, k)
        assert np.array_equal(got_per, exp_per, equal_nan=True), (gt, pred)
        assert got_mean == exp_mean, (gt, pred)
        n_pairs += 1

    # leaving out nothing must reduce border miou to plain miou, exactly
    n_zero = 0
    for _ in range(20):
        k = 4
        gt = rng.integers(0, k, size=(9, 11)).astype(np.int64)
        pred = rng.integers(0, k, size=(9, 11)).astype(np.int64)
        assert border_miou(pred, gt, 0, k) == miou(pred, gt, k)[1]
        n_zero += 1

    # center masking only touches the centered round(f*h) x round(f*w) rect
    n_rect = 0
    for frac in ("1/3", "1/2", "2/3", "3/4"):
        f = Fraction(frac)
        for h, w in ((5, 7), (17, 23), (20, 30), (64, 64)):
            gt = rng.integers(0, 5, size=(h, w)).astype(np.int64)
            masked = mask_center(gt, frac)
            mh = int((f * h + Fraction(1, 2)).__floor__())
            mw = int((f * w + Fraction(1, 2)).__floor__())
            top, left = (h - mh) // 2, (w - mw) // 2
            rect = np.zeros((h, w), bool)
            rect[top:top + mh, left:left + mw] = True
            assert (masked[rect] == IGNORE_INDEX).all()
            assert np.array_equal(masked[~rect], gt[~rect])
            n_rect += 1

    _verdict(True, f"criterion 7: miou exact vs oracle on {n_pairs} random "
                   f"pairs; border f=0 equals miou on {n_zero} pairs; center "
                   f"mask confined to the rect in {n_rect} cases")


# ---------------------------------------------------------------------------
# Criterion 8: two-model mode equals mirrored four-model padding


def test_criterion_8_two_model_parity(trained_model, photo_eval_corpus):
    m = trained_model
    four = PadModel(left=m.left, right=m.left.copy(), top=m.top,
                    bottom=m.top.copy(), p=m.p, m=m.m)
    two = PadModel(left=m.left, right=None, top=m.top, bottom=None,
                   p=m.p, m=m.m, two_model_mode=True)
    checked = 0
    for img in photo_eval_corpus[:6]:
        for p in (1, m.p):
            a = ca_pad(img, four, p)
            b = ca_pad(img, two, p)
            assert a.shape == b.shape == (img.shape[0], img.shape[1] + 2 * p,
                                          img.shape[2] + 2 * p)
            assert np.array_equal(a, b)
            checked += 1
    _verdict(True, f"criterion 8: {checked} padded images bitwise identical "
                   f"between mirrored four-model and two-model modes")


# ---------------------------------------------------------------------------
# Criterion 9: the CLI is deterministic across repeated runs


def test_criterion_9_cli_determinism(tmp_path, monkeypatch):
    monkeypatch.delenv("CAPAD_THREADS", raising=False)
    from synthetic import photo_corpus

    corpus_dir = tmp_path / "corpus"
    corpus_dir.mkdir()
    for i, img in enumerate(photo_corpus(4, size=32, seed=5)):
        save_image(img, corpus_dir / f"img_{i}.png")

    def train(out):
        args = ["train", "--corpus", str(corpus_dir), "--out", str(out),
                "--p", "2", "--m", "6", "--epochs", "3", "--batch", "4",
                "--lr", "1e-3", "--seed", "5", "--depth", "1",
                "--base-channels", "4", "--loss-norm", "l2"]
        assert cli_main(args) == 0

    def eval_pad(model, out):
        args = ["eval-pad", "--corpus", str(corpus_dir), "--methods",
                "zero,replicate,ca", "--p-list", "1,2", "--crop", "24",
                "--m", "6", "--model", str(model), "--out", str(out)]
        assert cli_main(args) == 0

    out_a, out_b = tmp_path / "run_a", tmp_path / "run_b"
    train(out_a)
    train(out_b)
    # run_manifest.json embeds the --out path, so compare the artifacts
    model_files = ["left.capm", "right.capm", "top.capm", "bottom.capm",
                   "manifest.txt", "loss.csv"]
    for name in model_files:
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), name

    csv_a, csv_b = tmp_path / "metrics_a.csv", tmp_path / "metrics_b.csv"
    eval_pad(out_a, csv_a)
    eval_pad(out_a, csv_b)
    text = csv_a.read_text()
    assert text.splitlines()[0] == "method,p,psnr_db,mse,n_images"
    assert csv_a.read_bytes() == csv_b.read_bytes()

    _verdict(True, f"criterion 9: {len(model_files)} trained-bundle files and "
                   f"the metrics csv byte-identical across repeated runs "
                   f"({len(text.splitlines()) - 1} metric rows)")
