"""Smoke test for the `lcx` Python module.

Build and install first:

    pip install --no-build-isolation ./crates/py

Then run from the repository root:

    python3 python/smoke_test.py            # trains the smoke config into a temp dir
    python3 python/smoke_test.py runs/smoke # or reuses an existing run
"""

import array
import itertools
import math
import pathlib
import random
import sys
import tempfile

import lcx

ROOT = pathlib.Path(__file__).resolve().parent.parent


def check(cond, msg):
    if not cond:
        raise AssertionError(msg)
    print(f"ok  {msg}")


def synthetic():
    img, label = lcx.generate_sample(lcx.Factors(0.3, texture_seed=5), 32)
    check(img.resolution == 32 and label == 1, "narrow gap sample is labelled 1")
    gap = img.measure_gap()
    check(gap is not None and abs(gap - 0.3) < 0.06, f"measure_gap recovers 0.3 (got {gap:.3f})")
    again = lcx.Image.from_png(img.to_png())
    check(again.resolution == 32, "png round trip keeps the size")

    ds = lcx.generate_dataset(40, 8, 8, 3, 32)
    labels = [label for _, label, _ in ds["train"]]
    check(len(ds["train"]) == 40 and 0 < sum(labels) < 40, "dataset has both labels")
    for _, label, factors in ds["test"]:
        check(label == factors.label(), f"label follows gap_width {factors.gap_width:.3f}")
        break

    try:
        lcx.generate_sample(lcx.Factors(1.5), 32)
    except lcx.LcxError as e:
        check("gap_width" in str(e), "out-of-range factor raises LcxError")
    else:
        raise AssertionError("gap_width 1.5 accepted")


def metrics():
    scores = [0.1, 0.4, 0.4, 0.8, 0.3]
    labels = [0, 1, 0, 1, 1]
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    pairs = [(p > n) + 0.5 * (p == n) for p, n in itertools.product(pos, neg)]
    check(lcx.auc(scores, labels) == sum(pairs) / len(pairs), "auc matches pairwise count")
    check(lcx.spearman([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0, "spearman of a monotone pair is 1")


def direction():
    rng = random.Random(0)
    truth = [1.5, -2.0, 0.5]
    latents, soft = [], []
    for _ in range(200):
        w = [rng.uniform(-1, 1) for _ in truth]
        z = sum(a * x for a, x in zip(truth, w))
        latents.append(w)
        soft.append(0.9 if rng.random() < 1 / (1 + math.exp(-z)) else 0.1)
    d = lcx.fit_direction(latents, soft)
    cos = sum(a * b for a, b in zip(d.alpha_unit, truth)) / math.sqrt(sum(t * t for t in truth))
    check(cos > 0.9, f"fitted direction aligns with the truth (cos {cos:.3f})")
    w = latents[0]
    check(d.shift(w, 0.0) == array.array("f", w).tolist(), "zero step returns w")
    scores = [d.predict(d.shift(w, lam)) for lam in lcx.default_lambdas()]
    check(all(b > a for a, b in zip(scores, scores[1:])), "f~ increases along the direction")


def bundle(run_dir):
    b = lcx.Bundle.load(run_dir / "bundle")
    print(f"    {b!r}")
    rng = random.Random(1)
    noise = [[rng.gauss(0, 1) for _ in range(b.latent_dim)] for _ in range(3)]
    for w in b.map_noise(noise):
        frames = b.traverse(w)
        ident = next(f for f in frames if f["lambda"] == 0.0)
        check(ident["image"] == b.generate(w), "lambda = 0 frame is G(w) exactly")
        scores = [f["latent_score"] for f in frames]
        check(all(y > x for x, y in zip(scores, scores[1:])), "latent scores increase with lambda")

    img = b.generate(b.map_noise(noise[:1])[0])
    exp = b.explain(img, [-1.0, 0.0, 1.0])
    check(len(exp["frames"]) == 3 and len(exp["latent"]) == b.latent_dim, "explain returns three frames")
    check(exp["latent"] == b.encode(img), "explain starts from E(x)")
    heat = b.gradcam(img)
    check(len(heat) == b.resolution and max(map(max, heat)) <= 1.0, "gradcam map is normalized")
    try:
        b.traverse(noise[0][:-1])
    except lcx.LcxError as e:
        check("dimension" in str(e), "wrong latent size raises LcxError")
    else:
        raise AssertionError("short latent accepted")


def main():
    synthetic()
    metrics()
    direction()
    if len(sys.argv) > 1:
        bundle(pathlib.Path(sys.argv[1]))
        return
    with tempfile.TemporaryDirectory() as tmp:
        out = pathlib.Path(tmp) / "smoke"
        ran = lcx.run_pipeline(ROOT / "configs" / "smoke.json", out)
        check(all(o == "ran" for _, o in ran), f"smoke pipeline ran {len(ran)} stages")
        again = lcx.run_pipeline(ROOT / "configs" / "smoke.json", out)
        check(all(o == "skipped" for _, o in again), "second run skips every stage")
        bundle(out)
    print("python smoke test passed")


if __name__ == "__main__":
    main()
