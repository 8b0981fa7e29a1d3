"""Smoke test for the fitdit Python extension.

Build and copy the module first:

    cargo build --release -p fitdit-py --features extension-module
    cp target/release/libfitdit_py.so python/fitdit.so

then run `python3 python/smoke_test.py`.
"""

import json
import math
import os
import random
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import fitdit  # noqa: E402


def close(a, b, tol):
    return all(abs(x - y) <= tol for x, y in zip(a, b))


def check_spectral():
    rng = random.Random(0)
    w, h = 8, 4
    data = [rng.uniform(-1, 1) for _ in range(w * h)]
    fast = fitdit.fft2d(data, w, h)
    slow = fitdit.dft2d_bruteforce(data, w, h)
    assert all(abs(a[0] - b[0]) < 1e-9 and abs(a[1] - b[1]) < 1e-9 for a, b in zip(fast, slow))
    other = [rng.uniform(-1, 1) for _ in range(w * h)]
    d = fitdit.spectral_distance(data, other, [1.0] * (w * h), w, h)
    l2 = sum((a - b) ** 2 for a, b in zip(data, other))
    assert math.isclose(d, w * h * l2, rel_tol=1e-9)


def check_rflow_and_codec():
    rng = random.Random(1)
    z0 = [rng.uniform(-1, 1) for _ in range(3 * 8 * 8)]
    eps = [rng.gauss(0, 1) for _ in z0]
    zt = fitdit.forward_interpolate(z0, eps, 0.3)
    assert close(fitdit.estimate_clean(zt, eps, 0.3), z0, 1e-5)
    tokens = fitdit.patchify(z0, 8, 8, 2)
    back = fitdit.unpatchify(tokens, 8, 8, 2)
    assert fitdit.patchify(back, 8, 8, 2) == tokens and close(back, z0, 1e-6)


def check_attention():
    rng = random.Random(2)
    rows = lambda: [[rng.gauss(0, 1) for _ in range(4)] for _ in range(3)]
    q, k, v = rows(), rows(), rows()
    plain = fitdit.attention_hybrid(q, k, v, 2)
    dup = fitdit.attention_hybrid(q, k, v, 2, (k, v))
    assert all(close(a, b, 1e-9) for a, b in zip(plain, dup))


def check_analysis():
    arch = {
        "name": "two-stage",
        "input_h": 64,
        "input_w": 64,
        "stages": [
            {"divisor": 1, "blocks": 1, "width": 8, "attention": True, "mlp_ratio": 4},
            {"divisor": 2, "blocks": 1, "width": 16, "attention": True, "mlp_ratio": 4},
        ],
    }
    table = json.loads(fitdit.attention_param_ratio(json.dumps(arch)))
    shares = [r["share"] for r in table["rows"]]
    assert close(shares, [0.2, 0.8], 1e-12), shares
    assert len(fitdit.reference_archs()) == 3


def check_pipeline(tmp):
    data = os.path.join(tmp, "data")
    manifest = json.loads(fitdit.generate_dataset(data, 5, 32, 32, seed=3))
    assert manifest["count"] == 5
    cat = manifest["samples"][0]["category"]
    parsing = os.path.join(data, "parsing", "000000.png")
    pose = os.path.join(data, "pose", "000000.json")
    w, h, mask, prov = fitdit.agnostic_mask(parsing, pose, cat, seed=1)
    assert (w, h) == (32, 32) and any(mask)
    assert fitdit.agnostic_mask(parsing, pose, cat, seed=1)[2] == mask
    assert json.loads(prov)["category"] == cat

    cfg = fitdit.ModelConfig(h=32, w=32, patch=4, width=16, depth=1, heads=2, d_emb=8, mlp_ratio=2)
    g = os.path.join(tmp, "g.fdtk")
    d = os.path.join(tmp, "d.fdtk")
    losses = fitdit.train_garment(data, g, cfg, steps=2, batch=1, lr=1e-3)
    assert len(losses) == 2 and all(math.isfinite(x) for x in losses)
    losses = fitdit.train_tryon(data, g, d, steps=2, batch=1, lr=1e-3)
    assert len(losses) == 2 and all(math.isfinite(x) for x in losses)
    out = os.path.join(tmp, "out.png")
    person = os.path.join(data, "person", "000000.png")
    garment = os.path.join(data, "garment", "000001.png")
    fitdit.tryon(person, garment, pose, parsing, cat, d, g, out, steps=2, seed=4)
    assert 0.0 < fitdit.ssim(out, person) <= 1.0
    assert fitdit.ssim(person, person) == 1.0


def main():
    check_spectral()
    check_rflow_and_codec()
    check_attention()
    check_analysis()
    with tempfile.TemporaryDirectory() as tmp:
        check_pipeline(tmp)
    print("fitdit python smoke test: ok")


if __name__ == "__main__":
    main()
