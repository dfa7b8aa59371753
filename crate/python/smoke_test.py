"""Smoke test for the texfv_py extension module.

Builds the extension in release mode, copies it next to this script and
exercises each exposed type. Run from anywhere:

    python3 python/smoke_test.py
"""

import math
import os
import random
import shutil
import subprocess
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.dirname(HERE)


def build():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "texfv-python", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    target = os.environ.get("CARGO_TARGET_DIR", os.path.join(ROOT, "target"))
    for name in ("libtexfv_py.so", "libtexfv_py.dylib"):
        lib = os.path.join(target, "release", name)
        if os.path.exists(lib):
            shutil.copyfile(lib, os.path.join(HERE, "texfv_py.so"))
            return
    sys.exit("extension library not found under " + target)


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    if "--no-build" not in sys.argv:
        build()
    sys.path.insert(0, HERE)
    import texfv_py as tf

    rng = random.Random(0)

    x = [rng.uniform(-2, 2) for _ in range(64)]
    y = [rng.uniform(-2, 2) for _ in range(64)]
    dot = sum(a * b for a, b in zip(tf.phi(x), tf.phi(y)))
    assert close(dot, tf.bhattacharyya(x, y), 1e-10)
    n = tf.l2_normalize(tf.power_normalize(x))
    assert close(math.sqrt(sum(v * v for v in n)), 1.0, 1e-10)
    assert tf.l2_normalize([0.0, 0.0]) == [0.0, 0.0]

    rows = [[rng.gauss(-3, 1), rng.gauss(0, 1)] for _ in range(200)]
    rows += [[rng.gauss(3, 1), rng.gauss(1, 1)] for _ in range(200)]
    gmm = tf.GaussianMixture.fit(rows, 2, seed=1)
    assert close(sum(gmm.weights), 1.0, 1e-9)
    assert sorted(round(m) for m in gmm.means[::2]) == [-3, 3]
    fv = gmm.fisher_vector(rows[:50])
    assert len(fv) == 2 * (2 * 2 + 1)

    ae = tf.Autoencoder(in_channels=1, levels=1, base_channels=4, epochs=3, seed=2)
    img = tf.Tensor([1, 16, 16], [rng.random() for _ in range(256)])
    assert ae.reconstruct(img).shape == [1, 16, 16]
    assert len(ae.ssl_vector(img)) == 8
    losses = ae.train([img])
    assert len(losses) == 3 and losses[-1] < losses[0]

    feats = [tf.phi([1.0, 0.1, 0.0]), tf.phi([0.9, 0.0, 0.1]), tf.phi([0.0, 0.1, 1.0]), tf.phi([0.1, 0.0, 0.9])]
    svm = tf.LinearSvm.train(feats, [0, 0, 1, 1], c=10.0)
    assert svm.classes == [0, 1] and svm.dim == 3
    assert svm.predict(tf.phi([1.0, 0.0, 0.0]))[0] == 0
    assert svm.predict(tf.phi([0.0, 0.0, 1.0]))[0] == 1

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "x.tfv")
        tf.write_tfv(path, [(0, img), (3, tf.Tensor([], [1.5]))])
        back = tf.read_tfv(path)
        assert [t for t, _ in back] == [0, 3]
        assert back[0][1].tolist() == img.tolist()
        assert back[1][1].shape == []

        try:
            tf.read_tfv(path + ".missing")
            raise AssertionError("missing file accepted")
        except OSError:
            pass

        corpus = os.path.join(tmp, "corpus")
        assert tf.write_synthetic(corpus, per_class=6, size=16, seed=4) == 24
        cfg = os.path.join(tmp, "run.cfg")
        with open(cfg, "w") as f:
            f.write(
                "dataset.root = corpus\n"
                "dataset.width = 16\n"
                "dataset.color = gray\n"
                "protocol.rounds = 2\n"
                "ae.levels = 1\n"
                "ae.base_channels = 4\n"
                "ae.epochs = 2\n"
                "features.layers = 1\n"
                "features.dim = 4\n"
                "gmm.k = 2\n"
            )
        report = tf.run_pipeline(cfg, {"seed": "5", "variant": "fvae"})
        assert report["variant"] == "FVAE"
        assert report["descriptor_len"] == 2 * 9 + 8
        assert len(report["round_accuracy"]) == 2
        assert 0.0 <= report["accuracy"][0] <= 1.0
        assert report == tf.run_pipeline(cfg, {"seed": "5", "variant": "fvae"})

        try:
            tf.run_pipeline(cfg, {"gmm.k": "zero"})
            raise AssertionError("bad override accepted")
        except tf.TexfvError as e:
            assert "gmm.k" in str(e)

        blob = tf.Bundle.from_bytes(b"TFVB\x01\x00\x00\x00\x00\x00\x00\x00")
        assert blob.stages == [] and blob.to_bytes().startswith(b"TFVB")

    print("texfv_py smoke test passed")


if __name__ == "__main__":
    main()
