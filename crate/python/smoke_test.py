"""Smoke test for the tsembed extension module.

Build first:  cargo build --release -p test-embed-py
Then run:     python3 python/smoke_test.py
"""

import importlib.machinery
import importlib.util
import math
import os
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    try:
        import tsembed  # installed, e.g. via maturin
        return tsembed
    except ImportError:
        pass
    candidates = [os.environ.get("TSEMBED_LIB")] + [
        str(ROOT / "target" / profile / name)
        for profile in ("release", "debug")
        for name in ("libtsembed.so", "libtsembed.dylib", "tsembed.dll")
    ]
    for path in filter(None, candidates):
        if os.path.exists(path):
            loader = importlib.machinery.ExtensionFileLoader("tsembed", path)
            spec = importlib.util.spec_from_file_location("tsembed", path, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("tsembed library not found; run `cargo build --release -p test-embed-py`")


def close(a, b, tol):
    return abs(a - b) <= tol


def main():
    ts = load_module()

    # Closed-form loss values.
    row = [0.3, -1.2, 0.5]
    assert close(ts.instance_loss([row], [row], [row] * 7), math.log(8), 1e-5)
    col = [[0.4], [-1.1], [2.0]]
    assert close(ts.feature_loss(col, col, col), math.log(2), 1e-5)
    tp = [[0.2, -0.7, 1.3, 0.1]]
    assert close(ts.text_alignment(tp, tp), -1.0, 1e-6)

    vocab = ts.Vocab.builtin(16)
    assert len(vocab) == 512 and vocab.width == 16
    protos = vocab.pca_prototypes(4)
    assert len(protos) == 4 and len(protos[0]) == 16
    for p in protos:
        assert close(sum(x * x for x in p), 1.0, 1e-5)
    word = vocab.tokens[5]
    hits = vocab.nearest(vocab.embedding(word), 3)
    assert hits[0][0] == word and close(hits[0][1], 1.0, 1e-5)
    coords = ts.prototype_coordinates(protos[0], protos)
    assert close(coords[0], 1.0, 1e-5)

    lm = ts.FrozenLM.builtin(16)
    x = [[0.1 * (i + j) for j in range(16)] for i in range(5)]
    y = lm.forward(x)
    x[4][0] += 1.0
    assert lm.forward(x)[:4] == y[:4], "frozen LM must be causal"

    with tempfile.TemporaryDirectory() as d:
        d = Path(d)
        assert ts.gen_data("cls3", d / "cls3.csv", seed=1) == 375
        (d / "run.cfg").write_text(
            "data = cls3.csv\nenc.blocks = 2\nenc.hidden = 8\nenc.embed = 16\n"
            "queue_capacity = 64\nprototypes.k = 4\nphase1.epochs = 1\nphase1.anchors = 64\n"
            "prompt.length = 2\nphase2.epochs = 2\ntoken.max = 2\n"
        )
        p1, ev1 = ts.train_encoder(d / "run.cfg")
        assert p1.phase == 1 and ev1[0]["event"] == "phase1_epoch"
        enc = p1.encoder()
        e = enc.encode([[math.sin(t / 3) for t in range(20)]])
        assert len(e) == enc.embed_dim == 16
        steps = enc.encode_steps([[math.sin(t / 3) for t in range(20)]])
        assert all(close(steps[m][-1], e[m], 1e-5) for m in range(16))

        p2, ev2 = ts.train_prompt(d / "run.cfg", p1)
        assert p2.phase == 2 and ev2[-1]["event"] == "held_out"
        assert p2.checksum("enc.") == p1.checksum("enc.")
        p2.save(d / "p2.tste")
        again = ts.Checkpoint.load(d / "p2.tste")
        assert again.checksum() == p2.checksum()
        report = again.evaluate(d / "cls3.csv")
        assert report["task"] == "classify" and report["samples"] == 375
        words = p1.match_words(d / "cls3.csv", vocab, 2)
        assert words["tokens"] and len(words["tokens"][0]["words"]) == 2

        try:
            ts.Checkpoint.load(d / "missing.tste")
        except IOError as err:
            assert "missing.tste" in str(err)
        else:
            raise AssertionError("loading a missing checkpoint must fail")
        try:
            p1.evaluate(d / "cls3.csv")
        except ValueError:
            pass
        else:
            raise AssertionError("phase-1 checkpoints cannot be evaluated")

    print("tsembed smoke test passed")


if __name__ == "__main__":
    main()
