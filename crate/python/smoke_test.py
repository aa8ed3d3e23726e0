"""Smoke test for the lvnet extension module.

Build and install first:  pip install maturin && maturin develop -m crates/python/Cargo.toml
"""

import tempfile

import lvnet


def main():
    assert lvnet.compressed_index(100, 16) == 6
    assert lvnet.extra_params(1, 3, 16) == 768
    assert lvnet.extra_flops(32, 32, 1, 3, 16, 2) == 887_808
    assert lvnet.pixel_bits(16) == 12

    t = lvnet.Tables.full(2, seed=1)
    assert t.shape == [3, 256, 2] and t.output_channels == 6
    assert all(-1.0 <= v <= 1.0 for v in t.entries())
    values, shape = t.lookup(bytes([7] * 12), 1, 2, 2)
    assert shape == [1, 6, 2, 2]
    assert values[0] == t.get(0, 7, 0) and values[4] == t.get(0, 7, 1)

    ds = lvnet.Dataset.synthetic("striped", 3, classes=4, side=8)
    assert len(ds) == 12 and ds.classes == 4 and len(ds.image(0)) == 3 * 64

    report = lvnet.gradcheck(table="compressed", cmp_rate=16)
    assert report["passed"], report

    with tempfile.TemporaryDirectory() as out:
        settings = {"dataset": "synthetic:separable", "epochs": 3, "cmp_rate": 4, "table": "compressed", "out": out}
        trained = lvnet.train(settings)
        again = lvnet.evaluate(f"{out}/checkpoint.lvnc", settings)
        assert trained["test_accuracy"] == again["test_accuracy"], (trained, again)

    print("smoke test passed:", report, trained)


if __name__ == "__main__":
    main()
