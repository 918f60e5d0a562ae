"""Smoke test for the compiled extension.

Build and run:
    cargo build -p colorvar-py --release --features extension-module
    cp target/release/libcolorvar.so python/colorvar.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import colorvar  # noqa: E402

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def main():
    truth = [0, 0, 1, 1]
    assert colorvar.ari(truth, [5, 5, 7, 7]) == 1.0
    assert abs(colorvar.fms(truth, [0, 0, 0, 0]) - 2 / math.sqrt(12)) < 1e-12
    assert abs(colorvar.cscore(0.69, 0.71) - 0.700) <= 0.001
    assert colorvar.cgacc(truth, [0, 0, 1, 2]) == 1.0
    assert colorvar.cgacc(truth, [0, 0, 0, 1]) == 0.0

    points = [[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]]
    assert colorvar.ward(points, 1.0) == [0, 0, 1, 1]
    assert colorvar.dbscan(points, 0.5, 2) == [0, 0, 1, 1]

    report = colorvar.evaluate(["a", "a", "b", None], [0, 0, 1, -1])
    assert report.cgacc == 1.0 and report.n_predicted_clusters == 3, report

    try:
        colorvar.ari([0, 1], [0])
    except ValueError:
        pass
    else:
        raise AssertionError("length mismatch accepted")

    config = os.path.join(ROOT, "configs", "desk.toml")
    with tempfile.TemporaryDirectory() as out:
        run = colorvar.run_experiment(config, out_dir=out, method="pbcnet_vert")
        assert os.path.exists(os.path.join(out, "report.json"))
        assert 0.0 <= run.cscore <= 1.0
        print(run)
    print("smoke test ok")


if __name__ == "__main__":
    main()
