import math
import pathlib
import tempfile

import din

SMALL = """\
[split]
mode = U_DACZSL
examples_per_cell = 20
feature_dim = 12
semantic_dim = 8
[model]
hidden_dim = 16
text_hidden_dim = 16
embed_dim = 8
dim_per_token = 4
disc_hidden_dim = 16
[train]
main_epochs = 2
warmup_epochs = 1
k_shot = 2
prompt_epochs = 2
[run]
seeds = 0
"""


def check_matrix():
    m = din.AccuracyMatrix([[0.9, 0.2, 0.1], [0.8, 0.7, 0.3], [0.6, 0.5, 0.4]])
    assert m.size == 3
    assert m[1, 0] == 0.8
    assert math.isclose(din.last_seen(m), 0.5)
    ms = (0.9 + (0.8 + 0.7) / 2 + 0.5) / 3
    mu = ((0.2 + 0.1) / 2 + 0.3) / 2
    assert math.isclose(din.mean_seen(m), ms)
    assert math.isclose(din.mean_unseen(m), mu)
    assert math.isclose(din.backward_transfer(m), ((0.6 - 0.9) + (0.5 - 0.7)) / 2)
    stats = m.metrics()
    assert math.isclose(stats["mH"], 2 * ms * mu / (ms + mu))
    try:
        din.AccuracyMatrix([[0.1, 0.2]])
    except ValueError:
        pass
    else:
        raise AssertionError("ragged matrix accepted")


def check_suauc():
    area, curve = din.suauc([0, 1], [True, False], [[1.0, 0.0], [0.0, 1.0]], [0, 1])
    assert math.isclose(area, 1.0)
    assert len(curve) == 201
    assert math.isclose(din.cosine_similarity([1.0, 0.0], [2.0, 0.0]), 1.0)
    assert math.isclose(din.log_softmax_nll([0.0, 0.0, 0.0], 1), math.log(3))


def check_run():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = pathlib.Path(tmp, "small.ini")
        cfg.write_text(SMALL)
        out = pathlib.Path(tmp, "out")
        reports = din.run_experiment(str(cfg), out=str(out))
        assert len(reports) == 1 and reports[0].completed
        assert 0.0 <= reports[0].metrics["LS"] <= 100.0
        matrix = din.AccuracyMatrix.read_csv(str(out / "matrix_0.csv"))
        assert matrix.size == 3
        assert (out / "aggregate.json").exists()


if __name__ == "__main__":
    check_matrix()
    check_suauc()
    check_run()
    print("smoke ok")
