import pytest

from hpnet.bench import bench_inference
from hpnet.model import ModelConfig, init_weights

CFG = ModelConfig()


@pytest.fixture(scope="module")
def report():
    return bench_inference(init_weights(CFG, seed=0), CFG, (1, 10, 100, 1000), reps=5, warmup=1)


def test_one_row_per_level(report):
    assert [r.level for r in report.rows] == [1, 10, 100, 1000]
    for r in report.rows:
        assert r.time_per_packet == r.total_time / r.level
        assert r.reps >= 5 and r.total_time > 0
    assert report.row(100).level == 100
    with pytest.raises(KeyError):
        report.row(7)


def test_activation_memory_grows_then_plateaus_at_the_tile(report):
    mem = [r.peak_memory for r in report.rows]
    assert all(a <= b for a, b in zip(mem, mem[1:]))
    # below the tile size activations scale with the batch
    assert mem[1] > 4 * mem[0]
    # above it only the logits buffer grows
    assert mem[3] < 1.1 * mem[2]


def test_batching_amortizes_per_packet_time(report):
    assert report.row(100).time_per_packet < report.row(1).time_per_packet


def test_min_time_extends_reps():
    r = bench_inference(init_weights(CFG, seed=0), CFG, (1,), reps=1, warmup=0, min_time=0.05)
    assert r.rows[0].reps > 1


def test_outputs_and_validation(report):
    lines = report.csv().splitlines()
    assert lines[0].startswith("level,") and len(lines) == 5
    assert float(lines[2].split(",")[2]) == pytest.approx(report.row(10).time_per_packet * 1e3, rel=1e-5)
    assert len(report.table().splitlines()) == 5
    assert report.to_dict()["rows"][0]["level"] == 1
    with pytest.raises(ValueError):
        bench_inference(init_weights(CFG), CFG, (0,))
