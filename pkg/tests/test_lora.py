import numpy as np
import pytest

from raglab import model as lm
from raglab.autodiff import Tensor
from raglab.lora import (BankFormatError, LoraAdapter, LoraConfig,
                         average_adapters, init_adapter, load_bank,
                         merged_delta, param_count, save_bank, storage_bytes)


def toy_config():
    return lm.ModelConfig(layers=2, hidden=8, ffn=16, heads=2, vocab=11, max_seq=24)


def randomized(adapter, seed):
    rng = np.random.default_rng(seed)
    for layer in adapter.layers:
        for m in layer:
            layer[m][0].data[:] = rng.normal(size=layer[m][0].shape)
            layer[m][1].data[:] = rng.normal(size=layer[m][1].shape)
    return adapter


def test_init_zero_delta_and_seeding():
    cfg = toy_config()
    a1 = init_adapter(LoraConfig(), cfg, seed=4)
    a2 = init_adapter(LoraConfig(), cfg, seed=4)
    for l1, l2 in zip(a1.layers, a2.layers):
        for m in l1:
            assert np.array_equal(l1[m][0].data, l2[m][0].data)
            assert np.array_equal(l1[m][1].data, l2[m][1].data)
            assert np.all(l1[m][0].data == 0.0)
    assert np.max(np.abs(merged_delta(a1, 0, "gate").data)) == 0.0


def test_paper_scale_param_count():
    cfg = lm.ModelConfig(layers=28, hidden=1536, ffn=8960, heads=12,
                         vocab=151936, max_seq=4096)
    count = param_count(cfg, r=2)
    assert count == 3_526_656
    assert storage_bytes(count, 16) == 7_053_312
    mib = storage_bytes(count, 16) / (1024 * 1024)
    assert abs(mib - 6.73) < 0.01


def test_param_count_closed_form():
    cfg = lm.ModelConfig(layers=4, hidden=64, ffn=128, heads=4, vocab=50, max_seq=64)
    assert param_count(cfg, 2) == 9216  # 6*4*2*(64+128)
    assert param_count(cfg, 0) == 0
    # The accounting form counts each projection pair twice over the dense
    # (B, A) floats; the physical adapter holds exactly half.
    adapter = init_adapter(LoraConfig(r=2), cfg, seed=0)
    assert adapter.scalar_count() == param_count(cfg, 2) // 2 == 4608


def test_merged_delta_outer_product():
    cfg = toy_config()
    adapter = init_adapter(LoraConfig(r=1, alpha=1.0), cfg, seed=0)
    b, a = adapter.layers[0]["gate"]
    b.data[:] = 0.0
    b.data[0, 0] = 1.0
    a.data[:] = 0.0
    a.data[0, 0] = 1.0
    delta = merged_delta(adapter, 0, "gate").data
    expected = np.zeros_like(delta)
    expected[0, 0] = 1.0
    assert np.array_equal(delta, expected)


def test_merged_delta_matches_naive_triple_loop():
    cfg = toy_config()
    adapter = randomized(init_adapter(LoraConfig(r=3, alpha=32.0), cfg, seed=1), seed=2)
    b, a = adapter.layers[1]["down"]
    out = merged_delta(adapter, 1, "down").data
    naive = np.zeros((b.shape[0], a.shape[1]))
    for i in range(b.shape[0]):
        for j in range(a.shape[1]):
            acc = 0.0
            for r in range(b.shape[1]):
                acc += b.data[i, r] * a.data[r, j]
            naive[i, j] = acc * (32.0 / 3)
    assert np.allclose(out, naive, atol=1e-12)


def test_merged_delta_range_errors():
    cfg = toy_config()
    adapter = init_adapter(LoraConfig(), cfg, seed=0)
    with pytest.raises(IndexError):
        merged_delta(adapter, 99, "gate")
    with pytest.raises(KeyError):
        merged_delta(adapter, 0, "qkv")


def test_average_adapters_identities():
    cfg = toy_config()
    a = randomized(init_adapter(LoraConfig(), cfg, seed=0), seed=3)
    avg_single = average_adapters([a])
    avg_double = average_adapters([a, a])
    neg = a.copy()
    for layer in neg.layers:
        for m in layer:
            layer[m][0].data *= -1
            layer[m][1].data *= -1
    cancel = average_adapters([a, neg])
    for li in range(cfg.layers):
        for m in ("gate", "up", "down"):
            assert np.array_equal(avg_single.layers[li][m][0].data, a.layers[li][m][0].data)
            assert np.array_equal(avg_double.layers[li][m][1].data, a.layers[li][m][1].data)
            assert np.all(cancel.layers[li][m][0].data == 0.0)
            assert np.all(cancel.layers[li][m][1].data == 0.0)
    with pytest.raises(ValueError):
        average_adapters([])


def test_averaging_commutes_with_merging():
    # mean of merged deltas == merged delta of mean (bilinearity does not hold
    # for B@A in general, so this checks the contract on B,A averaged jointly
    # only in the delta-linear case: identical A matrices).
    cfg = toy_config()
    a1 = init_adapter(LoraConfig(r=2, alpha=32.0), cfg, seed=5)
    a2 = a1.copy()
    rng = np.random.default_rng(8)
    for ad in (a1, a2):
        for layer in ad.layers:
            for m in layer:
                layer[m][0].data[:] = rng.normal(size=layer[m][0].shape)
    avg = average_adapters([a1, a2])
    for li in range(cfg.layers):
        for m in ("gate", "up", "down"):
            d1 = merged_delta(a1, li, m).data
            d2 = merged_delta(a2, li, m).data
            davg = merged_delta(avg, li, m).data
            assert np.allclose(davg, (d1 + d2) / 2, atol=1e-12)


def test_bank_roundtrip(tmp_path):
    cfg = toy_config()
    adapters = {
        "doc-a": randomized(init_adapter(LoraConfig(), cfg, seed=0), 10),
        "doc-b": randomized(init_adapter(LoraConfig(), cfg, seed=1), 11),
    }
    path = tmp_path / "bank.dypl"
    nbytes = save_bank(adapters, cfg, path)
    assert nbytes == path.stat().st_size
    loaded = load_bank(path, cfg)
    assert set(loaded) == {"doc-a", "doc-b"}
    for key in adapters:
        for la, lb in zip(adapters[key].layers, loaded[key].layers):
            for m in la:
                assert np.array_equal(lb[m][0].data, la[m][0].data.astype(np.float32).astype(np.float64))
                assert np.array_equal(lb[m][1].data, la[m][1].data.astype(np.float32).astype(np.float64))


def test_bank_empty_and_size_arithmetic(tmp_path):
    cfg = toy_config()
    path = tmp_path / "empty.dypl"
    save_bank({}, cfg, path)
    assert load_bank(path, cfg) == {}
    header = path.stat().st_size

    n = 7
    adapters = {f"d{i}": init_adapter(LoraConfig(), cfg, seed=i) for i in range(n)}
    path2 = tmp_path / "many.dypl"
    save_bank(adapters, cfg, path2)
    scalars = adapters["d0"].scalar_count()
    per_record = 4 + 2 + 4 + 4 * scalars  # id len + id + rank + floats
    assert path2.stat().st_size == header + n * per_record


def test_bank_error_paths(tmp_path):
    cfg = toy_config()
    bad = tmp_path / "bad.dypl"
    bad.write_bytes(b"WHAT" + b"\x00" * 8)
    with pytest.raises(BankFormatError):
        load_bank(bad, cfg)

    path = tmp_path / "trunc.dypl"
    save_bank({"doc": init_adapter(LoraConfig(), cfg, seed=0)}, cfg, path)
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(BankFormatError):
        load_bank(path, cfg)


def test_serialized_scalars_track_accounting_form(tmp_path):
    cfg = toy_config()
    adapter = init_adapter(LoraConfig(), cfg, seed=0)
    path = tmp_path / "one.dypl"
    save_bank({"d": adapter}, cfg, path)
    empty = tmp_path / "zero.dypl"
    save_bank({}, cfg, empty)
    float_bytes = path.stat().st_size - empty.stat().st_size - (4 + 1 + 4)
    assert float_bytes // 4 == adapter.scalar_count()
    assert 2 * adapter.scalar_count() == param_count(cfg, adapter.config.r)
