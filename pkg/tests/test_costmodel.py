import pytest

from raglab.costmodel import METHODS, CostParams, cost_calc, cost_table, translate_flops


PAPER = CostParams()  # |d|=600, |q|=100, c=3, Qwen-scale dims


def test_ffn_context_ratio_is_19():
    out = cost_calc(PAPER, "rag")
    assert out["ffn_context_ratio"] == pytest.approx(19.0)
    assert out["attn_context_ratio"] == pytest.approx(361.0)
    assert any("361" in n and "271" in n for n in out["notes"])


def test_rag_inference_formula_independent_reimplementation():
    p = PAPER
    h = p.hidden
    ctx = p.c * p.d + p.q
    expected = p.resp * (ctx ** 2 * h + ctx * h ** 2)
    assert cost_calc(p, "rag")["inference"] == pytest.approx(expected)


def test_prag_formulas_independent_reimplementation():
    p = PAPER
    h = p.hidden
    out = cost_calc(p, "prag")
    assert out["inference"] == pytest.approx(p.resp * (p.q ** 2 * h + p.q * h ** 2))
    expected_train = (p.m_test * (9 * p.d ** 2 * h + 3 * p.d * h ** 2)
                      + p.m_test * p.e1 * (81 * p.d ** 2 * h + 9 * p.d * h ** 2))
    assert out["training"] == pytest.approx(expected_train)
    assert out["storage_params"] == p.m_test * 6 * p.layers * p.r * (p.hidden + p.ffn)


def test_dyprag_formulas_independent_reimplementation():
    p = PAPER
    h = p.hidden
    out = cost_calc(p, "dyprag")
    encode = p.c * (p.d ** 2 * h + p.d * h ** 2)
    translate = p.c * p.p * (h + 1 + h * p.r)
    decode = p.resp * (p.q ** 2 * h + p.q * h ** 2)
    assert out["inference"] == pytest.approx(encode + translate + decode)
    assert out["inference_encode"] == pytest.approx(encode)
    assert out["inference_translate"] == pytest.approx(translate)
    expected_train = (p.n_pairs * (9 * p.d ** 2 * h + 3 * p.d * h ** 2)
                      + p.n_pairs * p.e1 * (81 * p.d ** 2 * h + 9 * p.d * h ** 2)
                      + p.n_pairs * p.e2 * (9 * (p.qa + p.d) ** 2 * h
                                            + 3 * (p.qa + p.d) * h ** 2)
                      + p.p * (h + 1 + h * p.r))
    assert out["training"] == pytest.approx(expected_train)
    L, hh, k = p.layers, p.hidden, p.ffn
    assert out["storage_params"] == 3 * L * (p.p * hh * p.r + 2 * p.p * (hh + 1) + p.p * k * p.r)
    assert out["temporal_storage_params"] == p.n_pairs * 6 * L * p.r * (hh + k)
    assert any("temporal" in n for n in out["notes"])


def test_paper_storage_figures():
    out = cost_calc(CostParams(p=2), "dyprag")
    assert out["storage_params"] == 4_043_088
    assert abs(out["storage_bytes"] / (1024 * 1024) - 7.71) < 0.01
    prag_one = cost_calc(CostParams(m_test=1), "prag")
    assert prag_one["storage_params"] == 3_526_656
    assert abs(prag_one["storage_bytes"] / (1024 * 1024) - 6.73) < 0.01


def test_c_zero_degenerates_rag_to_prag_inference():
    p = CostParams(c=0)
    assert cost_calc(p, "rag")["inference"] == pytest.approx(cost_calc(p, "prag")["inference"])


def test_adapters_per_question_scales_prag_storage():
    base = cost_calc(CostParams(adapters_per_question=1), "prag")["storage_params"]
    triple = cost_calc(CostParams(adapters_per_question=3), "prag")["storage_params"]
    assert triple == 3 * base


def test_validation_and_table():
    with pytest.raises(ValueError):
        cost_calc(PAPER, "flare")
    with pytest.raises(ValueError):
        CostParams(d=-1)
    table = cost_table(PAPER)
    assert set(table) == set(METHODS)
    assert table["rag"]["training"] == 0.0
    assert translate_flops(2, 1536, 2) == 2 * (1536 + 1 + 1536 * 2)
