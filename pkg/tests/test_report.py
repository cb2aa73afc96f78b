import json

import numpy as np
import pytest

from raglab.report import (CSV_HEADER, aggregate, build_rows, render_csv,
                           report, write_timings)


def make_trace(qid, mode, answer, ctx=10, resp=3, unc=None, wall=1.5):
    return {"question_id": qid, "mode": mode, "answer": answer,
            "context_tokens": ctx, "response_tokens": resp,
            "uncertainty": unc, "wall_ms": wall, "retrieved": [],
            "adapter_source": "none"}


GOLD = {"q1": "Paris", "q2": "Berlin"}


def test_rows_and_aggregates():
    traces = [make_trace("q1", "vanilla", "Paris"),
              make_trace("q2", "vanilla", "london"),
              make_trace("q1", "rag", "the Paris", unc={"ppl": 2.0, "en": 1.0,
                                                        "len": 0.5, "ls": 0.9})]
    rows = build_rows(traces, GOLD)
    assert rows[0]["em"] is True and rows[1]["em"] is False
    agg = aggregate(rows)
    assert agg["vanilla"]["em"] == 0.5
    assert agg["vanilla"]["count"] == 2
    assert agg["rag"]["en"] == 1.0
    assert np.isnan(agg["vanilla"]["en"])


def test_missing_gold_id_raises():
    with pytest.raises(KeyError):
        build_rows([make_trace("zzz", "vanilla", "x")], GOLD)


def test_csv_shape_and_determinism(tmp_path):
    traces = [make_trace("q2", "rag", "Berlin", wall=3.3),
              make_trace("q1", "rag", "Paris", wall=1.1),
              make_trace("q1", "vanilla", "nope")]
    rep1 = report(traces, GOLD, csv_path=tmp_path / "m1.csv")
    lines = rep1.csv_text.splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) == 4
    # rows sorted by (mode, question_id); wall_ms stays empty for determinism
    assert lines[1].startswith("q1,rag,")
    assert all(line.endswith(",") for line in lines[1:])
    # identical traces (same wall times or not) -> identical bytes
    traces_again = [make_trace("q2", "rag", "Berlin", wall=9.9),
                    make_trace("q1", "rag", "Paris", wall=0.2),
                    make_trace("q1", "vanilla", "nope")]
    rep2 = report(traces_again, GOLD, csv_path=tmp_path / "m2.csv")
    assert (tmp_path / "m1.csv").read_bytes() == (tmp_path / "m2.csv").read_bytes()
    assert rep1.csv_text == rep2.csv_text


def test_empty_traces_header_only():
    rep = report([], {})
    assert rep.csv_text == ",".join(CSV_HEADER) + "\n"
    assert rep.aggregates == {}


def test_aggregates_match_recomputation_from_csv(tmp_path):
    traces = [make_trace("q1", "vanilla", "Paris"), make_trace("q2", "vanilla", "Berlin")]
    rep = report(traces, GOLD, csv_path=tmp_path / "m.csv")
    rows = (tmp_path / "m.csv").read_text().splitlines()[1:]
    ems = [float(r.split(",")[2]) for r in rows]
    assert np.mean(ems) == rep.aggregates["vanilla"]["em"]


def test_figure_rendered(tmp_path):
    traces = [make_trace("q1", "vanilla", "Paris")]
    report(traces, GOLD, csv_path=tmp_path / "m.csv", figure_path=tmp_path / "fig.png")
    assert (tmp_path / "fig.png").stat().st_size > 0


def test_timings_file(tmp_path):
    traces = [make_trace("q1", "vanilla", "Paris", wall=4.25)]
    write_timings(traces, tmp_path / "t.csv")
    text = (tmp_path / "t.csv").read_text()
    assert "question_id,mode,wall_ms" in text
    assert "4.250" in text
