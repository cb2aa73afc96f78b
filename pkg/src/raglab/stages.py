"""Pipeline stages behind the CLI: each one reads its prerequisites from the
output directory, refuses stale inputs via manifests, writes its artifacts
plus a figure, and is idempotent for a fixed config and seed.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import corpus as cp
from . import figures
from . import model as lm
from . import prag as pg
from . import translator as tr
from .bm25 import build_index
from .config import RunConfig, check_inputs_fresh, file_sha256, write_manifest
from .costmodel import CostParams, cost_table
from .lora import LoraConfig, load_bank, save_bank
from .metrics import uncertainty_metrics
from .pipeline import MODES, DecodingConfig, InferenceRequest, answer, write_traces
from .report import report, write_timings
from .tokenizer import Tokenizer

ARTIFACTS = {
    "corpus": "corpus.jsonl",
    "eval": "eval.jsonl",
    "pretrain": "pretrain.jsonl",
    "vocab": "vocab.json",
    "weights": "model.dypw",
    "bank": "bank.dypl",
    "translator": "translator.dypt",
}


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path, producing_stage: str):
        super().__init__(f"missing {path}; run the '{producing_stage}' stage first")


def _require(path: Path, producing_stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, producing_stage)
    return path


def _load_tokenizer(out: Path) -> Tokenizer:
    with open(_require(out / ARTIFACTS["vocab"], "corpus"), encoding="utf-8") as fh:
        return Tokenizer(json.load(fh))


def _model_config(cfg: RunConfig, vocab_size: int) -> lm.ModelConfig:
    m = cfg.model
    return lm.ModelConfig(layers=m.layers, hidden=m.hidden, ffn=m.ffn,
                          heads=m.heads, vocab=vocab_size, max_seq=m.max_seq)


def stage_corpus(cfg: RunConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    w = cfg.world
    world = cp.gen_world(w.n_entities, w.n_relations, seed=cfg.run.seed,
                         unseen_fraction=w.unseen_fraction, n_nonce=w.n_nonce)
    texts = cp.pretraining_texts(world, seed=cfg.run.seed + 1,
                                 copy_samples=w.copy_samples)
    tok = Tokenizer.from_texts(cp.vocabulary_texts(world))

    cp.save_corpus(world.documents, out / ARTIFACTS["corpus"])
    cp.save_eval(world.eval_qa, out / ARTIFACTS["eval"])
    cp.save_texts(texts, out / ARTIFACTS["pretrain"])
    with open(out / ARTIFACTS["vocab"], "w", encoding="utf-8") as fh:
        json.dump(tok.id_to_word, fh)
    stats = {
        "facts": len(world.facts),
        "documents": len(world.documents),
        "eval_questions": len(world.eval_qa),
        "pretrain_texts": len(texts),
        "vocab": tok.vocab_size,
        "splits": {s: sum(1 for d in world.documents if d.split == s)
                   for s in ("seen", "align", "test")},
    }
    write_manifest(out / "corpus.manifest.json", {},
                   {k: out / ARTIFACTS[k] for k in ("corpus", "eval", "pretrain", "vocab")},
                   cfg)
    return stats


def stage_train_base(cfg: RunConfig, out: Path, force: bool = False) -> dict:
    tok = _load_tokenizer(out)
    texts = cp.load_texts(_require(out / ARTIFACTS["pretrain"], "corpus"))
    check_inputs_fresh(out / "model.manifest.json",
                       {"pretrain": out / ARTIFACTS["pretrain"]}, force)
    model_cfg = _model_config(cfg, tok.vocab_size)
    weights = lm.ModelWeights(model_cfg, seed=cfg.run.seed)
    seqs = [np.array(tok.encode(t)) for t in texts]
    bt = cfg.base_train
    curve = lm.train_base(weights, seqs, steps=bt.steps, lr=bt.lr,
                          seed=cfg.run.seed, batch_size=bt.batch_size)
    lm.save_weights(weights, out / ARTIFACTS["weights"])
    with open(out / "base_loss.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for i, v in enumerate(curve):
            writer.writerow([i, f"{v:.6f}"])
    figures.loss_curve(curve, out / "base_loss.png", title="base-model training loss")
    write_manifest(out / "model.manifest.json",
                   {"pretrain": out / ARTIFACTS["pretrain"], "vocab": out / ARTIFACTS["vocab"]},
                   {"weights": out / ARTIFACTS["weights"]}, cfg)
    return {"steps": len(curve),
            "first_loss": curve[0] if curve else None,
            "final_loss": float(np.mean(curve[-20:])) if curve else None}


def _splits_list(raw: str) -> list[str]:
    return [s.strip() for s in raw.split(",") if s.strip()]


def stage_collect_pairs(cfg: RunConfig, out: Path, force: bool = False,
                        splits: str = "seen,align,test") -> dict:
    tok = _load_tokenizer(out)
    docs = cp.load_corpus(_require(out / ARTIFACTS["corpus"], "corpus"))
    weights = lm.load_weights(_require(out / ARTIFACTS["weights"], "train-base"))
    check_inputs_fresh(out / "bank.manifest.json",
                       {"corpus": out / ARTIFACTS["corpus"],
                        "weights": out / ARTIFACTS["weights"]}, force)
    wanted = _splits_list(splits)
    chosen = [d for d in docs if d.split in wanted]
    pcfg = pg.PragTrainConfig(lr=cfg.prag.lr, epochs=cfg.prag.epochs,
                              seed=cfg.run.seed, n_rewrites=cfg.prag.n_rewrites,
                              m_qa=cfg.prag.m_qa)
    lora_cfg = LoraConfig(r=cfg.lora.r, alpha=cfg.lora.alpha)
    aligned = pg.collect_pairs(weights, tok, chosen, lora_cfg, pcfg,
                               workers=cfg.prag.workers)
    bank_bytes = save_bank({p.doc_id: p.adapter for p in aligned},
                           weights.config, out / ARTIFACTS["bank"])
    rows = pg.pair_rows(aligned)
    with open(out / "pairs.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    figures.adapter_losses([p.doc_id for p in aligned],
                           [p.base_loss for p in aligned],
                           [p.final_loss for p in aligned],
                           out / "adapter_losses.png")
    write_manifest(out / "bank.manifest.json",
                   {"corpus": out / ARTIFACTS["corpus"], "weights": out / ARTIFACTS["weights"]},
                   {"bank": out / ARTIFACTS["bank"]}, cfg)
    return {"documents": len(chosen), "bank_bytes": bank_bytes,
            "mean_base_loss": float(np.mean([p.base_loss for p in aligned])),
            "mean_final_loss": float(np.mean([p.final_loss for p in aligned]))}


def _rebuild_pairs(cfg: RunConfig, weights, tok, docs, bank) -> pg.AlignmentSet:
    """Doc-Param pairs from the bank plus deterministically regenerated
    augmented sets (same per-doc seeds as collection time)."""
    pairs = []
    for d in docs:
        if d.id not in bank:
            raise MissingArtifactError(f"bank adapter for {d.id}", "collect-pairs")
        aug = cp.augment(d, cfg.prag.n_rewrites, cfg.prag.m_qa,
                         seed=pg.doc_seed(cfg.run.seed, d.id))
        pairs.append(pg.DocParamPair(d.id, bank[d.id], aug, d, float("nan"),
                                     float("nan"), 0, 0.0))
    return pg.AlignmentSet(pairs)


def stage_train_translator(cfg: RunConfig, out: Path, force: bool = False,
                           lambda1: float | None = None,
                           lambda2: float | None = None,
                           max_pairs: int | None = None,
                           p_dim: int | None = None,
                           save_as: str | None = None) -> dict:
    tok = _load_tokenizer(out)
    docs = cp.load_corpus(_require(out / ARTIFACTS["corpus"], "corpus"))
    weights = lm.load_weights(_require(out / ARTIFACTS["weights"], "train-base"))
    bank = load_bank(_require(out / ARTIFACTS["bank"], "collect-pairs"),
                     weights.config, alpha=cfg.lora.alpha)
    check_inputs_fresh(out / "translator.manifest.json",
                       {"bank": out / ARTIFACTS["bank"],
                        "weights": out / ARTIFACTS["weights"]}, force)
    tt = cfg.translator_train
    wanted = _splits_list(tt.splits)
    chosen = [d for d in docs if d.split in wanted and d.id in bank]
    if max_pairs is not None:
        chosen = chosen[:max_pairs]
    if not chosen:
        raise MissingArtifactError("bank adapters for translator splits", "collect-pairs")
    aligned = _rebuild_pairs(cfg, weights, tok, chosen, bank)
    tcfg = tr.TranslatorConfig(p=p_dim if p_dim is not None else cfg.translator.p,
                               layer_encoding=cfg.translator.layer_encoding,
                               embed_pooling=cfg.translator.embed_pooling)
    train_cfg = tr.TranslatorTrainConfig(
        lr=tt.lr, epochs=tt.epochs,
        lambda1=tt.lambda1 if lambda1 is None else lambda1,
        lambda2=tt.lambda2 if lambda2 is None else lambda2,
        seed=cfg.run.seed)
    translator, curves = tr.train_translator(weights, aligned, tcfg, train_cfg, tok)
    target = out / (save_as or ARTIFACTS["translator"])
    tr.save_translator(translator, target)
    with open(out / "translator_loss.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "total", "pred", "mse", "kl"])
        for i in range(len(curves["total"])):
            writer.writerow([i] + [f"{curves[k][i]:.6f}" for k in ("total", "pred", "mse", "kl")])
    figures.component_curves(curves, out / "alignment_loss.png")
    if save_as is None:
        write_manifest(out / "translator.manifest.json",
                       {"bank": out / ARTIFACTS["bank"], "weights": out / ARTIFACTS["weights"]},
                       {"translator": target}, cfg)
    return {"pairs": len(aligned.pairs),
            "first_total": curves["total"][0] if curves["total"] else None,
            "final_total": float(np.mean(curves["total"][-len(aligned.pairs):]))
            if curves["total"] else None,
            "scalar_count": translator.scalar_count()}


def stage_run(cfg: RunConfig, out: Path, mode: str, force: bool = False,
              split: str | None = None, with_uncertainty: bool = False,
              translator_file: str | None = None,
              trace_suffix: str = "") -> dict:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    tok = _load_tokenizer(out)
    docs = cp.load_corpus(_require(out / ARTIFACTS["corpus"], "corpus"))
    eval_items = cp.load_eval(_require(out / ARTIFACTS["eval"], "corpus"))
    weights = lm.load_weights(_require(out / ARTIFACTS["weights"], "train-base"))
    doc_map = {d.id: d for d in docs}
    index = build_index(docs, k1=cfg.retrieval.k1, b=cfg.retrieval.b)

    bank = None
    if mode == "prag":
        bank = load_bank(_require(out / ARTIFACTS["bank"], "collect-pairs"),
                         weights.config, alpha=cfg.lora.alpha)
    translator = None
    if mode in ("dyprag", "dyprag-combine"):
        tpath = out / (translator_file or ARTIFACTS["translator"])
        translator = tr.load_translator(_require(tpath, "train-translator"), weights.config)

    split = split if split is not None else cfg.run.eval_split
    wanted = _splits_list(split) if split != "all" else ["seen", "align", "test"]
    questions = [q for q in eval_items if q.split in wanted]
    decoding = DecodingConfig(greedy=True, max_new=cfg.decoding.max_new,
                              temperature=cfg.decoding.temperature,
                              top_p=cfg.decoding.top_p, top_k=cfg.decoding.top_k,
                              seed=cfg.run.seed)
    traces = []
    for q in questions:
        request = InferenceRequest(question_id=q.id, question=q.question, mode=mode,
                                   c=cfg.retrieval.c, decoding=decoding)
        trace = answer(weights, tok, bank, translator, index, doc_map, request)
        if with_uncertainty:
            adapter = None
            if trace.adapter_source == "bank":
                adapter = _bank_average(bank, trace.retrieved)
            elif trace.adapter_source == "translated":
                adapter = _translated_average(weights, tok, translator, doc_map,
                                              trace.retrieved)
            passages = [doc_map[d].text for d, _ in trace.retrieved] \
                if mode in ("rag", "dyprag-combine") else []
            prompt = tok.encode(cp.qa_prompt_text(q.question, passages))
            trace.uncertainty = uncertainty_metrics(
                weights, tok, adapter, prompt, k=cfg.decoding.samples,
                max_new=cfg.decoding.max_new, temperature=cfg.decoding.temperature,
                top_p=cfg.decoding.top_p, top_k=cfg.decoding.top_k, seed=cfg.run.seed)
        traces.append(trace)
    trace_path = out / f"traces-{mode}{trace_suffix}.jsonl"
    write_traces(traces, trace_path)
    inputs = {"corpus": out / ARTIFACTS["corpus"], "weights": out / ARTIFACTS["weights"]}
    if mode == "prag":
        inputs["bank"] = out / ARTIFACTS["bank"]
    if mode in ("dyprag", "dyprag-combine"):
        inputs["translator"] = out / (translator_file or ARTIFACTS["translator"])
    write_manifest(out / f"traces-{mode}{trace_suffix}.manifest.json", inputs,
                   {"traces": trace_path}, cfg)
    return {"mode": mode, "questions": len(traces), "traces": str(trace_path)}


def _bank_average(bank, retrieved):
    from .lora import average_adapters
    return average_adapters([bank[d] for d, _ in retrieved])


def _translated_average(weights, tok, translator, doc_map, retrieved):
    from .lora import average_adapters
    adapters = []
    for doc_id, _ in retrieved:
        emb = lm.encode_document(weights, np.array(tok.encode(doc_map[doc_id].text)),
                                 pooling=translator.config.embed_pooling)
        adapters.append(tr.translate(translator, emb))
    return average_adapters(adapters)


def stage_eval(cfg: RunConfig, out: Path, modes: list[str],
               trace_suffix: str = "", csv_name: str = "metrics.csv") -> dict:
    from .pipeline import read_traces
    eval_items = cp.load_eval(_require(out / ARTIFACTS["eval"], "corpus"))
    gold = {q.id: q.answer for q in eval_items}
    traces = []
    for mode in modes:
        path = out / f"traces-{mode}{trace_suffix}.jsonl"
        traces.extend(read_traces(_require(path, f"run --mode {mode}")))
    rep = report(traces, gold, csv_path=out / csv_name,
                 figure_path=out / "metrics_by_mode.png")
    write_timings(traces, out / "timings.csv")
    with open(out / "aggregates.json", "w", encoding="utf-8") as fh:
        json.dump(rep.aggregates, fh, indent=1, sort_keys=True, allow_nan=True)
        fh.write("\n")
    trace_inputs = {f"traces-{m}": out / f"traces-{m}{trace_suffix}.jsonl" for m in modes}
    write_manifest(out / f"{csv_name}.manifest.json", trace_inputs,
                   {"metrics": out / csv_name}, cfg)
    return {"modes": modes, "aggregates": rep.aggregates, "csv": str(out / csv_name)}


def stage_cost(cfg: RunConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    params = CostParams(**{f: getattr(cfg.cost, f) for f in (
        "d", "q", "qa", "resp", "c", "layers", "hidden", "ffn", "r", "p",
        "n_pairs", "m_test", "e1", "e2", "adapters_per_question", "bits")})
    table = cost_table(params)
    with open(out / "cost.json", "w", encoding="utf-8") as fh:
        json.dump(table, fh, indent=1, sort_keys=True)
        fh.write("\n")
    lines = []
    for method, entry in table.items():
        lines.append(f"[{method}]")
        for key in sorted(entry):
            if key == "notes":
                continue
            value = entry[key]
            if key.startswith("storage") or key.startswith("temporal"):
                if key.endswith("bytes"):
                    lines.append(f"  {key} = {value} ({value / (1024 * 1024):.2f} MiB)")
                else:
                    lines.append(f"  {key} = {value}")
            elif isinstance(value, float):
                lines.append(f"  {key} = {value:.6g}")
            else:
                lines.append(f"  {key} = {value}")
        for note in entry["notes"]:
            lines.append(f"  note: {note}")
    text = "\n".join(lines) + "\n"
    (out / "cost.txt").write_text(text, encoding="utf-8")
    figures.cost_comparison(table, out / "cost_comparison.png")
    write_manifest(out / "cost.manifest.json", {},
                   {"cost_json": out / "cost.json", "cost_txt": out / "cost.txt"}, cfg)
    return {"table": table, "text": text}


def stage_ablate(cfg: RunConfig, out: Path, param: str, values: list[str],
                 force: bool = False) -> dict:
    """Sweep one knob (p, pairs, or lambda2); each value retrains the
    translator and evaluates dyprag on the configured eval split."""
    if param not in ("p", "pairs", "lambda2"):
        raise ValueError("ablate supports param in {p, pairs, lambda2}")
    rows = []
    for raw in values:
        kwargs = {}
        label = raw
        if param == "p":
            kwargs["p_dim"] = int(raw)
        elif param == "pairs":
            kwargs["max_pairs"] = int(raw)
        else:
            kwargs["lambda2"] = float(raw)
        suffix = f"-ablate-{param}-{label}"
        stage_train_translator(cfg, out, force=True,
                               save_as=f"translator{suffix}.dypt", **kwargs)
        stage_run(cfg, out, "dyprag", force=force,
                  translator_file=f"translator{suffix}.dypt", trace_suffix=suffix)
        result = stage_eval(cfg, out, ["dyprag"], trace_suffix=suffix,
                            csv_name=f"metrics{suffix}.csv")
        agg = result["aggregates"]["dyprag"]
        rows.append({"param": param, "value": raw,
                     "em": f"{agg['em']:.6f}", "f1": f"{agg['f1']:.6f}"})
    path = out / f"ablate_{param}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["param", "value", "em", "f1"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    figures.ablation([r["value"] for r in rows], [float(r["em"]) for r in rows],
                     param, out / f"ablate_{param}.png")
    write_manifest(out / f"ablate_{param}.manifest.json",
                   {"bank": out / ARTIFACTS["bank"], "weights": out / ARTIFACTS["weights"]},
                   {"table": path}, cfg)
    return {"rows": rows, "csv": str(path)}
